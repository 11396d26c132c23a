#include <gtest/gtest.h>

#include <random>

#include "istn.hpp"

using namespace istn;

namespace {

Image random_image(Shape2 s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Image img(s);
  for (auto& v : img.values()) v = u(rng);
  return img;
}

// Plain scalar loop, independent of mse().
double loop_mse(const Image& a, const Image& b) {
  double acc = 0.0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) acc += (a(y, x) - b(y, x)) * (a(y, x) - b(y, x));
  return acc / (a.height() * a.width());
}

Image square(int y0, int x0, int side) {
  Image m(16, 16);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m(y, x) = 1.0;
  return m;
}

}  // namespace

TEST(Mse, Examples) {
  EXPECT_EQ(mse(Image(4, 4, 0.3), Image(4, 4, 0.3)), 0.0);
  EXPECT_EQ(mse(Image(4, 4, 1.0), Image(4, 4, 0.0)), 1.0);
  Image a(1, 2), b(1, 2, 1.0);
  a(0, 1) = 1.0;
  EXPECT_EQ(mse(a, b), 0.5);
  EXPECT_THROW(mse(Image(2, 2), Image(2, 3)), DataError);
}

TEST(Mse, AliasesShareExamples) {
  Image a(1, 2), b(1, 2, 1.0);
  a(0, 1) = 1.0;
  for (auto f : {loss_stn_u, loss_stn_s, loss_refine}) {
    EXPECT_EQ(f(a, a), 0.0);
    EXPECT_EQ(f(Image(3, 3, 1.0), Image(3, 3)), 1.0);
    EXPECT_EQ(f(a, b), 0.5);
  }
  EXPECT_EQ(loss_itn(a, b), 0.5);
}

TEST(LossStnS, DisjointShiftedSquares) {
  const Image sm = square(6, 4, 2), sf = square(6, 6, 2);
  const Image warped = resample(sm, identity_field(sm.shape()));
  int differ = 0;
  for (std::size_t i = 0; i < sm.size(); ++i) differ += (sm[i] != sf[i]);
  EXPECT_EQ(differ, 8);
  EXPECT_NEAR(loss_stn_s(warped, sf), differ / 256.0, 1e-12);
  EXPECT_NEAR(loss_stn_s(warped, sf), 0.03125, 1e-12);
  EXPECT_EQ(loss_stn_s(sm, sm), 0.0);
}

TEST(LossIstnExplicit, PerfectCaseIsZero) {
  const auto s = generate_conflict_pair(3, SynthConfig{});
  const auto r = loss_istn_explicit(s.soi_moving, s.soi_fixed, s.soi_moving, s.soi_fixed, s.soi_fixed);
  EXPECT_EQ(r.total, 0.0);
}

TEST(LossIstnExplicit, PerfectItnLeavesOnlyStnTerm) {
  const auto s = generate_conflict_pair(3, SynthConfig{});
  const auto r = loss_istn_explicit(s.soi_moving, s.soi_fixed, s.soi_moving, s.soi_fixed, s.soi_moving);
  EXPECT_GT(r.total, 0.0);
  EXPECT_EQ(r.total, loss_stn_s(s.soi_moving, s.soi_fixed));
}

TEST(LossIstnExplicit, TotalIsSumOfTerms) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 10; ++k) {
    const Shape2 s{8, 8};
    const Image mp = random_image(s, rng), fp = random_image(s, rng), sm = random_image(s, rng),
                sf = random_image(s, rng), smt = random_image(s, rng);
    const auto r = loss_istn_explicit(mp, fp, sm, sf, smt);
    EXPECT_NEAR(r.total, loop_mse(mp, sm) + loop_mse(fp, sf) + loop_mse(smt, sf), 1e-6);
    double sum = 0.0;
    for (const auto& [_, v] : r.components) sum += v;
    EXPECT_NEAR(r.total, sum, 1e-6);
    EXPECT_EQ(r.components.size(), 3u);
  }
}

TEST(LossIstnImplicit, PerfectCaseIsZero) {
  const auto s = generate_conflict_pair(3, SynthConfig{});
  // aligned: M'_theta = S_F, S_{M;theta} = S_F, F' = S_F
  const auto r = loss_istn_implicit(s.soi_fixed, s.soi_fixed, s.soi_fixed, s.soi_fixed);
  EXPECT_EQ(r.total, 0.0);
}

TEST(LossIstnImplicit, IdentityItnIsolatesCrossTerms) {
  const auto s = generate_conflict_pair(3, SynthConfig{});
  // aligned SoI, but M'_theta and F' are intensity images
  const auto r = loss_istn_implicit(s.fixed, s.fixed, s.soi_fixed, s.soi_fixed);
  EXPECT_EQ(r.components.at("stn_s"), 0.0);
  EXPECT_GT(r.components.at("stn_i_m"), 0.0);
  EXPECT_GT(r.components.at("stn_i_f"), 0.0);
}

TEST(LossIstnImplicit, TotalIsSumOfTerms) {
  std::mt19937_64 rng(2);
  for (int k = 0; k < 10; ++k) {
    const Shape2 s{8, 8};
    const Image mpt = random_image(s, rng), fp = random_image(s, rng), smt = random_image(s, rng),
                sf = random_image(s, rng);
    const auto r = loss_istn_implicit(mpt, fp, smt, sf);
    EXPECT_NEAR(r.total, loop_mse(mpt, sf) + loop_mse(smt, fp) + loop_mse(smt, sf), 1e-6);
  }
}

TEST(Losses, NonNegativeAndGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const double h = 1e-6;
  for (int k = 0; k < 5; ++k) {
    Image a = random_image({8, 8}, rng);
    const Image b = random_image({8, 8}, rng);
    EXPECT_GE(mse(a, b), 0.0);
    const Image g = mse_grad(a, b);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double orig = a[i];
      a[i] = orig + h;
      const double lp = mse(a, b);
      a[i] = orig - h;
      const double lm = mse(a, b);
      a[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_NEAR(g[i], fd, 1e-3 * std::abs(fd) + 1e-9);
    }
  }
}

TEST(Losses, WeightsScaleComponents) {
  std::mt19937_64 rng(4);
  const Shape2 s{8, 8};
  const Image a = random_image(s, rng), b = random_image(s, rng), c = random_image(s, rng),
              d = random_image(s, rng), e = random_image(s, rng);
  TermWeights w;
  w.itn_m = 0.0;
  w.itn_f = 0.0;
  const auto r = loss_istn_explicit(a, b, c, d, e, w);
  EXPECT_EQ(r.total, r.components.at("stn_s"));
}

TEST(Losses, RefineDegeneratesToUnsupervisedForIdentityItn) {
  BundleSpec spec;
  spec.variant = Variant::stn_u;
  ModelBundle b = make_bundle(spec, 1);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& v : b.stn.params().tensor("stn.fc2.weight")) v = n(rng);
  const auto s = generate_conflict_pair(12, SynthConfig{});
  const auto p = predict(b, s.moving, s.fixed);
  const auto ev = refine_objective(b.spec, b.stn, p.itn_moving, p.itn_moving, p.itn_fixed, Matrix3::Identity(), 0.0,
                                   nullptr);
  const auto train = pipeline_loss(b, {&s.moving, &s.fixed, nullptr, nullptr, Matrix3::Identity()}, {});
  EXPECT_EQ(ev.loss, train.components.at("stn_u"));
  EXPECT_EQ(ev.loss, train.total);
}

TEST(Losses, SupervisedVariantNeedsSoi) {
  BundleSpec spec;
  spec.variant = Variant::stn_s;
  const ModelBundle b = make_bundle(spec, 1);
  const auto s = generate_conflict_pair(12, SynthConfig{});
  EXPECT_THROW(pipeline_loss(b, {&s.moving, &s.fixed, nullptr, nullptr, Matrix3::Identity()}, {}), DataError);
}
