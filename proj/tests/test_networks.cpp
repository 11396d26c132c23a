#include <gtest/gtest.h>

#include <random>

#include "istn.hpp"

using namespace istn;

namespace {

BundleSpec spec_for(Variant v, TransformModel m = TransformModel::affine) {
  BundleSpec s;
  s.variant = v;
  s.transform_model = m;
  return s;
}

void jitter(std::span<double> t, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t) v = n(rng);
}

// Wakes up the zero-initialised final layers so every layer sees gradient.
ModelBundle awake_bundle(Variant v, TransformModel m, std::uint64_t seed) {
  ModelBundle b = make_bundle(spec_for(v, m), seed);
  std::mt19937_64 rng(seed);
  jitter(b.stn.params().tensor("stn.fc2.weight"), rng, 0.05);
  if (uses_itn(v)) jitter(b.itn.params().tensor("itn.conv4.weight"), rng, 0.05);
  return b;
}

}  // namespace

TEST(Variant, NamesRoundTrip) {
  for (auto v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("STN-x"), UsageError);
}

TEST(Itn, OutputShapeMatchesInput) {
  Itn itn(ItnConfig{}, {32, 24}, 3);
  EXPECT_EQ(itn.forward(Image(32, 24, 0.3)).shape(), (Shape2{32, 24}));
}

TEST(Itn, IdentityAtInitialisation) {
  const auto s = generate_conflict_pair(4, SynthConfig{});
  Itn itn(ItnConfig{}, s.moving.shape(), 9);
  const Image out = itn.forward(s.moving);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], s.moving[i], 1e-12);
}

TEST(Itn, WeightSharing) {
  const auto s = generate_conflict_pair(4, SynthConfig{});
  ModelBundle b = awake_bundle(Variant::istn_e, TransformModel::affine, 2);
  const auto before = predict(b, s.moving, s.fixed);
  // one conv stack serves both inputs
  int convs = 0;
  for (const auto& t : b.itn.params().specs()) convs += t.name.ends_with(".weight");
  EXPECT_EQ(convs, 4);
  b.itn.params().tensor("itn.conv2.bias")[0] += 0.5;
  const auto after = predict(b, s.moving, s.fixed);
  EXPECT_NE(before.itn_moving, after.itn_moving);
  EXPECT_NE(before.itn_fixed, after.itn_fixed);
}

TEST(Stn, ZeroHeadGivesIdentityTransform) {
  const auto s = generate_conflict_pair(8, SynthConfig{});
  for (auto m : {TransformModel::affine, TransformModel::bspline}) {
    for (auto v : kAllVariants) {
      const ModelBundle b = make_bundle(spec_for(v, m), 5);
      const auto raw = stn_forward(b, s.moving, s.fixed);
      for (double r : raw) EXPECT_EQ(r, 0.0);
      const auto p = predict(b, s.moving, s.fixed);
      EXPECT_EQ(p.params, identity_params(b.spec));
      const Image warped = resample(s.moving, to_field(p.params, s.moving.shape()));
      for (std::size_t i = 0; i < warped.size(); ++i) EXPECT_NEAR(warped[i], s.moving[i], 1e-6);
    }
  }
}

TEST(Stn, OutputLengthMatchesModel) {
  EXPECT_EQ(make_bundle(spec_for(Variant::stn_u), 1).stn.output_count(), 6);
  EXPECT_EQ(make_bundle(spec_for(Variant::stn_u, TransformModel::bspline), 1).stn.output_count(), 7 * 7 * 2);
}

TEST(Stn, DeterministicForward) {
  const auto s = generate_conflict_pair(8, SynthConfig{});
  const ModelBundle b = awake_bundle(Variant::stn_s, TransformModel::affine, 3);
  EXPECT_EQ(stn_forward(b, s.moving, s.fixed), stn_forward(b, s.moving, s.fixed));
  EXPECT_THROW(stn_forward(b, s.moving, Image(16, 16)), DataError);
}

TEST(Bundle, IstnVariantsCarryAnItn) {
  EXPECT_TRUE(make_bundle(spec_for(Variant::stn_u), 1).itn.is_identity());
  EXPECT_TRUE(make_bundle(spec_for(Variant::stn_s), 1).itn.is_identity());
  EXPECT_FALSE(make_bundle(spec_for(Variant::istn_e), 1).itn.is_identity());
  ModelBundle b = make_bundle(spec_for(Variant::stn_u), 1);
  b.spec.variant = Variant::istn_i;
  EXPECT_THROW(validate(b), DataError);
}

TEST(Bundle, PredictRejectsWrongResolution) {
  const ModelBundle b = make_bundle(spec_for(Variant::stn_u), 1);
  EXPECT_THROW(predict(b, Image(16, 16), Image(16, 16)), DataError);
}

class GradientFlow : public ::testing::TestWithParam<std::tuple<Variant, TransformModel>> {};

TEST_P(GradientFlow, EveryLayerReceivesGradient) {
  const auto [v, m] = GetParam();
  const ModelBundle b = awake_bundle(v, m, 21);
  Gradients g = Gradients::zeros_like(b);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto s = generate_conflict_pair(100 + seed, SynthConfig{});
    pipeline_loss(b, {&s.moving, &s.fixed, &s.soi_moving, &s.soi_fixed, Matrix3::Identity()}, {}, &g);
  }
  auto check = [](const nn::ParamSet& ps, const std::vector<double>& grads) {
    for (const auto& t : ps.specs()) {
      bool any = false;
      for (std::size_t i = 0; i < t.size; ++i) any = any || grads[t.offset + i] != 0.0;
      EXPECT_TRUE(any) << t.name;
    }
  };
  check(b.stn.params(), g.stn);
  if (uses_itn(v)) check(b.itn.params(), g.itn);
}

TEST_P(GradientFlow, MatchesFiniteDifferences) {
  const auto [v, m] = GetParam();
  ModelBundle b = awake_bundle(v, m, 33);
  const auto s = generate_conflict_pair(77, SynthConfig{});
  const PairSample pair{&s.moving, &s.fixed, &s.soi_moving, &s.soi_fixed, Matrix3::Identity()};
  Gradients g = Gradients::zeros_like(b);
  pipeline_loss(b, pair, {}, &g);
  std::mt19937_64 rng(4);
  const double h = 1e-6;
  auto probe = [&](nn::ParamSet& ps, const std::vector<double>& grads, const char* what) {
    // largest-gradient entry of every tensor plus a few random ones
    std::vector<std::size_t> idx;
    for (const auto& t : ps.specs()) {
      std::size_t best = t.offset;
      for (std::size_t i = t.offset; i < t.offset + t.size; ++i) {
        if (std::abs(grads[i]) > std::abs(grads[best])) best = i;
      }
      idx.push_back(best);
    }
    std::uniform_int_distribution<std::size_t> pick(0, ps.size() - 1);
    for (int k = 0; k < 6; ++k) idx.push_back(pick(rng));
    for (std::size_t i : idx) {
      const double orig = ps.values()[i];
      ps.values()[i] = orig + h;
      const double lp = pipeline_loss(b, pair, {}).total;
      ps.values()[i] = orig - h;
      const double lm = pipeline_loss(b, pair, {}).total;
      ps.values()[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      const double tol = 1e-3 * std::max(std::abs(fd), std::abs(grads[i])) + 1e-8;
      EXPECT_NEAR(grads[i], fd, tol) << what << " index " << i;
    }
  };
  probe(b.stn.params(), g.stn, "stn");
  if (uses_itn(v)) probe(b.itn.params(), g.itn, "itn");
}

INSTANTIATE_TEST_SUITE_P(Variants, GradientFlow,
                         ::testing::Combine(::testing::Values(Variant::stn_u, Variant::stn_s, Variant::istn_e,
                                                              Variant::istn_i),
                                            ::testing::Values(TransformModel::affine, TransformModel::bspline)),
                         [](const auto& info) {
                           std::string n = to_string(std::get<0>(info.param)) + "_" +
                                           to_string(std::get<1>(info.param));
                           for (auto& c : n) {
                             if (c == '-') c = '_';
                           }
                           return n;
                         });
