#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "istn.hpp"

using namespace istn;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("istn_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

// Hash oracle: sha256 over the concatenated bytes of every sample file.
std::string bytes_hash(const fs::path& dir, const std::vector<std::uint64_t>& seeds) {
  Sha256 h;
  for (auto seed : seeds) {
    for (const char* f : {"M.pgm", "F.pgm", "S_M.pgm", "S_F.pgm", "mask_M.pgm", "mask_F.pgm", "gt.txt", "meta.json"}) {
      const auto b = read_bytes(dir / std::to_string(seed) / f);
      h.update(std::to_string(seed) + "/" + f + "\n");
      h.update(std::string(b.begin(), b.end()));
    }
  }
  return h.hex();
}

std::vector<ToySample> few(PairKind kind, SynthConfig cfg = {}) { return generate_samples(kind, cfg, 50, 0, 4); }

}  // namespace

using Dataset_ = TempDir;

TEST_F(Dataset_, RoundTripIsBitIdentical) {
  for (auto enc : {SoIEncoding::binary_mask, SoIEncoding::distance_map, SoIEncoding::centroid_map}) {
    SynthConfig cfg;
    cfg.encoding.kind = enc;
    cfg.deform_max_displacement = 1.0;
    const auto samples = few(PairKind::plain, cfg);
    const fs::path d = dir_ / to_string(enc);
    write_dataset(samples, d, PairKind::plain, cfg);
    const Dataset back = read_dataset(d);
    ASSERT_EQ(back.samples.size(), samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_EQ(back.samples[i], samples[i]) << to_string(enc);
    EXPECT_EQ(back.info.kind, PairKind::plain);
    EXPECT_EQ(back.info.config.encoding.kind, enc);
  }
}

TEST_F(Dataset_, ManifestRecordsSeedsAndConfig) {
  const auto samples = few(PairKind::conflict);
  const auto path = write_dataset(samples, dir_, PairKind::conflict, SynthConfig{});
  const Json m = read_json(path);
  EXPECT_EQ(m.at("format"), kDatasetFormat);
  EXPECT_EQ(m.at("seeds").size(), 4u);
  EXPECT_EQ(m.at("seeds")[0].get<std::uint64_t>(), samples[0].seed);
  EXPECT_EQ(m.at("encoding").at("kind"), "binary_mask");
  EXPECT_EQ(synth_config_from_json(m.at("config")).stroke_width, SynthConfig{}.stroke_width);
  // gt.txt keeps the fixed order t_x t_y phi s_x s_y psi
  EXPECT_EQ(read_params(dir_ / std::to_string(samples[1].seed) / "gt.txt"), samples[1].gt_params);
}

TEST_F(Dataset_, MissingFileIsNamed) {
  const auto samples = few(PairKind::conflict);
  write_dataset(samples, dir_, PairKind::conflict, SynthConfig{});
  const fs::path victim = dir_ / std::to_string(samples[2].seed) / "S_F.pgm";
  fs::remove(victim);
  try {
    read_dataset(dir_);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(victim.string()), std::string::npos) << e.what();
  }
}

TEST_F(Dataset_, CorruptManifestRejected) {
  write_dataset(few(PairKind::conflict), dir_, PairKind::conflict, SynthConfig{});
  write_text(dir_ / "manifest.json", "{\"format\": ");
  EXPECT_THROW(read_dataset(dir_), DataError);
  write_text(dir_ / "manifest.json", "{\"format\": \"something-else\"}");
  EXPECT_THROW(read_dataset(dir_), DataError);
}

TEST_F(Dataset_, ShapeMismatchRejected) {
  const auto samples = few(PairKind::conflict);
  write_dataset(samples, dir_, PairKind::conflict, SynthConfig{});
  write_raster(dir_ / std::to_string(samples[0].seed) / "M.pgm", Image(16, 16), {0.0, 1.0});
  EXPECT_THROW(read_dataset(dir_, false), DataError);
}

TEST_F(Dataset_, HashChangesIffSampleChanges) {
  const auto samples = few(PairKind::conflict);
  std::vector<std::uint64_t> seeds;
  for (const auto& s : samples) seeds.push_back(s.seed);
  write_dataset(samples, dir_ / "a", PairKind::conflict, SynthConfig{});
  write_dataset(samples, dir_ / "b", PairKind::conflict, SynthConfig{});
  const auto ha = read_dataset_info(dir_ / "a").content_hash;
  EXPECT_EQ(ha, read_dataset_info(dir_ / "b").content_hash);
  EXPECT_EQ(ha, bytes_hash(dir_ / "a", seeds));

  auto changed = samples;
  changed[3].moving(10, 10) += 0.25;
  write_dataset(changed, dir_ / "c", PairKind::conflict, SynthConfig{});
  const auto hc = read_dataset_info(dir_ / "c").content_hash;
  EXPECT_NE(ha, hc);
  EXPECT_EQ(hc, bytes_hash(dir_ / "c", seeds));

  // tampering after the fact is detected on read
  write_raster(dir_ / "b" / std::to_string(seeds[0]) / "F.pgm", changed[3].moving, {0.0, 1.0});
  EXPECT_THROW(read_dataset(dir_ / "b"), DataError);
}

TEST_F(Dataset_, SplitsRegenerateIdentically) {
  const SplitSizes sizes{3, 2, 3};
  const Json a = generate_splits(dir_ / "a", PairKind::conflict, SynthConfig{}, 7, sizes);
  const Json b = generate_splits(dir_ / "b", PairKind::conflict, SynthConfig{}, 7, sizes);
  const Json c = generate_splits(dir_ / "c", PairKind::conflict, SynthConfig{}, 8, sizes);
  EXPECT_EQ(a.at("content_hash"), b.at("content_hash"));
  EXPECT_NE(a.at("content_hash"), c.at("content_hash"));
  EXPECT_EQ(read_dataset(dir_ / "a" / "val").samples.size(), 2u);
  EXPECT_THROW(generate_splits(dir_ / "d", PairKind::conflict, SynthConfig{}, 7, {0, 1, 1}), UsageError);
}

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(Sha256().update(std::string("abc")).hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(Sha256().hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(SplitSizes, DefaultsMatchProtocol) {
  const SplitSizes s;
  EXPECT_EQ(s.train, 100);
  EXPECT_EQ(s.val, 10);
  EXPECT_EQ(s.test, 100);
}

using Checkpoint = TempDir;

TEST_F(Checkpoint, RoundTripPreservesPredictBitwise) {
  const auto s = generate_conflict_pair(3, SynthConfig{});
  for (auto v : kAllVariants) {
    BundleSpec spec;
    spec.variant = v;
    ModelBundle b = make_bundle(spec, 17);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 0.05);
    for (auto& w : b.stn.params().tensor("stn.fc2.weight")) w = n(rng);
    const fs::path p = dir_ / (to_string(v) + ".ckpt");
    save_checkpoint(p, b, {{"note", "x"}});
    Json config;
    const ModelBundle back = load_checkpoint(p, &config);
    EXPECT_EQ(config.at("note"), "x");
    EXPECT_EQ(bundle_checksum(back), bundle_checksum(b));
    const auto a = predict(b, s.moving, s.fixed), c = predict(back, s.moving, s.fixed);
    EXPECT_EQ(a.params, c.params);
    EXPECT_EQ(a.itn_moving, c.itn_moving);
    EXPECT_EQ(a.itn_fixed, c.itn_fixed);
    EXPECT_EQ(back.spec.variant, v);
  }
}

TEST_F(Checkpoint, BSplineWithPrealignment) {
  BundleSpec aspec;
  aspec.variant = Variant::stn_u;
  ModelBundle pre = make_bundle(aspec, 4);
  for (auto& w : pre.stn.params().tensor("stn.fc2.bias")) w = 0.1;
  BundleSpec bspec;
  bspec.variant = Variant::istn_i;
  bspec.transform_model = TransformModel::bspline;
  ModelBundle b = make_bundle(bspec, 5);
  b.prealign = std::make_shared<const ModelBundle>(pre);
  for (auto& w : b.stn.params().tensor("stn.fc2.bias")) w = 0.2;
  save_checkpoint(dir_ / "b.ckpt", b);
  const ModelBundle back = load_checkpoint(dir_ / "b.ckpt");
  ASSERT_TRUE(back.prealign);
  const auto s = generate_conflict_pair(3, SynthConfig{});
  EXPECT_EQ(predict(b, s.moving, s.fixed).params, predict(back, s.moving, s.fixed).params);
}

TEST_F(Checkpoint, CorruptFileRejected) {
  BundleSpec spec;
  save_checkpoint(dir_ / "a.ckpt", make_bundle(spec, 1));
  auto bytes = read_bytes(dir_ / "a.ckpt");
  bytes.resize(bytes.size() / 2);
  {
    std::ofstream os(dir_ / "b.ckpt", std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_THROW(load_checkpoint(dir_ / "b.ckpt"), DataError);
  EXPECT_THROW(load_checkpoint(dir_ / "missing.ckpt"), DataError);
}
