#pragma once

// On-disk datasets. Layout of one dataset directory:
//
//   <dir>/manifest.json
//   <dir>/<seed>/{M,F,S_M,S_F,mask_M,mask_F}.pgm   16-bit PGM, range in a header comment
//   <dir>/<seed>/gt.txt                             t_x t_y phi s_x s_y psi
//   <dir>/<seed>/meta.json                          landmarks, optional B-spline deformation
//
// A generated dataset root holds train/, val/ and test/ splits plus a root
// manifest with the split hashes.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "istn/common.hpp"
#include "istn/hash.hpp"
#include "istn/image.hpp"
#include "istn/synthdata.hpp"

namespace istn {

using Json = nlohmann::json;

inline constexpr const char* kDatasetFormat = "istn-dataset/1";

// ---------------------------------------------------------------------------
// JSON conversions

inline Json to_json(const AffineBounds& b) {
  return {{"t_max", b.t_max}, {"phi_max", b.phi_max}, {"s_max", b.s_max}, {"psi_max", b.psi_max}};
}

inline AffineBounds affine_bounds_from_json(const Json& j, AffineBounds b = {}) {
  b.t_max = j.value("t_max", b.t_max);
  b.phi_max = j.value("phi_max", b.phi_max);
  b.s_max = j.value("s_max", b.s_max);
  b.psi_max = j.value("psi_max", b.psi_max);
  return b;
}

inline Json to_json(const SoIEncodingKind& e) { return {{"kind", to_string(e.kind)}, {"sigma", e.sigma}}; }

inline SoIEncodingKind encoding_from_json(const Json& j, SoIEncodingKind e = {}) {
  if (j.contains("kind")) e.kind = parse_encoding(j.at("kind").get<std::string>());
  e.sigma = j.value("sigma", e.sigma);
  return e;
}

inline Json to_json(const SynthConfig& c) {
  return {{"image_size", c.image_size},
          {"soi_bounds", to_json(c.soi_bounds)},
          {"distractor_scale", c.distractor_scale},
          {"stroke_width", c.stroke_width},
          {"tree_levels", c.tree_levels},
          {"background", c.background},
          {"box_intensity", c.box_intensity},
          {"vessel_intensity", c.vessel_intensity},
          {"noise_std", c.noise_std},
          {"supersample", c.supersample},
          {"encoding", to_json(c.encoding)},
          {"deform_max_displacement", c.deform_max_displacement},
          {"deform_spacing", c.deform_spacing}};
}

inline SynthConfig synth_config_from_json(const Json& j, SynthConfig c = {}) {
  try {
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("soi_bounds")) c.soi_bounds = affine_bounds_from_json(j.at("soi_bounds"), c.soi_bounds);
    c.distractor_scale = j.value("distractor_scale", c.distractor_scale);
    c.stroke_width = j.value("stroke_width", c.stroke_width);
    c.tree_levels = j.value("tree_levels", c.tree_levels);
    c.background = j.value("background", c.background);
    c.box_intensity = j.value("box_intensity", c.box_intensity);
    c.vessel_intensity = j.value("vessel_intensity", c.vessel_intensity);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.supersample = j.value("supersample", c.supersample);
    if (j.contains("encoding")) c.encoding = encoding_from_json(j.at("encoding"), c.encoding);
    c.deform_max_displacement = j.value("deform_max_displacement", c.deform_max_displacement);
    c.deform_spacing = j.value("deform_spacing", c.deform_spacing);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad synthetic data config: ") + e.what());
  }
  return c;
}

inline Json matrix_to_json(const Matrix3& m) {
  Json rows = Json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

inline Matrix3 matrix_from_json(const Json& j) {
  Matrix3 m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

inline Json to_json(const BSplineParams& p) {
  return {{"spacing", p.spacing},
          {"grid_height", p.grid_height},
          {"grid_width", p.grid_width},
          {"displacement", p.displacement},
          {"prealign", matrix_to_json(p.prealign)}};
}

inline BSplineParams bspline_from_json(const Json& j) {
  BSplineParams p;
  p.spacing = j.at("spacing").get<std::array<int, 2>>();
  p.grid_height = j.at("grid_height").get<int>();
  p.grid_width = j.at("grid_width").get<int>();
  p.displacement = j.at("displacement").get<std::vector<double>>();
  p.prealign = matrix_from_json(j.at("prealign"));
  if (p.displacement.size() != p.control_count() * 2) throw DataError("B-spline grid size mismatch");
  return p;
}

inline Json landmarks_to_json(const std::vector<Landmark>& l) {
  Json a = Json::array();
  for (const auto& p : l) a.push_back({p.x, p.y});
  return a;
}

inline std::vector<Landmark> landmarks_from_json(const Json& j) {
  std::vector<Landmark> out;
  for (const auto& p : j) out.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return out;
}

// ---------------------------------------------------------------------------
// Affine parameter text files

inline std::string format_params(const AffineParams& p) {
  const auto a = p.to_array();
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", a[i]);
    out += buf;
    out += i + 1 < a.size() ? ' ' : '\n';
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw DataError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing file: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline AffineParams read_params(const std::filesystem::path& path) {
  std::istringstream is(read_text(path));
  std::array<double, AffineParams::kCount> v{};
  for (auto& x : v) {
    if (!(is >> x)) throw DataError("expected 6 numbers in " + path.string());
  }
  return AffineParams::from_array(v);
}

inline Json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt JSON in " + path.string() + ": " + e.what());
  }
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  write_text(tmp, text);
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetInfo {
  PairKind kind = PairKind::conflict;
  SynthConfig config;
  std::vector<std::uint64_t> seeds;
  std::string content_hash;
};

struct Dataset {
  DatasetInfo info;
  std::vector<ToySample> samples;
};

namespace detail {

inline constexpr std::array<const char*, 6> kSampleImages = {"M", "F", "S_M", "S_F", "mask_M", "mask_F"};

inline RasterRange sample_image_range(std::string_view name, const SynthConfig& cfg) {
  if (name == "S_M" || name == "S_F") return encoding_range(cfg.encoding.kind);
  return {0.0, 1.0};
}

inline const Image& sample_image(const ToySample& s, std::string_view name) {
  if (name == "M") return s.moving;
  if (name == "F") return s.fixed;
  if (name == "S_M") return s.soi_moving;
  if (name == "S_F") return s.soi_fixed;
  if (name == "mask_M") return s.mask_moving;
  return s.mask_fixed;
}

inline Image& sample_image(ToySample& s, std::string_view name) {
  return const_cast<Image&>(sample_image(static_cast<const ToySample&>(s), name));
}

inline std::vector<std::string> sample_files() {
  std::vector<std::string> out;
  for (const char* n : kSampleImages) out.push_back(std::string(n) + ".pgm");
  out.push_back("gt.txt");
  out.push_back("meta.json");
  return out;
}

/// Hash over every sample file's bytes, in seed order then file order.
inline std::string dataset_content_hash(const std::filesystem::path& dir, const std::vector<std::uint64_t>& seeds) {
  Sha256 h;
  for (auto seed : seeds) {
    for (const auto& f : sample_files()) {
      const auto path = dir / std::to_string(seed) / f;
      h.update(std::to_string(seed) + "/" + f + "\n");
      h.update(std::span<const unsigned char>(read_bytes(path)));
    }
  }
  return h.hex();
}

}  // namespace detail

inline void write_sample(const ToySample& s, const std::filesystem::path& dir, const SynthConfig& cfg) {
  std::filesystem::create_directories(dir);
  for (const char* name : detail::kSampleImages) {
    write_raster(dir / (std::string(name) + ".pgm"), detail::sample_image(s, name), detail::sample_image_range(name, cfg));
  }
  write_text(dir / "gt.txt", format_params(s.gt_params));
  Json meta = {{"seed", s.seed},
               {"landmarks_moving", landmarks_to_json(s.landmarks_moving)},
               {"landmarks_fixed", landmarks_to_json(s.landmarks_fixed)}};
  if (s.gt_deform) meta["gt_deformation"] = to_json(*s.gt_deform);
  write_text(dir / "meta.json", meta.dump(1) + "\n");
}

inline ToySample read_sample(const std::filesystem::path& dir, std::uint64_t seed, const SynthConfig& cfg) {
  ToySample s;
  s.seed = seed;
  const Shape2 shape{cfg.image_size, cfg.image_size};
  for (const char* name : detail::kSampleImages) {
    const auto path = dir / (std::string(name) + ".pgm");
    Image img = read_raster(path);
    if (img.shape() != shape) {
      throw DataError("shape mismatch in " + path.string() + ": " + to_string(img.shape()) + " vs " + to_string(shape));
    }
    detail::sample_image(s, name) = std::move(img);
  }
  s.gt_params = read_params(dir / "gt.txt");
  const Json meta = read_json(dir / "meta.json");
  try {
    if (meta.at("seed").get<std::uint64_t>() != seed) throw DataError("seed mismatch in " + dir.string());
    s.landmarks_moving = landmarks_from_json(meta.at("landmarks_moving"));
    s.landmarks_fixed = landmarks_from_json(meta.at("landmarks_fixed"));
    if (meta.contains("gt_deformation")) s.gt_deform = bspline_from_json(meta.at("gt_deformation"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt meta.json in " + dir.string() + ": " + e.what());
  }
  return s;
}

/// Writes all samples and then the manifest. Returns the manifest path.
inline std::filesystem::path write_dataset(const std::vector<ToySample>& samples, const std::filesystem::path& dir,
                                           PairKind kind, const SynthConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::vector<std::uint64_t> seeds;
  for (const auto& s : samples) {
    write_sample(s, dir / std::to_string(s.seed), cfg);
    seeds.push_back(s.seed);
  }
  Json manifest = {{"format", kDatasetFormat},
                   {"kind", to_string(kind)},
                   {"seeds", seeds},
                   {"config", to_json(cfg)},
                   {"encoding", to_json(cfg.encoding)},
                   {"encoding_ranges", {{"M", {0, 1}}, {"F", {0, 1}}, {"mask", {0, 1}},
                                        {"S", {encoding_range(cfg.encoding.kind).lo, encoding_range(cfg.encoding.kind).hi}}}},
                   {"content_hash", detail::dataset_content_hash(dir, seeds)}};
  const auto path = dir / "manifest.json";
  write_text_atomic(path, manifest.dump(2) + "\n");
  return path;
}

inline DatasetInfo read_dataset_info(const std::filesystem::path& dir) {
  const Json m = read_json(dir / "manifest.json");
  DatasetInfo info;
  try {
    if (m.at("format").get<std::string>() != kDatasetFormat) throw DataError("unknown dataset format in " + dir.string());
    info.kind = parse_pair_kind(m.at("kind").get<std::string>());
    info.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
    info.config = synth_config_from_json(m.at("config"));
    info.content_hash = m.at("content_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt manifest " + (dir / "manifest.json").string() + ": " + e.what());
  } catch (const UsageError& e) {
    throw DataError("corrupt manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  return info;
}

/// Reads a dataset. With `verify`, file bytes must match the manifest hash.
inline Dataset read_dataset(const std::filesystem::path& dir, bool verify = true) {
  Dataset d;
  d.info = read_dataset_info(dir);
  for (auto seed : d.info.seeds) d.samples.push_back(read_sample(dir / std::to_string(seed), seed, d.info.config));
  if (verify && detail::dataset_content_hash(dir, d.info.seeds) != d.info.content_hash) {
    throw DataError("dataset files do not match the manifest hash: " + dir.string());
  }
  return d;
}

// ---------------------------------------------------------------------------
// Split generation

struct SplitSizes {
  int train = 100;
  int val = 10;
  int test = 100;
};

inline constexpr std::array<const char*, 3> kSplitNames = {"train", "val", "test"};

/// Seed of pair i of a split: disjoint, readable ranges per split.
inline std::uint64_t split_seed(std::uint64_t base, int split, int i) {
  return base + static_cast<std::uint64_t>(split) * 100000ULL + static_cast<std::uint64_t>(i);
}

inline std::vector<ToySample> generate_samples(PairKind kind, const SynthConfig& cfg, std::uint64_t base, int split,
                                               int count) {
  std::vector<ToySample> out(static_cast<std::size_t>(count));
  parallel_for(out.size(), [&](std::size_t i) {
    out[i] = generate_pair(kind, split_seed(base, split, static_cast<int>(i)), cfg);
  });
  return out;
}

/// Generates train/val/test under `root` and writes the root manifest.
inline Json generate_splits(const std::filesystem::path& root, PairKind kind, const SynthConfig& cfg,
                            std::uint64_t base_seed, const SplitSizes& sizes) {
  if (sizes.train < 1 || sizes.val < 1 || sizes.test < 1) throw UsageError("every split needs at least one pair");
  const std::array<int, 3> counts = {sizes.train, sizes.val, sizes.test};
  Json splits = Json::object();
  for (int s = 0; s < 3; ++s) {
    const auto samples = generate_samples(kind, cfg, base_seed, s, counts[s]);
    write_dataset(samples, root / kSplitNames[s], kind, cfg);
    splits[kSplitNames[s]] = {{"pairs", counts[s]}, {"content_hash", read_dataset_info(root / kSplitNames[s]).content_hash}};
  }
  Json manifest = {{"format", "istn-dataset-root/1"},
                   {"kind", to_string(kind)},
                   {"base_seed", base_seed},
                   {"config", to_json(cfg)},
                   {"splits", splits}};
  Sha256 h;
  for (const char* n : kSplitNames) h.update(splits[n]["content_hash"].get<std::string>());
  manifest["content_hash"] = h.hex();
  write_text_atomic(root / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace istn
