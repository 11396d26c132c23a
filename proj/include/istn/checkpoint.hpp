#pragma once

// Model checkpoints: a key -> tensor container.
//
//   "ISTNCKPT" u32 version u32 entry_count
//   per entry: u32 name_len, name, u8 kind (0 = float64 tensor, 1 = JSON text),
//              tensor: u32 ndim, i32 dims[ndim], float64 data[prod(dims)]
//              text:   u64 byte_len, bytes
//
// Integers and floats are little-endian. The "meta" entry holds the variant,
// transformation model, architecture and config snapshot. A B-spline bundle's
// pre-alignment model is stored under the "prealign." prefix.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "istn/common.hpp"
#include "istn/dataset.hpp"
#include "istn/hash.hpp"
#include "istn/networks.hpp"

namespace istn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'I', 'S', 'T', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::vector<int> shape;     // tensors
  std::vector<double> data;   // tensors
  std::optional<std::string> text;
};

using CheckpointEntries = std::map<std::string, CheckpointEntry>;

inline Json to_json(const BundleSpec& s) {
  return {{"variant", to_string(s.variant)},
          {"transform_model", to_string(s.transform_model)},
          {"shape", {s.shape.height, s.shape.width}},
          {"affine_bounds", to_json(s.affine_bounds)},
          {"bspline", {{"spacing", s.bspline.spacing}, {"max_displacement", s.bspline.max_displacement}}},
          {"itn", {{"widths", s.itn.widths}}},
          {"stn", {{"conv_widths", s.stn.conv_widths}, {"hidden", s.stn.hidden}}}};
}

inline BundleSpec bundle_spec_from_json(const Json& j) {
  BundleSpec s;
  s.variant = parse_variant(j.at("variant").get<std::string>());
  s.transform_model = parse_transform_model(j.at("transform_model").get<std::string>());
  s.shape = {j.at("shape").at(0).get<int>(), j.at("shape").at(1).get<int>()};
  s.affine_bounds = affine_bounds_from_json(j.at("affine_bounds"));
  s.bspline.spacing = j.at("bspline").at("spacing").get<std::array<int, 2>>();
  s.bspline.max_displacement = j.at("bspline").at("max_displacement").get<double>();
  s.itn.widths = j.at("itn").at("widths").get<std::array<int, 3>>();
  s.stn.conv_widths = j.at("stn").at("conv_widths").get<std::array<int, 3>>();
  s.stn.hidden = j.at("stn").at("hidden").get<int>();
  return s;
}

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("truncated checkpoint: " + source_);
  }
  const std::vector<unsigned char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void add_params(CheckpointEntries& e, const nn::ParamSet& ps, const std::string& prefix) {
  for (const auto& spec : ps.specs()) {
    const auto v = ps.tensor(spec.name);
    e[prefix + spec.name] = {spec.shape, {v.begin(), v.end()}, std::nullopt};
  }
}

inline void load_params(const CheckpointEntries& e, nn::ParamSet& ps, const std::string& prefix) {
  for (const auto& spec : ps.specs()) {
    const auto it = e.find(prefix + spec.name);
    if (it == e.end()) throw DataError("checkpoint is missing tensor " + prefix + spec.name);
    if (it->second.shape != spec.shape || it->second.data.size() != spec.size) {
      throw DataError("checkpoint tensor " + prefix + spec.name + " has the wrong shape");
    }
    std::copy(it->second.data.begin(), it->second.data.end(), ps.tensor(spec.name).begin());
  }
}

inline void add_bundle(CheckpointEntries& e, const ModelBundle& b, const std::string& prefix, const Json& config) {
  Json meta = {{"format", "istn-checkpoint"},
               {"spec", to_json(b.spec)},
               {"has_itn", !b.itn.is_identity()},
               {"has_prealign", static_cast<bool>(b.prealign)},
               {"config", config},
               {"tool_version", ISTN_VERSION}};
  e[prefix + "meta"] = {{}, {}, meta.dump()};
  add_params(e, b.itn.params(), prefix);
  add_params(e, b.stn.params(), prefix);
  if (b.prealign) add_bundle(e, *b.prealign, prefix + "prealign.", Json::object());
}

inline ModelBundle load_bundle(const CheckpointEntries& e, const std::string& prefix, Json* config) {
  const auto it = e.find(prefix + "meta");
  if (it == e.end() || !it->second.text) throw DataError("checkpoint has no " + prefix + "meta entry");
  ModelBundle b;
  try {
    const Json meta = Json::parse(*it->second.text);
    b = make_bundle(bundle_spec_from_json(meta.at("spec")), 0);
    if (meta.at("has_itn").get<bool>() != !b.itn.is_identity()) throw DataError("checkpoint ITN flag is inconsistent");
    if (config) *config = meta.value("config", Json::object());
    if (meta.at("has_prealign").get<bool>()) {
      b.prealign = std::make_shared<const ModelBundle>(load_bundle(e, prefix + "prealign.", nullptr));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("corrupt checkpoint metadata: ") + ex.what());
  } catch (const UsageError& ex) {
    throw DataError(std::string("corrupt checkpoint metadata: ") + ex.what());
  }
  load_params(e, b.itn.params(), prefix);
  load_params(e, b.stn.params(), prefix);
  validate(b);
  return b;
}

}  // namespace detail

inline std::string serialise_checkpoint(const CheckpointEntries& entries) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, e] : entries) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    if (e.text) {
      detail::put<std::uint8_t>(out, 1);
      detail::put<std::uint64_t>(out, e.text->size());
      out += *e.text;
    } else {
      detail::put<std::uint8_t>(out, 0);
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
      for (int d : e.shape) detail::put<std::int32_t>(out, d);
      for (double v : e.data) detail::put<double>(out, v);
    }
  }
  return out;
}

inline CheckpointEntries parse_checkpoint(const std::vector<unsigned char>& bytes, const std::string& source) {
  detail::Reader r(bytes, source);
  if (r.str(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw DataError("not an istn checkpoint: " + source);
  }
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw DataError("unsupported checkpoint version: " + source);
  const auto count = r.get<std::uint32_t>();
  CheckpointEntries entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.get<std::uint32_t>());
    CheckpointEntry e;
    const auto kind = r.get<std::uint8_t>();
    if (kind == 1) {
      e.text = r.str(r.get<std::uint64_t>());
    } else if (kind == 0) {
      const auto ndim = r.get<std::uint32_t>();
      if (ndim > 8) throw DataError("corrupt checkpoint tensor " + name);
      std::size_t n = 1;
      for (std::uint32_t d = 0; d < ndim; ++d) {
        const int v = r.get<std::int32_t>();
        if (v < 0) throw DataError("corrupt checkpoint tensor " + name);
        e.shape.push_back(v);
        n *= static_cast<std::size_t>(v);
      }
      if (n > bytes.size()) throw DataError("corrupt checkpoint tensor " + name);
      e.data.resize(n);
      for (auto& v : e.data) v = r.get<double>();
    } else {
      throw DataError("corrupt checkpoint entry " + name);
    }
    entries[name] = std::move(e);
  }
  if (!r.done()) throw DataError("trailing bytes in checkpoint: " + source);
  return entries;
}

/// Atomic save (temporary file, then rename).
inline void save_checkpoint(const std::filesystem::path& path, const ModelBundle& b, const Json& config = Json::object()) {
  CheckpointEntries e;
  detail::add_bundle(e, b, "", config);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_text_atomic(path, serialise_checkpoint(e));
}

inline ModelBundle load_checkpoint(const std::filesystem::path& path, Json* config = nullptr) {
  return detail::load_bundle(parse_checkpoint(read_bytes(path), path.string()), "", config);
}

/// Hash of every parameter of the bundle (and its pre-alignment model).
inline std::string bundle_checksum(const ModelBundle& b) {
  Sha256 h;
  h.update(to_json(b.spec).dump());
  h.update(b.itn.params().values());
  h.update(b.stn.params().values());
  if (b.prealign) h.update(bundle_checksum(*b.prealign));
  return h.hex();
}

inline std::string itn_checksum(const ModelBundle& b) { return sha256_values(b.itn.params().values()); }

}  // namespace istn
