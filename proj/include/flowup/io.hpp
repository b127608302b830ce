#pragma once

// Middlebury .flo files, binary PPM images, dataset directories and model
// checkpoints. All multi-byte values are little-endian regardless of host.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "flowup/representability.hpp"
#include "flowup/training.hpp"

namespace flowup {

class FormatError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, truncated, dimension_overflow, malformed, io };

  FormatError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline const char* format_error_name(FormatError::Kind k) {
  switch (k) {
    case FormatError::Kind::bad_magic: return "bad_magic";
    case FormatError::Kind::truncated: return "truncated";
    case FormatError::Kind::dimension_overflow: return "dimension_overflow";
    case FormatError::Kind::malformed: return "malformed";
    default: return "io";
  }
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::io, "write failed for " + path.string());
}

// Bounds-checked little-endian reader.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  const unsigned char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatError::Kind::truncated,
                        what_ + ": truncated at byte " + std::to_string(pos_));
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return get_u32(take(4)); }
  float f32() { return get_f32(take(4)); }
  std::string str(std::size_t n) {
    const auto* p = take(n);
    return {reinterpret_cast<const char*>(p), n};
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// .flo

inline constexpr float kFloMagic = 202021.25f;
inline constexpr std::int64_t kFloMaxExtent = 99999;

inline std::string encode_flo(const Tensor<float>& flow) {
  if (flow.ndim() != 3 || flow.dim(0) != 2) {
    throw DimensionError("flo: expected (2, H, W) flow, got " + shape_str(flow.shape()));
  }
  const auto H = flow.dim(1), W = flow.dim(2), P = H * W;
  if (H > kFloMaxExtent || W > kFloMaxExtent) {
    throw FormatError(FormatError::Kind::dimension_overflow, "flo: extent too large to store");
  }
  std::string out;
  out.reserve(static_cast<std::size_t>(12 + 8 * P));
  detail::put_f32(out, kFloMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(W));
  detail::put_u32(out, static_cast<std::uint32_t>(H));
  auto f = flow.data();
  for (std::int64_t i = 0; i < P; ++i) {
    detail::put_f32(out, f[i]);
    detail::put_f32(out, f[P + i]);
  }
  return out;
}

inline Tensor<float> decode_flo(const std::string& bytes, const std::string& what = "flo") {
  detail::ByteReader r(bytes, what);
  const float magic = r.f32();
  if (std::bit_cast<std::uint32_t>(magic) != std::bit_cast<std::uint32_t>(kFloMagic)) {
    throw FormatError(FormatError::Kind::bad_magic, what + ": bad magic " + std::to_string(magic));
  }
  const auto w = static_cast<std::int32_t>(r.u32());
  const auto h = static_cast<std::int32_t>(r.u32());
  if (w < 1 || h < 1 || w > kFloMaxExtent || h > kFloMaxExtent) {
    throw FormatError(FormatError::Kind::dimension_overflow,
                      what + ": implausible extent " + std::to_string(w) + "x" + std::to_string(h));
  }
  const auto P = static_cast<std::int64_t>(w) * h;
  if (r.remaining() < static_cast<std::size_t>(8 * P)) {
    throw FormatError(FormatError::Kind::truncated,
                      what + ": payload holds " + std::to_string(r.remaining()) +
                          " bytes, expected " + std::to_string(8 * P));
  }
  Tensor<float> flow({2, h, w});
  auto f = flow.data();
  for (std::int64_t i = 0; i < P; ++i) {
    f[i] = r.f32();
    f[P + i] = r.f32();
  }
  return flow;
}

inline void flo_write(const std::filesystem::path& path, const Tensor<float>& flow) {
  detail::write_file(path, encode_flo(flow));
}

inline Tensor<float> flo_read(const std::filesystem::path& path) {
  return decode_flo(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

inline void ppm_write(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw DimensionError("ppm: expected (3, H, W) image, got " + shape_str(image.shape()));
  }
  const auto H = image.dim(1), W = image.dim(2), P = H * W;
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  auto x = image.data();
  for (std::int64_t i = 0; i < P; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(x[c * P + i]), 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  detail::write_file(path, out);
}

inline Tensor<float> ppm_read(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const auto start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  const auto name = path.string();
  if (token() != "P6") throw FormatError(FormatError::Kind::bad_magic, name + ": not a P6 PPM");
  std::int64_t W = 0, H = 0, maxval = 0;
  try {
    W = std::stoll(token());
    H = std::stoll(token());
    maxval = std::stoll(token());
  } catch (const std::exception&) {
    throw FormatError(FormatError::Kind::malformed, name + ": malformed PPM header");
  }
  if (W < 1 || H < 1 || W > kFloMaxExtent || H > kFloMaxExtent) {
    throw FormatError(FormatError::Kind::dimension_overflow, name + ": implausible extent");
  }
  if (maxval != 255) throw FormatError(FormatError::Kind::malformed, name + ": maxval must be 255");
  ++pos;  // single whitespace after maxval
  const auto P = H * W;
  if (bytes.size() < pos + static_cast<std::size_t>(3 * P)) {
    throw FormatError(FormatError::Kind::truncated, name + ": truncated pixel data");
  }
  Tensor<float> image({3, H, W});
  auto x = image.data();
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  for (std::int64_t i = 0; i < P; ++i) {
    for (int c = 0; c < 3; ++c) x[c * P + i] = static_cast<float>(p[3 * i + c]) / 255.0f;
  }
  return image;
}

// ---------------------------------------------------------------------------
// Dataset directories: NNNNN.img.ppm + NNNNN.flo, listed in index.txt.

inline constexpr const char* kIndexFile = "index.txt";

inline std::string sample_stem(std::size_t i) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples) {
  std::filesystem::create_directories(dir);
  std::string index;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto stem = sample_stem(i);
    ppm_write(dir / (stem + ".img.ppm"), samples[i].image);
    flo_write(dir / (stem + ".flo"), samples[i].flow);
    index += stem + ".img.ppm " + stem + ".flo\n";
  }
  detail::write_file(dir / kIndexFile, index);
}

struct DatasetEntry {
  std::filesystem::path image;
  std::filesystem::path flow;
};

inline std::vector<DatasetEntry> read_index(const std::filesystem::path& dir) {
  std::istringstream in(detail::read_file(dir / kIndexFile));
  std::vector<DatasetEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string img, flo;
    if (!(ls >> img >> flo)) {
      throw FormatError(FormatError::Kind::malformed, "index: bad line '" + line + "'");
    }
    entries.push_back({dir / img, dir / flo});
  }
  return entries;
}

inline std::vector<SyntheticSample> read_dataset(const std::filesystem::path& dir) {
  std::vector<SyntheticSample> samples;
  for (const auto& e : read_index(dir)) {
    SyntheticSample s{ppm_read(e.image), flo_read(e.flow), 0, 0};
    if (s.image.dim(1) != s.flow.dim(1) || s.image.dim(2) != s.flow.dim(2)) {
      throw DimensionError("dataset: image " + e.image.string() + " and flow " + e.flow.string() +
                           " differ in extent");
    }
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw ConfigError("dataset " + dir.string() + " is empty");
  return samples;
}

// ---------------------------------------------------------------------------
// Config <-> JSON

inline nlohmann::json to_json(const UpsamplerConfig& c) {
  return {{"steps", c.steps},         {"mask_sizes", c.mask_sizes},
          {"dims", c.dims},           {"head_dim", c.head_dim},
          {"inject_features", c.inject_features}, {"use_relbias", c.use_relbias},
          {"nat_blocks", c.nat_blocks}};
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"mode", mode_name(c.mode)},
          {"baseline_mask", c.baseline_mask},
          {"factor", c.factor},
          {"baseline_padding", padding_name(c.baseline_padding)},
          {"hidden_channels", c.hidden_channels},
          {"context_channels", c.context_channels},
          {"tcu", to_json(c.tcu)},
          {"seed", c.seed}};
}

inline nlohmann::json to_json(const AugmentConfig& c) {
  return {{"min_scale", c.min_scale},         {"max_scale", c.max_scale},
          {"crop_height", c.crop_height},     {"crop_width", c.crop_width},
          {"hflip_prob", c.hflip_prob},       {"vflip_prob", c.vflip_prob},
          {"interpolation_enabled", c.interpolation_enabled}};
}

inline nlohmann::json to_json(const EmulatorConfig& c) {
  return {{"iterations", c.iterations}, {"sigmas", c.sigmas}, {"factor", c.factor}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch", c.batch},
          {"base_lr", c.base_lr},
          {"fresh_lr", c.fresh_lr},
          {"gamma", c.gamma},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"warmup_fraction", c.warmup_fraction},
          {"seed", c.seed},
          {"val_every", c.val_every},
          {"aug", to_json(c.aug)},
          {"model", to_json(c.model)},
          {"emulator", to_json(c.emulator)}};
}

inline UpsamplerConfig upsampler_config_from_json(const nlohmann::json& j) {
  UpsamplerConfig c;
  c.steps = j.at("steps");
  c.mask_sizes = j.at("mask_sizes").get<std::vector<int>>();
  c.dims = j.at("dims").get<std::vector<std::int64_t>>();
  c.head_dim = j.at("head_dim");
  c.inject_features = j.at("inject_features");
  c.use_relbias = j.at("use_relbias");
  c.nat_blocks = j.at("nat_blocks");
  return c;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.mode = parse_mode(j.at("mode"));
  c.baseline_mask = j.at("baseline_mask");
  c.factor = j.at("factor");
  c.baseline_padding = parse_padding(j.at("baseline_padding"));
  c.hidden_channels = j.at("hidden_channels");
  c.context_channels = j.at("context_channels").get<std::array<std::int64_t, 3>>();
  c.tcu = upsampler_config_from_json(j.at("tcu"));
  c.seed = j.at("seed");
  return c;
}

inline AugmentConfig augment_config_from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.min_scale = j.at("min_scale");
  c.max_scale = j.at("max_scale");
  c.crop_height = j.at("crop_height");
  c.crop_width = j.at("crop_width");
  c.hflip_prob = j.at("hflip_prob");
  c.vflip_prob = j.at("vflip_prob");
  c.interpolation_enabled = j.at("interpolation_enabled");
  return c;
}

inline EmulatorConfig emulator_config_from_json(const nlohmann::json& j) {
  EmulatorConfig c;
  c.iterations = j.at("iterations");
  c.sigmas = j.at("sigmas").get<std::vector<double>>();
  c.factor = j.at("factor");
  return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.base_lr = j.at("base_lr");
  c.fresh_lr = j.at("fresh_lr");
  c.gamma = j.at("gamma");
  c.weight_decay = j.at("weight_decay");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.adam_eps = j.at("adam_eps");
  c.warmup_fraction = j.at("warmup_fraction");
  c.seed = j.at("seed");
  c.val_every = j.at("val_every");
  c.aug = augment_config_from_json(j.at("aug"));
  c.model = model_config_from_json(j.at("model"));
  c.emulator = emulator_config_from_json(j.at("emulator"));
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "FLOWUPCK", version byte, u32 meta length, meta JSON, u32 tensor count,
// then per tensor: u32 name length, name, u32 rank, u32 extents, f32 data.

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'O', 'W', 'U', 'P', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

/// `meta` must carry the model configuration under "model".
inline std::string encode_checkpoint(const FlowModel<float>& model, nlohmann::json meta) {
  meta["model"] = to_json(model.config());
  const auto params = model.parameters();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.push_back(static_cast<char>(kCheckpointVersion));
  const auto meta_str = meta.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out += meta_str;
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.tensor.ndim()));
    for (auto d : p.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (auto v : p.tensor.data()) detail::put_f32(out, v);
  }
  return out;
}

struct Checkpoint {
  FlowModel<float> model;
  nlohmann::json meta;
};

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.str(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError(FormatError::Kind::bad_magic, what + ": not a checkpoint");
  }
  const auto version = static_cast<std::uint8_t>(*r.take(1));
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::malformed,
                      what + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(r.str(r.u32()));
    ck.model = FlowModel<float>(model_config_from_json(ck.meta.at("model")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed, what + ": bad metadata: " + e.what());
  }
  auto params = ck.model.parameters();
  std::unordered_map<std::string, Tensor<float>> by_name;
  for (const auto& p : params) by_name.emplace(p.name, p.tensor);
  const auto count = r.u32();
  if (count != params.size()) {
    throw FormatError(FormatError::Kind::malformed,
                      what + ": holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name = r.str(r.u32());
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError(FormatError::Kind::malformed, what + ": unknown tensor '" + name + "'");
    }
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    if (shape != it->second.shape()) {
      throw FormatError(FormatError::Kind::malformed,
                        what + ": tensor '" + name + "' has shape " + shape_str(shape) +
                            ", model expects " + shape_str(it->second.shape()));
    }
    auto data = it->second.data();
    for (auto& v : data) v = r.f32();
    by_name.erase(it);
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const FlowModel<float>& model,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  detail::write_file(path, encode_checkpoint(model, meta));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// CSV helpers

inline std::string representability_csv(const std::vector<RepresentabilityResult>& scenes,
                                        const std::vector<int>& motions) {
  std::ostringstream os;
  os << "scene,motions,pixels";
  if (!scenes.empty()) {
    for (int m : scenes.front().mask_sizes) os << ",fraction_m" << m;
  }
  os << '\n' << std::setprecision(10);
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    os << s << ',' << motions[s] << ',' << scenes[s].pixels;
    for (std::size_t i = 0; i < scenes[s].mask_sizes.size(); ++i) os << ',' << scenes[s].fraction(i);
    os << '\n';
  }
  return os.str();
}

}  // namespace flowup
