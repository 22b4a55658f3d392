#pragma once

// Residual encoding between a base and a fine-tuned checkpoint, and the
// "ERE1" archive that stores it:
//   magic "ERE1" | u64 LE header length | JSON header | data section
// Each low-rank layer stores, back to back in the data section:
//   U codes | U scales (f16) | d (f16) | V codes | V scales (f16)
// Raw layers store their fine-tuned values; zero layers store nothing. The
// data section is covered by a CRC32 recorded in the header.

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <boost/crc.hpp>
#include <json.hpp>

#include "ere/allocator.hpp"
#include "ere/half.hpp"
#include "ere/parallel.hpp"
#include "ere/quantizer.hpp"
#include "ere/spectral.hpp"
#include "ere/tensor.hpp"
#include "ere/tensor_archive.hpp"

namespace ere::codec {

inline constexpr char kMagic[4] = {'E', 'R', 'E', '1'};
inline constexpr int kFormatVersion = 1;

struct EreConfig {
  std::size_t prior_rank = 0;
  int bits = 4;
  double alpha = 0.5;
  std::size_t min_dim_eligible = 8;
  DType raw_dtype = DType::f32;
  std::vector<std::string> exclude;  // name globs stored raw
  bool lossless = false;             // debug: full rank, f32 factors
  bool uniform_rank = false;         // every layer at the prior rank (plain LRA)
  std::size_t threads = 1;           // not serialized

  void validate() const {
    if (prior_rank < 1) throw Error("config: prior rank must be >= 1");
    if (!quant::valid_bits(bits)) throw Error("config: bits must be 2, 4 or 8");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("config: alpha outside [0,1]");
  }
};

enum class LayerKind { lowrank, raw, zero };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::lowrank: return "lowrank";
    case LayerKind::raw: return "raw";
    case LayerKind::zero: return "zero";
  }
  return "?";
}

inline LayerKind parse_kind(const std::string& s) {
  if (s == "lowrank") return LayerKind::lowrank;
  if (s == "raw") return LayerKind::raw;
  if (s == "zero") return LayerKind::zero;
  throw Error("unknown layer kind '" + s + "'");
}

struct LayerEntry {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;  // dtype of the fine-tuned tensor
  LayerKind kind = LayerKind::zero;
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t rank = 0;

  // lowrank, quantized
  quant::QuantizedFactor u;
  quant::QuantizedFactor v;
  std::vector<std::uint16_t> d;
  // lowrank, lossless
  std::vector<float> u_f32;  // n x rank, column-major
  std::vector<float> v_f32;  // m x rank, column-major
  std::vector<float> d_f32;
  // raw
  Tensor raw;
};

struct EreArchive {
  EreConfig config;
  std::uint64_t budget = 0;
  double lambda = 0.0;
  std::vector<LayerEntry> layers;
  std::size_t saturated_values = 0;  // singular values clamped to binary16 range

  const LayerEntry* find(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }
};

// ---------------------------------------------------------------- residuals

struct Residuals {
  TensorMap matched;                  // name -> f32 residual, same shape as base
  std::vector<std::string> unmatched;  // in fine-tuned only, or shape/dtype differ
};

inline Residuals compute_residual(const TensorMap& base, const TensorMap& finetuned) {
  Residuals out;
  for (const auto& [name, ft] : finetuned) {
    auto it = base.entries.find(name);
    if (it == base.entries.end() || it->second.shape != ft.shape || it->second.dtype != ft.dtype) {
      out.unmatched.push_back(name);
      continue;
    }
    std::vector<float> diff(ft.values.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = ft.values[i] - it->second.values[i];
    out.matched.insert(name, Tensor(DType::f32, ft.shape, std::move(diff)));
  }
  return out;
}

inline bool matches_any(const std::string& name, const std::vector<std::string>& globs) {
  for (const auto& g : globs)
    if (::fnmatch(g.c_str(), name.c_str(), 0) == 0) return true;
  return false;
}

// ---------------------------------------------------------------- encode

namespace detail {

inline std::vector<float> column_major(const Eigen::MatrixXd& x) {
  std::vector<float> out(static_cast<std::size_t>(x.size()));
  Eigen::Map<Eigen::MatrixXf>(out.data(), x.rows(), x.cols()) = x.cast<float>();
  return out;
}

inline Eigen::MatrixXd from_column_major(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols) throw Error("factor size mismatch");
  return Eigen::Map<const Eigen::MatrixXf>(v.data(), static_cast<Eigen::Index>(rows),
                                           static_cast<Eigen::Index>(cols))
      .cast<double>();
}

inline Tensor raw_copy(const Tensor& t, DType storage) {
  return Tensor(storage, t.shape, round_values(t.values, storage));
}

}  // namespace detail

inline EreArchive encode(const TensorMap& base, const TensorMap& finetuned, const EreConfig& config) {
  config.validate();
  const Residuals residuals = compute_residual(base, finetuned);

  EreArchive archive;
  archive.config = config;

  struct Candidate {
    std::size_t layer;
    const Tensor* residual;
    spectral::SvdFactors svd;
    spectral::SpectralProfile profile;
  };
  std::vector<Candidate> candidates;

  for (const auto& [name, ft] : finetuned) {
    LayerEntry e;
    e.name = name;
    e.shape = ft.shape;
    e.dtype = ft.dtype;
    const bool matched = residuals.matched.contains(name);
    if (!matched || matches_any(name, config.exclude)) {
      e.kind = LayerKind::raw;
      e.raw = detail::raw_copy(ft, config.raw_dtype);
    } else {
      const Tensor& delta = residuals.matched.at(name);
      const bool zero = std::all_of(delta.values.begin(), delta.values.end(),
                                    [](float x) { return x == 0.0f; });
      if (zero) {
        e.kind = LayerKind::zero;
      } else if (!ft.is_matrix() || std::min(ft.rows(), ft.cols()) < config.min_dim_eligible ||
                 std::min(ft.rows(), ft.cols()) == 0) {
        e.kind = LayerKind::raw;
        e.raw = detail::raw_copy(ft, config.raw_dtype);
      } else {
        e.kind = LayerKind::lowrank;
        e.n = ft.rows();
        e.m = ft.cols();
        candidates.push_back({archive.layers.size(), &delta, {}, {}});
      }
    }
    archive.layers.push_back(std::move(e));
  }

  parallel_for(candidates.size(), config.threads, [&](std::size_t i) {
    auto& c = candidates[i];
    c.svd = spectral::svd_full(to_matrix(*c.residual));
    const auto& d = c.svd.d;
    c.profile = spectral::profile_from_sigma(archive.layers[c.layer].name, archive.layers[c.layer].n,
                                             archive.layers[c.layer].m,
                                             std::vector<double>(d.data(), d.data() + d.size()));
  });

  std::vector<std::size_t> ranks(candidates.size());
  if (!candidates.empty()) {
    std::vector<allocator::Shape2> shapes;
    for (const auto& c : candidates) shapes.push_back({c.profile.n, c.profile.m});
    archive.budget = allocator::budget_from_prior(shapes, config.prior_rank);
    if (config.lossless) {
      for (std::size_t i = 0; i < candidates.size(); ++i) ranks[i] = candidates[i].profile.max_rank();
    } else if (config.uniform_rank) {
      for (std::size_t i = 0; i < candidates.size(); ++i)
        ranks[i] = std::min(config.prior_rank, candidates[i].profile.max_rank());
    } else {
      std::vector<spectral::SpectralProfile> profiles;
      for (const auto& c : candidates) profiles.push_back(c.profile);
      const auto plan = allocator::allocate(
          profiles, {config.prior_rank, config.alpha, 1e-9, config.min_dim_eligible});
      archive.budget = plan.budget;
      archive.lambda = plan.lambda_star;
      for (std::size_t i = 0; i < candidates.size(); ++i) ranks[i] = plan.layers[i].rank;
    }
  }

  std::vector<std::size_t> saturated(candidates.size(), 0);
  parallel_for(candidates.size(), config.threads, [&](std::size_t i) {
    auto& c = candidates[i];
    auto& e = archive.layers[c.layer];
    e.rank = ranks[i];
    const auto f = spectral::truncate(c.svd, static_cast<Eigen::Index>(e.rank));
    c.svd = {};
    if (config.lossless) {
      e.u_f32 = detail::column_major(f.u);
      e.v_f32 = detail::column_major(f.v);
      for (Eigen::Index k = 0; k < f.d.size(); ++k) e.d_f32.push_back(static_cast<float>(f.d(k)));
    } else {
      e.u = quant::quantize(f.u, config.bits);
      e.v = quant::quantize(f.v, config.bits);
      std::vector<float> df(static_cast<std::size_t>(f.d.size()));
      for (Eigen::Index k = 0; k < f.d.size(); ++k) df[static_cast<std::size_t>(k)] = static_cast<float>(f.d(k));
      auto enc = encode_half(df);
      e.d = std::move(enc.bits);
      saturated[i] = enc.saturated;
    }
  });
  for (auto s : saturated) archive.saturated_values += s;
  return archive;
}

// ---------------------------------------------------------------- format

struct SectionRef {
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct LayerBytes {
  std::uint64_t u_codes = 0, u_scales = 0, d = 0, v_codes = 0, v_scales = 0, raw = 0;
  std::uint64_t total() const { return u_codes + u_scales + d + v_codes + v_scales + raw; }
};

inline LayerBytes layer_bytes(const LayerEntry& e, bool lossless, int bits) {
  LayerBytes b;
  if (e.kind == LayerKind::raw) {
    b.raw = e.raw.nbytes();
  } else if (e.kind == LayerKind::lowrank) {
    if (lossless) {
      b.u_codes = 4ull * e.n * e.rank;
      b.v_codes = 4ull * e.m * e.rank;
      b.d = 4ull * e.rank;
    } else {
      b.u_codes = quant::packed_size(e.n * e.rank, bits);
      b.v_codes = quant::packed_size(e.m * e.rank, bits);
      b.u_scales = 2ull * e.rank;
      b.v_scales = 2ull * e.rank;
      b.d = 2ull * e.rank;
    }
  }
  return b;
}

namespace detail {

template <typename T>
void append_pod(std::string& out, const std::vector<T>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

template <typename T>
std::vector<T> read_pod(const std::string& data, SectionRef s) {
  if (s.nbytes % sizeof(T) != 0) throw Error("section size is not a multiple of the element size");
  if (s.offset > data.size() || s.nbytes > data.size() - s.offset) throw Error("section extends past end of data");
  std::vector<T> out(s.nbytes / sizeof(T));
  std::memcpy(out.data(), data.data() + s.offset, s.nbytes);
  return out;
}

inline nlohmann::json config_json(const EreConfig& c) {
  return {{"prior_rank", c.prior_rank}, {"bits", c.bits},
          {"alpha", c.alpha},           {"min_dim_eligible", c.min_dim_eligible},
          {"raw_dtype", dtype_name(c.raw_dtype)}, {"exclude", c.exclude},
          {"lossless", c.lossless},     {"uniform_rank", c.uniform_rank}};
}

inline EreConfig config_from_json(const nlohmann::json& j) {
  EreConfig c;
  c.prior_rank = j.at("prior_rank").get<std::size_t>();
  c.bits = j.at("bits").get<int>();
  c.alpha = j.at("alpha").get<double>();
  c.min_dim_eligible = j.at("min_dim_eligible").get<std::size_t>();
  c.raw_dtype = parse_dtype(j.at("raw_dtype").get<std::string>());
  c.exclude = j.at("exclude").get<std::vector<std::string>>();
  c.lossless = j.at("lossless").get<bool>();
  c.uniform_rank = j.at("uniform_rank").get<bool>();
  return c;
}

inline std::uint32_t crc32(const std::string& data) {
  boost::crc_32_type crc;
  crc.process_bytes(data.data(), data.size());
  return crc.checksum();
}

inline nlohmann::json section(std::string& data, const std::string& payload) {
  nlohmann::json j = {data.size(), payload.size()};
  data += payload;
  return j;
}

}  // namespace detail

struct Serialized {
  std::string header;  // JSON text
  std::string data;

  std::uint64_t file_size() const { return 12 + header.size() + data.size(); }
};

inline Serialized serialize_parts(const EreArchive& a) {
  Serialized s;
  nlohmann::json layers = nlohmann::json::array();
  std::vector<LayerEntry const*> sorted;
  for (const auto& l : a.layers) sorted.push_back(&l);
  std::sort(sorted.begin(), sorted.end(), [](auto* x, auto* y) { return x->name < y->name; });

  for (const auto* e : sorted) {
    nlohmann::json j = {{"name", e->name},
                        {"shape", e->shape},
                        {"dtype", dtype_name(e->dtype)},
                        {"kind", kind_name(e->kind)},
                        {"n", e->n},
                        {"m", e->m},
                        {"rank", e->rank}};
    if (e->kind == LayerKind::raw) {
      std::string payload;
      archive::detail::append_values(payload, e->raw);
      j["raw_dtype"] = dtype_name(e->raw.dtype);
      j["raw"] = detail::section(s.data, payload);
    } else if (e->kind == LayerKind::lowrank) {
      std::string p;
      if (a.config.lossless) {
        detail::append_pod(p, e->u_f32);
        j["u_codes"] = detail::section(s.data, p);
        p.clear();
        detail::append_pod(p, e->d_f32);
        j["d"] = detail::section(s.data, p);
        p.clear();
        detail::append_pod(p, e->v_f32);
        j["v_codes"] = detail::section(s.data, p);
      } else {
        detail::append_pod(p, e->u.codes);
        j["u_codes"] = detail::section(s.data, p);
        p.clear();
        detail::append_pod(p, e->u.scales);
        j["u_scales"] = detail::section(s.data, p);
        p.clear();
        detail::append_pod(p, e->d);
        j["d"] = detail::section(s.data, p);
        p.clear();
        detail::append_pod(p, e->v.codes);
        j["v_codes"] = detail::section(s.data, p);
        p.clear();
        detail::append_pod(p, e->v.scales);
        j["v_scales"] = detail::section(s.data, p);
      }
    }
    layers.push_back(std::move(j));
  }

  nlohmann::json header = {{"version", kFormatVersion},
                           {"config", detail::config_json(a.config)},
                           {"budget", a.budget},
                           {"layers", std::move(layers)},
                           {"data_nbytes", s.data.size()},
                           {"data_crc32", detail::crc32(s.data)}};
  header["lambda"] = std::isfinite(a.lambda) ? nlohmann::json(a.lambda) : nlohmann::json(nullptr);
  s.header = header.dump();
  return s;
}

inline std::string serialize(const EreArchive& a) {
  const Serialized s = serialize_parts(a);
  std::string out(kMagic, 4);
  archive::detail::append_u64(out, s.header.size());
  out += s.header;
  out += s.data;
  return out;
}

class ChecksumError : public Error {
 public:
  using Error::Error;
};

inline EreArchive deserialize(const std::string& bytes, bool verify_checksum = true) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error("not an ERE1 archive");
  const std::uint64_t header_len = archive::detail::read_u64(bytes.data() + 4);
  if (header_len > bytes.size() - 12) throw Error("ERE1 header extends past end of file");
  const std::string data = bytes.substr(12 + header_len);

  EreArchive a;
  try {
    const auto h = nlohmann::json::parse(bytes.begin() + 12,
                                         bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
    if (h.at("version").get<int>() != kFormatVersion) throw Error("unsupported ERE1 version");
    if (h.at("data_nbytes").get<std::uint64_t>() != data.size()) throw Error("ERE1 data section size mismatch");
    if (verify_checksum && h.at("data_crc32").get<std::uint32_t>() != detail::crc32(data))
      throw ChecksumError("ERE1 data checksum mismatch");
    a.config = detail::config_from_json(h.at("config"));
    a.budget = h.at("budget").get<std::uint64_t>();
    a.lambda = h.at("lambda").is_null() ? std::numeric_limits<double>::infinity() : h.at("lambda").get<double>();

    auto ref = [](const nlohmann::json& j) { return SectionRef{j.at(0).get<std::uint64_t>(), j.at(1).get<std::uint64_t>()}; };
    for (const auto& j : h.at("layers")) {
      LayerEntry e;
      e.name = j.at("name").get<std::string>();
      e.shape = j.at("shape").get<Shape>();
      e.dtype = parse_dtype(j.at("dtype").get<std::string>());
      e.kind = parse_kind(j.at("kind").get<std::string>());
      e.n = j.at("n").get<std::size_t>();
      e.m = j.at("m").get<std::size_t>();
      e.rank = j.at("rank").get<std::size_t>();
      if (e.kind == LayerKind::raw) {
        const DType rd = parse_dtype(j.at("raw_dtype").get<std::string>());
        const SectionRef s = ref(j.at("raw"));
        if (s.nbytes != element_count(e.shape) * dtype_size(rd)) throw Error("raw section size mismatch");
        if (s.offset > data.size() || s.nbytes > data.size() - s.offset) throw Error("raw section past end of data");
        e.raw = Tensor(rd, e.shape, archive::detail::parse_values(data.data() + s.offset, rd, element_count(e.shape)));
      } else if (e.kind == LayerKind::lowrank) {
        if (e.shape.size() != 2 || e.shape[0] != e.n || e.shape[1] != e.m) throw Error("lowrank shape mismatch");
        if (e.rank > std::min(e.n, e.m)) throw Error("lowrank rank exceeds matrix dimensions");
        if (a.config.lossless) {
          e.u_f32 = detail::read_pod<float>(data, ref(j.at("u_codes")));
          e.d_f32 = detail::read_pod<float>(data, ref(j.at("d")));
          e.v_f32 = detail::read_pod<float>(data, ref(j.at("v_codes")));
          if (e.u_f32.size() != e.n * e.rank || e.v_f32.size() != e.m * e.rank || e.d_f32.size() != e.rank)
            throw Error("lossless factor size mismatch");
        } else {
          const int bits = a.config.bits;
          e.u = {bits, e.n, e.rank, detail::read_pod<std::uint8_t>(data, ref(j.at("u_codes"))),
                 detail::read_pod<std::uint16_t>(data, ref(j.at("u_scales")))};
          e.v = {bits, e.m, e.rank, detail::read_pod<std::uint8_t>(data, ref(j.at("v_codes"))),
                 detail::read_pod<std::uint16_t>(data, ref(j.at("v_scales")))};
          e.d = detail::read_pod<std::uint16_t>(data, ref(j.at("d")));
          if (e.d.size() != e.rank || e.u.scales.size() != e.rank || e.v.scales.size() != e.rank ||
              e.u.codes.size() != quant::packed_size(e.n * e.rank, bits) ||
              e.v.codes.size() != quant::packed_size(e.m * e.rank, bits))
            throw Error("lowrank section size mismatch for '" + e.name + "'");
        }
      }
      a.layers.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(std::string("malformed ERE1 header: ") + ex.what());
  }
  return a;
}

inline std::uint64_t write_ere(const EreArchive& a, const std::filesystem::path& path) {
  const std::string bytes = serialize(a);
  archive::detail::write_file(path, bytes);
  return bytes.size();
}

inline EreArchive read_ere(const std::filesystem::path& path, bool verify_checksum = true) {
  return deserialize(archive::detail::read_file(path), verify_checksum);
}

// ---------------------------------------------------------------- decode

struct DecodeOptions {
  bool stiefel_projection = true;
  std::size_t threads = 1;
};

/// Reconstructed residual of one low-rank layer, n x m.
inline Eigen::MatrixXd reconstruct_residual(const LayerEntry& e, bool lossless, bool project) {
  if (e.rank == 0) return Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(e.n), static_cast<Eigen::Index>(e.m));
  Eigen::MatrixXd u, v;
  Eigen::VectorXd d(static_cast<Eigen::Index>(e.rank));
  if (lossless) {
    u = detail::from_column_major(e.u_f32, e.n, e.rank);
    v = detail::from_column_major(e.v_f32, e.m, e.rank);
    for (std::size_t k = 0; k < e.rank; ++k) d(static_cast<Eigen::Index>(k)) = e.d_f32[k];
  } else {
    u = quant::dequantize(e.u);
    v = quant::dequantize(e.v);
    for (std::size_t k = 0; k < e.rank; ++k) d(static_cast<Eigen::Index>(k)) = half_value(e.d[k]);
    if (project) {
      u = quant::stiefel_project(u).q;
      v = quant::stiefel_project(v).q;
    }
  }
  return u * d.asDiagonal() * v.transpose();
}

inline TensorMap decode(const TensorMap& base, const EreArchive& a, const DecodeOptions& opts = {}) {
  std::vector<Tensor> out(a.layers.size());
  parallel_for(a.layers.size(), opts.threads, [&](std::size_t i) {
    const auto& e = a.layers[i];
    if (e.kind == LayerKind::raw) {
      out[i] = Tensor(e.dtype, e.shape, round_values(e.raw.values, e.dtype));
      return;
    }
    auto it = base.entries.find(e.name);
    if (it == base.entries.end()) throw Error("decode: base has no tensor '" + e.name + "'");
    const Tensor& b = it->second;
    if (b.shape != e.shape) throw Error("decode: shape mismatch for '" + e.name + "'");
    if (e.kind == LayerKind::zero) {
      out[i] = Tensor(e.dtype, b.shape, round_values(b.values, e.dtype));
      return;
    }
    const Eigen::MatrixXd delta = reconstruct_residual(e, a.config.lossless, opts.stiefel_projection);
    const std::vector<float> dv = to_row_major(delta);
    std::vector<float> values(b.values.size());
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = b.values[k] + dv[k];
    out[i] = Tensor(e.dtype, b.shape, round_values(std::move(values), e.dtype));
  });
  TensorMap result;
  for (std::size_t i = 0; i < a.layers.size(); ++i) result.insert(a.layers[i].name, std::move(out[i]));
  return result;
}

// ---------------------------------------------------------------- accounting

struct LayerSize {
  std::string name;
  LayerKind kind = LayerKind::zero;
  std::size_t n = 0, m = 0, rank = 0;
  LayerBytes bytes;
  std::uint64_t fp32_bytes = 0;  // element count * 4
  double ratio_vs_fp32() const { return fp32_bytes ? double(bytes.total()) / double(fp32_bytes) : 0.0; }
};

struct SizeReport {
  std::vector<LayerSize> layers;
  std::uint64_t header_bytes = 0;  // magic + length + JSON
  std::uint64_t payload_bytes = 0;
  std::uint64_t code_bytes = 0;  // packed U and V codes of low-rank layers
  std::uint64_t total_bytes = 0;
  std::uint64_t fp32_full_bytes = 0;      // every stored tensor in fp32
  std::uint64_t fp32_residual_bytes = 0;  // lowrank + zero layers in fp32

  double ratio_vs_full() const { return fp32_full_bytes ? double(total_bytes) / double(fp32_full_bytes) : 0.0; }
  double ratio_vs_residual() const {
    std::uint64_t lowrank = 0;
    for (const auto& l : layers)
      if (l.kind != LayerKind::raw) lowrank += l.bytes.total();
    return fp32_residual_bytes ? double(lowrank) / double(fp32_residual_bytes) : 0.0;
  }
};

inline SizeReport size_report(const EreArchive& a) {
  SizeReport r;
  const Serialized s = serialize_parts(a);
  r.header_bytes = 12 + s.header.size();
  std::vector<LayerEntry const*> sorted;
  for (const auto& l : a.layers) sorted.push_back(&l);
  std::sort(sorted.begin(), sorted.end(), [](auto* x, auto* y) { return x->name < y->name; });
  for (const auto* e : sorted) {
    LayerSize l;
    l.name = e->name;
    l.kind = e->kind;
    l.n = e->n;
    l.m = e->m;
    l.rank = e->rank;
    l.bytes = layer_bytes(*e, a.config.lossless, a.config.bits);
    l.fp32_bytes = element_count(e->shape) * 4;
    r.payload_bytes += l.bytes.total();
    r.code_bytes += l.bytes.u_codes + l.bytes.v_codes;
    r.fp32_full_bytes += l.fp32_bytes;
    if (e->kind != LayerKind::raw) r.fp32_residual_bytes += l.fp32_bytes;
    r.layers.push_back(std::move(l));
  }
  r.total_bytes = r.header_bytes + r.payload_bytes;
  return r;
}

// ---------------------------------------------------------------- verify

struct VerifyThresholds {
  double max_relative_error = 1e-2;  // ||recon - finetuned|| / ||finetuned||
  double min_cosine = 0.99;
};

struct LayerCheck {
  std::string name;
  LayerKind kind = LayerKind::zero;
  std::size_t rank = 0;
  double relative_error = 0.0;
  double residual_relative_error = 0.0;  // ||recon - finetuned|| / ||finetuned - base||
  double cosine = 1.0;
  bool pass = true;
};

struct VerifyReport {
  bool checksum_ok = true;
  bool structure_ok = true;
  bool budget_ok = true;
  std::vector<LayerCheck> layers;
  std::vector<std::string> problems;

  bool pass() const {
    return checksum_ok && structure_ok && budget_ok &&
           std::all_of(layers.begin(), layers.end(), [](const LayerCheck& l) { return l.pass; });
  }
};

inline double flat_cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  if (aa == 0.0 && bb == 0.0) return 1.0;
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

inline VerifyReport verify(const TensorMap& base, const TensorMap& finetuned, const std::string& archive_bytes,
                           const VerifyThresholds& th = {}, const DecodeOptions& opts = {}) {
  VerifyReport rep;
  EreArchive a;
  try {
    a = deserialize(archive_bytes, true);
  } catch (const ChecksumError& e) {
    rep.checksum_ok = false;
    rep.problems.push_back(e.what());
    return rep;
  } catch (const Error& e) {
    rep.structure_ok = false;
    rep.problems.push_back(e.what());
    return rep;
  }

  std::uint64_t used = 0;
  for (const auto& e : a.layers)
    if (e.kind == LayerKind::lowrank) used += e.rank * (e.n + e.m);
  if (!a.config.lossless && used > a.budget) {
    rep.budget_ok = false;
    rep.problems.push_back("rank budget exceeded: " + std::to_string(used) + " > " + std::to_string(a.budget));
  }

  TensorMap recon;
  try {
    recon = decode(base, a, opts);
  } catch (const Error& e) {
    rep.structure_ok = false;
    rep.problems.push_back(e.what());
    return rep;
  }

  for (const auto& [name, ft] : finetuned) {
    if (!recon.contains(name)) {
      rep.structure_ok = false;
      rep.problems.push_back("missing layer '" + name + "'");
      continue;
    }
    const Tensor& rt = recon.at(name);
    const auto* entry = a.find(name);
    LayerCheck c;
    c.name = name;
    c.kind = entry->kind;
    c.rank = entry->rank;
    if (rt.shape != ft.shape) {
      rep.structure_ok = false;
      rep.problems.push_back("shape mismatch for '" + name + "'");
      continue;
    }
    double err = 0, norm = 0, res = 0;
    const Tensor* bt = base.contains(name) ? &base.at(name) : nullptr;
    for (std::size_t i = 0; i < ft.values.size(); ++i) {
      const double diff = double(rt.values[i]) - ft.values[i];
      err += diff * diff;
      norm += double(ft.values[i]) * ft.values[i];
      if (bt && bt->shape == ft.shape) {
        const double dr = double(ft.values[i]) - bt->values[i];
        res += dr * dr;
      }
    }
    c.relative_error = norm > 0 ? std::sqrt(err / norm) : std::sqrt(err);
    c.residual_relative_error = res > 0 ? std::sqrt(err / res) : std::sqrt(err);
    c.cosine = flat_cosine(rt.values, ft.values);
    c.pass = c.relative_error <= th.max_relative_error && c.cosine >= th.min_cosine;
    rep.layers.push_back(std::move(c));
  }
  for (const auto& e : a.layers)
    if (!finetuned.contains(e.name)) {
      rep.structure_ok = false;
      rep.problems.push_back("archive layer '" + e.name + "' not in fine-tuned map");
    }
  return rep;
}

}  // namespace ere::codec
