#pragma once

// "TSA1" tensor container:
//   magic "TSA1" | u64 LE header length | JSON header | data section
// The header maps tensor name -> {dtype, shape, offset, nbytes}; offsets are
// relative to the data section, 64-byte aligned, and ordered by name. The
// header is space-padded so the data section starts on a 64-byte boundary.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ere/half.hpp"
#include "ere/tensor.hpp"

namespace ere::archive {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

inline constexpr char kMagic[4] = {'T', 'S', 'A', '1'};
inline constexpr std::uint64_t kAlignment = 64;
inline constexpr const char* kMetaKey = "__meta__";

enum class ErrorKind { io, bad_magic, bad_header, truncated, overlap, duplicate_name, non_finite };

class ArchiveError : public Error {
 public:
  ArchiveError(ErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::uint64_t align_up(std::uint64_t x, std::uint64_t a = kAlignment) {
  return (x + a - 1) / a * a;
}

namespace detail {

inline void append_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

inline std::uint64_t read_u64(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}

inline void append_values(std::string& out, const Tensor& t) {
  if (t.dtype == DType::f32) {
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * 4);
  } else {
    for (float v : t.values) {
      const std::uint16_t b = half_bits(v);
      out.append(reinterpret_cast<const char*>(&b), 2);
    }
  }
}

inline std::vector<float> parse_values(const char* p, DType dtype, std::uint64_t count) {
  std::vector<float> out(count);
  if (dtype == DType::f32) {
    std::memcpy(out.data(), p, count * 4);
  } else {
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint16_t b;
      std::memcpy(&b, p + 2 * i, 2);
      out[i] = half_value(b);
    }
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ErrorKind::io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArchiveError(ErrorKind::io, "write failed: " + path.string());
}

}  // namespace detail

inline std::string serialize(const TensorMap& map) {
  nlohmann::json header = nlohmann::json::object();
  std::string data;
  for (const auto& [name, t] : map) {
    if (name == kMetaKey) throw ArchiveError(ErrorKind::bad_header, "reserved tensor name");
    if (!map.allow_nonfinite && !t.all_finite())
      throw ArchiveError(ErrorKind::non_finite, "tensor '" + name + "' has non-finite values");
    data.resize(align_up(data.size()), '\0');
    header[name] = {{"dtype", dtype_name(t.dtype)},
                    {"shape", t.shape},
                    {"offset", data.size()},
                    {"nbytes", t.nbytes()}};
    detail::append_values(data, t);
  }
  if (map.allow_nonfinite) header[kMetaKey] = {{"allow_nonfinite", true}};

  std::string text = header.dump();
  if (!map.empty()) text.resize(align_up(text.size() + 12) - 12, ' ');

  std::string out(kMagic, 4);
  detail::append_u64(out, text.size());
  out += text;
  out += data;
  return out;
}

inline TensorMap deserialize(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ArchiveError(ErrorKind::bad_magic, "not a TSA1 archive");
  const std::uint64_t header_len = detail::read_u64(bytes.data() + 4);
  if (header_len > bytes.size() - 12)
    throw ArchiveError(ErrorKind::truncated, "header extends past end of file");

  std::set<std::string> seen;
  bool duplicate = false;
  auto on_event = [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
    if (event == nlohmann::json::parse_event_t::key && depth == 1)
      duplicate |= !seen.insert(parsed.get<std::string>()).second;
    return true;
  };
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12,
                                   bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len),
                                   on_event);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ErrorKind::bad_header, std::string("malformed header: ") + e.what());
  }
  if (duplicate) throw ArchiveError(ErrorKind::duplicate_name, "duplicate tensor name in header");
  if (!header.is_object()) throw ArchiveError(ErrorKind::bad_header, "header is not an object");

  const char* data = bytes.data() + 12 + header_len;
  const std::uint64_t data_size = bytes.size() - 12 - header_len;

  TensorMap map;
  struct Span {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;
  try {
    for (const auto& [name, entry] : header.items()) {
      if (name == kMetaKey) {
        map.allow_nonfinite = entry.value("allow_nonfinite", false);
        continue;
      }
      const DType dtype = parse_dtype(entry.at("dtype").get<std::string>());
      Shape shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (nbytes != element_count(shape) * dtype_size(dtype))
        throw ArchiveError(ErrorKind::bad_header, "nbytes mismatch for '" + name + "'");
      if (offset > data_size || nbytes > data_size - offset)
        throw ArchiveError(ErrorKind::truncated, "data for '" + name + "' extends past end of file");
      spans.push_back({offset, offset + nbytes, name});
      map.entries.emplace(name, Tensor(dtype, std::move(shape),
                                       detail::parse_values(data + offset, dtype,
                                                            nbytes / dtype_size(dtype))));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ErrorKind::bad_header, std::string("malformed entry: ") + e.what());
  } catch (const ArchiveError&) {
    throw;
  } catch (const Error& e) {
    throw ArchiveError(ErrorKind::bad_header, e.what());
  }

  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].begin < spans[i - 1].end)
      throw ArchiveError(ErrorKind::overlap,
                         "tensors '" + spans[i - 1].name + "' and '" + spans[i].name + "' overlap");

  if (!map.allow_nonfinite)
    for (const auto& [name, t] : map)
      if (!t.all_finite())
        throw ArchiveError(ErrorKind::non_finite, "tensor '" + name + "' has non-finite values");
  return map;
}

/// Writes `map` to `path`; returns the number of bytes written.
inline std::uint64_t write_archive(const TensorMap& map, const std::filesystem::path& path) {
  const std::string bytes = serialize(map);
  detail::write_file(path, bytes);
  return bytes.size();
}

inline TensorMap read_archive(const std::filesystem::path& path) {
  return deserialize(detail::read_file(path));
}

}  // namespace ere::archive
