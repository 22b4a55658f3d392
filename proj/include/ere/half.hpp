#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ere/tensor.hpp"

namespace ere {

inline constexpr float kHalfMax = 65504.0f;

inline std::uint16_t half_bits(float value) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value));
}

inline float half_value(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

/// Nearest binary16 value (round-to-nearest-even), saturating at +-65504.
inline float round_to_half(float value) {
  if (value > kHalfMax) return kHalfMax;
  if (value < -kHalfMax) return -kHalfMax;
  return half_value(half_bits(value));
}

/// Distance from |value| to the next larger binary16 magnitude.
inline float half_ulp(float value) {
  const float a = std::fabs(round_to_half(value));
  if (a >= kHalfMax) return 32.0f;
  const std::uint16_t b = half_bits(a);
  return half_value(static_cast<std::uint16_t>(b + 1)) - a;
}

/// Smallest binary16 value that is >= value (value must be >= 0).
inline float round_up_to_half(float value) {
  float h = round_to_half(value);
  if (h < value) h = half_value(static_cast<std::uint16_t>(half_bits(h) + 1));
  return h;
}

struct HalfEncoding {
  std::vector<std::uint16_t> bits;
  std::size_t saturated = 0;  // count of inputs clamped to +-65504
};

inline HalfEncoding encode_half(std::span<const float> values) {
  HalfEncoding out;
  out.bits.reserve(values.size());
  for (float v : values) {
    if (!std::isfinite(v)) throw Error("encode_half: non-finite input");
    if (std::fabs(v) > kHalfMax) {
      // Values that would round to the max are not saturation events.
      const bool rounds_to_max = std::fabs(v) < 65520.0f;
      if (!rounds_to_max) ++out.saturated;
      v = v > 0 ? kHalfMax : -kHalfMax;
    }
    out.bits.push_back(half_bits(v));
  }
  return out;
}

inline std::vector<float> decode_half(std::span<const std::uint16_t> bits) {
  std::vector<float> out;
  out.reserve(bits.size());
  for (auto b : bits) out.push_back(half_value(b));
  return out;
}

inline std::vector<float> round_values(std::vector<float> values, DType dtype) {
  if (dtype == DType::f16)
    for (float& v : values) v = round_to_half(v);
  return values;
}

}  // namespace ere
