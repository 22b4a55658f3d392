#pragma once

// Round-to-nearest b-bit quantization of factor matrices with one symmetric
// binary16 scale per column, and projection back onto the Stiefel manifold.
//
// Code layout: unsigned codes with zero point 2^(b-1) - 1, so the grid covers
// +-(2^(b-1) - 1) * scale. Elements are packed column-major, low bits first
// within each byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "ere/half.hpp"

namespace ere::quant {

inline bool valid_bits(int bits) { return bits == 2 || bits == 4 || bits == 8; }

inline std::uint32_t zero_point(int bits) { return (1u << (bits - 1)) - 1; }

struct QuantizedFactor {
  int bits = 4;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> codes;    // packed
  std::vector<std::uint16_t> scales;  // binary16, one per column

  float scale(std::size_t c) const { return half_value(scales[c]); }
};

inline std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

inline std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, int bits) {
  if (!valid_bits(bits)) throw Error("pack_codes: unsupported bit width");
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  const std::uint32_t mask = (1u << bits) - 1;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > mask) throw Error("pack_codes: code does not fit in bit width");
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    out[bit / 8] |= static_cast<std::uint8_t>(codes[i] << (bit % 8));
  }
  return out;
}

inline std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                               int bits) {
  if (!valid_bits(bits)) throw Error("unpack_codes: unsupported bit width");
  if (packed.size() != packed_size(count, bits)) throw Error("unpack_codes: packed size mismatch");
  std::vector<std::uint32_t> out(count);
  const std::uint32_t mask = (1u << bits) - 1;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    out[i] = (packed[bit / 8] >> (bit % 8)) & mask;
  }
  return out;
}

/// The stored scale is maxabs / (2^(b-1) - 1) rounded up to binary16, so no
/// element falls outside the grid and the round-trip error stays within half
/// a step plus the binary16 rounding of the scale.
inline QuantizedFactor quantize(const Eigen::MatrixXd& x, int bits) {
  if (!valid_bits(bits)) throw Error("quantize: bits must be 2, 4 or 8");
  if (!x.allFinite()) throw Error("quantize: non-finite input");
  QuantizedFactor q;
  q.bits = bits;
  q.rows = static_cast<std::size_t>(x.rows());
  q.cols = static_cast<std::size_t>(x.cols());
  const auto zp = zero_point(bits);
  const double qmax = static_cast<double>(zp);

  std::vector<std::uint32_t> codes(q.rows * q.cols, zp);
  q.scales.resize(q.cols);
  for (std::size_t c = 0; c < q.cols; ++c) {
    const auto col = x.col(static_cast<Eigen::Index>(c));
    const double maxabs = col.size() ? col.cwiseAbs().maxCoeff() : 0.0;
    const float scale = round_up_to_half(static_cast<float>(maxabs / qmax));
    q.scales[c] = half_bits(scale);
    if (scale == 0.0f) continue;
    for (std::size_t r = 0; r < q.rows; ++r) {
      const double level = std::clamp(std::round(col(static_cast<Eigen::Index>(r)) / scale), -qmax, qmax);
      codes[c * q.rows + r] = static_cast<std::uint32_t>(static_cast<std::int64_t>(level) + zp);
    }
  }
  q.codes = pack_codes(codes, bits);
  return q;
}

inline Eigen::MatrixXd dequantize(const QuantizedFactor& q) {
  if (!valid_bits(q.bits)) throw Error("dequantize: unsupported bit width");
  if (q.scales.size() != q.cols) throw Error("dequantize: scale count mismatch");
  const auto codes = unpack_codes(q.codes, q.rows * q.cols, q.bits);
  const auto zp = zero_point(q.bits);
  Eigen::MatrixXd x(q.rows, q.cols);
  for (std::size_t c = 0; c < q.cols; ++c) {
    const float scale = q.scale(c);
    if (!std::isfinite(scale)) throw Error("dequantize: non-finite scale");
    for (std::size_t r = 0; r < q.rows; ++r) {
      const auto code = codes[c * q.rows + r];
      if (code > 2 * zp) throw Error("dequantize: code outside the quantization grid");
      if (scale == 0.0f && code != zp) throw Error("dequantize: zero scale with non-zero code");
      const float value = static_cast<float>(static_cast<std::int64_t>(code) - zp) * scale;
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = value;
    }
  }
  return x;
}

struct Projection {
  Eigen::MatrixXd q;
  bool rank_deficient = false;
};

/// Polar factor of x (n >= k): with x = A diag(s) B^T, returns A B^T, the
/// column-orthonormal matrix nearest to x in Frobenius norm.
inline Projection stiefel_project(const Eigen::MatrixXd& x) {
  if (x.rows() < x.cols()) throw Error("stiefel_project: need rows >= cols");
  if (!x.allFinite()) throw Error("stiefel_project: non-finite input");
  Projection out;
  if (x.cols() == 0) {
    out.q = Eigen::MatrixXd(x.rows(), 0);
    return out;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double threshold = std::numeric_limits<double>::epsilon() * static_cast<double>(x.rows()) *
                           std::max(s(0), 1.0);
  out.rank_deficient = s(s.size() - 1) <= threshold;
  out.q = svd.matrixU() * svd.matrixV().transpose();
  return out;
}

}  // namespace ere::quant
