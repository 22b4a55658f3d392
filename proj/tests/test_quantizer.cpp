#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ere/half.hpp"
#include "ere/quantizer.hpp"
#include "test_support.hpp"

namespace ere::quant {
namespace {

using ere::testing::half_nearest;
using ere::testing::random_gaussian;
using ere::testing::random_orthonormal;

/// Largest |x - dequantize(quantize(x))| minus the allowed scale/2 + ulp(scale).
double worst_excess(const Eigen::MatrixXd& x, int bits) {
  const auto q = quantize(x, bits);
  const Eigen::MatrixXd back = dequantize(q);
  double worst = -1.0;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double s = q.scale(std::size_t(c));
    const double bound = s / 2 + half_ulp(float(s));
    for (Eigen::Index r = 0; r < x.rows(); ++r) worst = std::max(worst, std::abs(x(r, c) - back(r, c)) - bound);
  }
  return worst;
}

TEST(Quantize, ZeroMatrixIsExact) {
  const auto q = quantize(Eigen::MatrixXd::Zero(5, 3), 4);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(q.scale(c), 0.0f);
  EXPECT_EQ(dequantize(q), Eigen::MatrixXd::Zero(5, 3));
}

TEST(Quantize, EndpointsMapToExtremeCodes) {
  Eigen::MatrixXd x(2, 1);
  x << 1.0, -1.0;
  const auto q = quantize(x, 4);
  EXPECT_NEAR(q.scale(0), 1.0 / 7.0, half_ulp(float(1.0 / 7.0)));
  EXPECT_GE(q.scale(0), 1.0 / 7.0);
  const auto codes = unpack_codes(q.codes, 2, 4);
  EXPECT_EQ(codes[0], 14u);
  EXPECT_EQ(codes[1], 0u);
  const Eigen::MatrixXd back = dequantize(q);
  EXPECT_EQ(back(0), -back(1));
  EXPECT_LE(std::abs(back(0) - 1.0), q.scale(0) / 2);
}

TEST(Quantize, OrthonormalFactorWithinBound) {
  std::mt19937_64 rng(21);
  EXPECT_LE(worst_excess(random_orthonormal(64, 8, rng), 4), 0.0);
}

TEST(Quantize, RejectsNonFiniteAndBadBits) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(2, 2);
  EXPECT_THROW(quantize(x, 3), Error);
  x(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(quantize(x, 4), Error);
}

TEST(Dequantize, IntegersOnGridAreExact) {
  Eigen::MatrixXd x(4, 2);
  x << 127, -3, -127, 50, 0, 127, 12, -50;
  EXPECT_EQ(dequantize(quantize(x, 8)), x);
}

TEST(Dequantize, RejectsCorruptCodes) {
  Eigen::MatrixXd x(2, 1);
  x << 1.0, -1.0;
  auto q = quantize(x, 4);
  q.codes[0] = 0xFF;  // code 15 > 2 * zero point
  EXPECT_THROW(dequantize(q), Error);

  auto z = quantize(Eigen::MatrixXd::Zero(2, 1), 4);
  z.codes[0] = 0x88;
  EXPECT_THROW(dequantize(z), Error);

  auto short_codes = quantize(x, 4);
  short_codes.codes.push_back(0);
  EXPECT_THROW(dequantize(short_codes), Error);
}

TEST(Packing, LowBitsFirst) {
  const std::vector<std::uint32_t> codes{1, 2, 3, 0, 2};
  const auto packed = pack_codes(codes, 2);
  ASSERT_EQ(packed.size(), 2u);
  EXPECT_EQ(packed[0], 0b00111001);
  EXPECT_EQ(packed[1], 0b00000010);
  EXPECT_EQ(unpack_codes(packed, 5, 2), codes);
  EXPECT_THROW(pack_codes(std::vector<std::uint32_t>{4}, 2), Error);
}

TEST(Packing, RoundTripAllWidths) {
  std::mt19937_64 rng(22);
  for (int bits : {2, 4, 8}) {
    std::uniform_int_distribution<std::uint32_t> code(0, (1u << bits) - 1);
    for (std::size_t count : {0, 1, 3, 7, 64, 101}) {
      std::vector<std::uint32_t> codes(count);
      for (auto& c : codes) c = code(rng);
      const auto packed = pack_codes(codes, bits);
      EXPECT_EQ(packed.size(), packed_size(count, bits));
      EXPECT_EQ(unpack_codes(packed, count, bits), codes);
    }
  }
}

TEST(Half, Examples) {
  EXPECT_EQ(half_bits(1.0f), 0x3C00);
  EXPECT_EQ(half_value(0x3C00), 1.0f);
  EXPECT_EQ(double(round_to_half(0.1f)), half_nearest(double(0.1f)));
  EXPECT_EQ(double(round_to_half(0.1f)), 0.0999755859375);

  const std::vector<float> big{70000.0f, -1e6f, 65504.0f, 65519.0f};
  const auto enc = encode_half(big);
  EXPECT_EQ(enc.saturated, 2u);
  const auto dec = decode_half(enc.bits);
  EXPECT_EQ(dec[0], 65504.0f);
  EXPECT_EQ(dec[1], -65504.0f);
  EXPECT_EQ(dec[2], 65504.0f);
  EXPECT_EQ(dec[3], 65504.0f);
  EXPECT_THROW(encode_half(std::vector<float>{std::nanf("")}), Error);
}

TEST(Half, MatchesBitLevelOracle) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> mant(-1.0, 1.0);
  std::uniform_int_distribution<int> expo(-26, 15);
  for (int i = 0; i < 20000; ++i) {
    const float v = float(std::ldexp(mant(rng), expo(rng)));
    const auto enc = encode_half(std::vector<float>{v});
    EXPECT_EQ(double(half_value(enc.bits[0])), half_nearest(double(v))) << v;
  }
}

TEST(Half, RoundUpNeverBelowInput) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(1e-6, 6e4);
  for (int i = 0; i < 5000; ++i) {
    const float v = float(u(rng));
    const float h = round_up_to_half(v);
    EXPECT_GE(h, v);
    EXPECT_LE(h - v, half_ulp(h));
  }
}

TEST(Stiefel, OrthonormalIsFixedPoint) {
  std::mt19937_64 rng(25);
  const Eigen::MatrixXd x = random_orthonormal(9, 4, rng);
  const auto p = stiefel_project(x);
  EXPECT_FALSE(p.rank_deficient);
  EXPECT_LT((p.q - x).norm(), 1e-10);
}

TEST(Stiefel, TwiceIdentity) {
  const auto p = stiefel_project(2.0 * Eigen::MatrixXd::Identity(3, 3));
  EXPECT_LT((p.q - Eigen::MatrixXd::Identity(3, 3)).norm(), 1e-12);
  EXPECT_NEAR((2.0 * Eigen::MatrixXd::Identity(3, 3) - p.q).norm(), std::sqrt(3.0), 1e-12);
}

TEST(Stiefel, BeatsSampledCompetitors) {
  std::mt19937_64 rng(26);
  const Eigen::MatrixXd x = random_gaussian(6, 3, rng);
  const auto p = stiefel_project(x);
  const double best = (x - p.q).norm();
  for (int i = 0; i < 1000; ++i) EXPECT_LE(best, (x - random_orthonormal(6, 3, rng)).norm());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x);
  const double analytic = std::sqrt((svd.singularValues().array() - 1.0).square().sum());
  EXPECT_NEAR(best, analytic, 1e-6 * analytic);
}

TEST(Stiefel, RankDeficientIsFlagged) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(5, 2);
  x(0, 0) = 1.0;
  const auto p = stiefel_project(x);
  EXPECT_TRUE(p.rank_deficient);
  EXPECT_LT((p.q.transpose() * p.q - Eigen::MatrixXd::Identity(2, 2)).norm(), 1e-10);
  EXPECT_THROW(stiefel_project(Eigen::MatrixXd::Ones(2, 3)), Error);
}

// ---------------------------------------------------------------- properties

TEST(Properties, RoundTripBoundAllWidths) {
  std::mt19937_64 rng(27);
  std::uniform_int_distribution<int> dim(1, 40);
  std::uniform_real_distribution<double> scale(1e-4, 1e3);
  for (int bits : {2, 4, 8})
    for (int t = 0; t < 100; ++t) EXPECT_LE(worst_excess(random_gaussian(dim(rng), dim(rng), rng, scale(rng)), bits), 0.0);
}

TEST(Properties, ProjectionIdempotentAndRestoresOrthonormality) {
  std::mt19937_64 rng(28);
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd u = random_orthonormal(48, 6, rng);
    const Eigen::MatrixXd deq = dequantize(quantize(u, 4));
    const auto eye = Eigen::MatrixXd::Identity(6, 6);
    const double before = (deq.transpose() * deq - eye).norm();
    const auto p = stiefel_project(deq);
    EXPECT_LT((p.q.transpose() * p.q - eye).norm(), 1e-6);
    EXPECT_LT((p.q.transpose() * p.q - eye).norm(), before);
    EXPECT_LT((stiefel_project(p.q).q - p.q).norm(), 1e-6);
  }
}

}  // namespace
}  // namespace ere::quant
