#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>

namespace bsatnp {

// C = alpha * op(A) * op(B) + beta * C, row-major with leading dimensions.
// op(A) is m x k, op(B) is k x n. When beta == 0, C is not read.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

// exp() that the compiler can vectorize inside tile loops. Arguments below the
// float underflow threshold return exactly 0. Max error ~1 ulp on the float
// range; the double overload defers to std::exp.
inline float fast_exp(float x) noexcept {
  constexpr float kHi = 88.3762626647949f;
  constexpr float kLo = -87.3365447504019f;
  const float xc = x > kHi ? kHi : (x < kLo ? kLo : x);
  const float n = std::floor(xc * 1.44269504088896341f + 0.5f);
  float r = xc - n * 0.693359375f;
  r = r + n * 2.12194440e-4f;
  const float r2 = r * r;
  float y = 1.9875691500e-4f;
  y = y * r + 1.3981999507e-3f;
  y = y * r + 8.3334519073e-3f;
  y = y * r + 4.1665795894e-2f;
  y = y * r + 1.6666665459e-1f;
  y = y * r + 5.0000001201e-1f;
  y = y * r2 + r + 1.0f;
  const std::int32_t e = static_cast<std::int32_t>(n) + 127;
  const float scale = std::bit_cast<float>(static_cast<std::uint32_t>(e) << 23);
  return x < kLo ? 0.0f : y * scale;
}

inline double fast_exp(double x) noexcept { return std::exp(x); }

// Branch-free erf for float, absolute error below 2e-7. Rational form from
// Abramowitz and Stegun 7.1.26 on top of fast_exp.
inline float fast_erf(float x) noexcept {
  const float ax = std::abs(x);
  const float t = 1.0f / (1.0f + 0.3275911f * ax);
  float y = 1.061405429f;
  y = y * t - 1.453152027f;
  y = y * t + 1.421413741f;
  y = y * t - 0.284496736f;
  y = y * t + 0.254829592f;
  const float r = 1.0f - y * t * fast_exp(-ax * ax);
  return std::copysign(r, x);
}

inline double fast_erf(double x) noexcept { return std::erf(x); }

template <typename T>
inline T softplus(T x) noexcept {
  return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
inline T sigmoid(T x) noexcept {
  return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

// Inverse of softplus for y > 0.
template <typename T>
inline T softplus_inverse(T y) noexcept {
  return y > T{20} ? y : std::log(std::expm1(y));
}

}  // namespace bsatnp
