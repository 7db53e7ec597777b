#include "bsatnp/kernels.hpp"

#include <Eigen/Core>

namespace bsatnp {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstView = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using View = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T, typename A, typename B>
void gemm_into(View<T>& c, const A& a, const B& b, T alpha, T beta) {
  if (beta == T{0}) {
    c.noalias() = alpha * (a * b);
  } else {
    if (beta != T{1}) c *= beta;
    c.noalias() += alpha * (a * b);
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  const auto em = static_cast<Eigen::Index>(m);
  const auto en = static_cast<Eigen::Index>(n);
  const auto ek = static_cast<Eigen::Index>(k);
  View<T> cv(c, em, en, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
  if (k == 0) {
    if (beta == T{0}) cv.setZero(); else cv *= beta;
    return;
  }
  const ConstView<T> av(a, trans_a ? ek : em, trans_a ? em : ek, Eigen::OuterStride<>(static_cast<Eigen::Index>(lda)));
  const ConstView<T> bv(b, trans_b ? en : ek, trans_b ? ek : en, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldb)));
  if (!trans_a && !trans_b) {
    gemm_into<T>(cv, av, bv, alpha, beta);
  } else if (!trans_a && trans_b) {
    gemm_into<T>(cv, av, bv.transpose(), alpha, beta);
  } else if (trans_a && !trans_b) {
    gemm_into<T>(cv, av.transpose(), bv, alpha, beta);
  } else {
    gemm_into<T>(cv, av.transpose(), bv.transpose(), alpha, beta);
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, float, const float*, std::size_t,
                          const float*, std::size_t, float, float*, std::size_t);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, double, const double*, std::size_t,
                           const double*, std::size_t, double, double*, std::size_t);

}  // namespace bsatnp
