#include "bsatnp/oracle.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <numbers>

namespace bsatnp {

namespace {
constexpr double kJitter = 1e-6;
constexpr double kMaxJitter = 1e-3;
}  // namespace

GpPosterior exact_gp_posterior(const Tensor<double>& s_c, const Tensor<double>& f_c, const Tensor<double>& s_t,
                               double lengthscale, double noise_sd, GpKernel kernel) {
  const std::size_t nc = s_c.rank() == 2 ? s_c.rows() : 0;
  const std::size_t nt = s_t.rows();
  if (f_c.size() != nc) throw DimensionError("oracle: context values do not match context locations");
  const double noise = noise_sd * noise_sd;
  GpPosterior post{Tensor<double>({nt}), Tensor<double>({nt}, 1.0 + noise)};
  if (nc == 0) return post;

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto n = static_cast<Eigen::Index>(nc), m = static_cast<Eigen::Index>(nt);
  const Tensor<double> kcc = gp_kernel(kernel, s_c, s_c, lengthscale);
  const Tensor<double> ktc = gp_kernel(kernel, s_t, s_c, lengthscale);
  Mat a = Eigen::Map<const Mat>(kcc.data(), n, n);
  a.diagonal().array() += noise;
  // Noise already regularizes; jitter only kicks in when noise_sd is tiny.
  Eigen::LLT<Mat> llt(a);
  for (double j = kJitter; llt.info() != Eigen::Success; j *= 10.0) {
    if (j > kMaxJitter * (1.0 + 1e-9)) throw GenerationError("oracle: context kernel matrix is not positive definite");
    Mat b = a;
    b.diagonal().array() += j;
    llt.compute(b);
  }
  const Eigen::Map<const Mat> kt(ktc.data(), m, n);
  const Eigen::VectorXd f = Eigen::Map<const Eigen::VectorXd>(f_c.data(), n);
  const Eigen::VectorXd alpha = llt.solve(f);
  const Eigen::VectorXd mu = kt * alpha;
  // v = L^-1 k_ct, var = 1 - |v|^2 + noise
  const Mat v = llt.matrixL().solve(kt.transpose());
  for (Eigen::Index i = 0; i < m; ++i) {
    post.mu[static_cast<std::size_t>(i)] = mu[i];
    post.var[static_cast<std::size_t>(i)] = std::max(1.0 - v.col(i).squaredNorm(), 0.0) + noise;
  }
  return post;
}

double oracle_nll(const Task<double>& task, double lengthscale, double noise_sd, GpKernel kernel) {
  if (task.df() != 1) throw DimensionError("oracle: GP tasks have one output");
  const GpPosterior p = exact_gp_posterior(task.ctx.s, task.ctx.f, task.test.s, lengthscale, noise_sd, kernel);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (std::size_t i = 0; i < task.test.size(); ++i) {
    const double r = task.test.f[i] - p.mu[i];
    total += half_log_2pi + 0.5 * std::log(p.var[i]) + 0.5 * r * r / p.var[i];
  }
  return total / static_cast<double>(task.test.size());
}

}  // namespace bsatnp
