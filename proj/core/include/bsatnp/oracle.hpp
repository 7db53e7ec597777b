#pragma once

#include "bsatnp/task.hpp"
#include "bsatnp/tasks.hpp"
#include "bsatnp/tensor.hpp"

namespace bsatnp {

struct GpPosterior {
  Tensor<double> mu;   // [n_t]
  Tensor<double> var;  // [n_t], observation noise included
};

// Exact posterior predictive of a zero-mean unit-variance GP with Gaussian
// observation noise. s_c may have zero rows.
GpPosterior exact_gp_posterior(const Tensor<double>& s_c, const Tensor<double>& f_c, const Tensor<double>& s_t,
                               double lengthscale, double noise_sd,
                               GpKernel kernel = GpKernel::squared_exponential);

// Mean Gaussian NLL of the task's test f under the exact posterior.
double oracle_nll(const Task<double>& task, double lengthscale, double noise_sd,
                  GpKernel kernel = GpKernel::squared_exponential);

}  // namespace bsatnp
