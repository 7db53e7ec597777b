#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "bsatnp/task.hpp"

namespace bsatnp {

using Rng = std::mt19937_64;

// ---- priors ---------------------------------------------------------------------

double sample_beta(double a, double b, Rng& rng);
// Inverse gamma with shape a and scale b (mean b / (a - 1)).
double sample_inv_gamma(double a, double b, Rng& rng);
// Uniform integer in [lo, hi).
int sample_randint(int lo, int hi, Rng& rng);

// ---- GP tasks -------------------------------------------------------------------

enum class GpKernel {
  squared_exponential,   // exp(-|d|^2 / (2 l^2)) on Euclidean s
  exponential_geodesic,  // exp(-d_geo / l), s = (lon, lat) degrees, d_geo in degrees
};

struct GpTaskConfig {
  GpKernel kernel = GpKernel::squared_exponential;
  double lo = -2.0;  // square box shared by every axis
  double hi = 2.0;
  std::size_t ds = 2;
  std::size_t n_ctx_min = 128;  // inclusive
  std::size_t n_ctx_max = 512;  // inclusive
  std::size_t n_test = 1024;
  std::size_t batch = 8;
  double noise_sd = 0.1;
  double ls_beta_a = 3.0;  // squared exponential: l ~ Beta(a, b)
  double ls_beta_b = 7.0;
  double ls_ig_a = 3.0;  // geodesic: l ~ InvGamma(a, b), degrees
  double ls_ig_b = 30.0;
  double inner_lo = -0.5;  // multiresolution boxes
  double inner_hi = 0.5;
  double outer_lo = -1.5;
  double outer_hi = 1.5;
  double jitter = 1e-6;
  double max_jitter = 1e-3;

  static GpTaskConfig paper() { return {}; }
  static GpTaskConfig desk();
  static GpTaskConfig spherical();

  void validate() const;
  bool operator==(const GpTaskConfig&) const = default;
};

// A generated task with the hyperparameters that produced it.
struct GpSample {
  Task<double> task;
  double lengthscale = 0.0;
  Tensor<double> ctx_latent;  // ctx f before observation noise
};

// Kernel matrix between row sets a [n, ds] and b [m, ds], unit variance.
Tensor<double> gp_kernel(GpKernel kernel, const Tensor<double>& a, const Tensor<double>& b, double lengthscale);

// Lower Cholesky factor of k + jitter I, escalating the jitter x10 up to
// max_jitter. Throws GenerationError when every attempt fails.
Tensor<double> jittered_cholesky(const Tensor<double>& k, double jitter, double max_jitter);

// Joint GP draw at the stacked ctx/test locations (zero mean, unit variance).
Tensor<double> gp_draw(GpKernel kernel, const Tensor<double>& locations, double lengthscale, const GpTaskConfig& cfg,
                       Rng& rng);

GpSample gp_sample_task(const GpTaskConfig& cfg, Rng& rng);
// Same, at a fixed lengthscale and context count.
GpSample gp_sample_task(const GpTaskConfig& cfg, double lengthscale, std::size_t n_ctx, Rng& rng);
GpSample make_multires_task(const GpTaskConfig& cfg, Rng& rng);
// 1 - (points used) / (points needed for the inner density everywhere).
double multires_reduction(const GpTaskConfig& cfg);
GpSample spherical_gp_task(const GpTaskConfig& cfg, Rng& rng);

// The evaluation rotations of the spherical benchmark; index 0 is identity.
std::vector<Rotation> spherical_rotations();

// ---- SIR ------------------------------------------------------------------------

enum class SirState : std::uint8_t { S = 0, I = 1, R = 2 };

struct SirConfig {
  std::size_t grid = 64;
  double lo = -2.0;
  double hi = 2.0;
  double beta_a = 2.0;  // beta ~ Beta(a, b)
  double beta_b = 8.0;
  double gamma_a = 5.0;  // gamma ~ InvGamma(a, b)
  double gamma_b = 0.4;
  int omega_lo = 1;  // initial infections ~ randint(lo, hi)
  int omega_hi = 5;
  std::size_t steps = 25;
  double cutoff = 3.0;  // interaction radius in cells
  std::size_t n_ctx_min = 128;
  std::size_t n_ctx_max = 512;
  std::size_t n_test = 1024;
  std::size_t batch = 8;

  static SirConfig paper() { return {}; }
  static SirConfig desk();
  void validate() const;
  bool operator==(const SirConfig&) const = default;
};

struct SirParams {
  double beta = 0.0;
  double gamma = 0.0;
  int omega = 1;
};

SirParams sample_sir_params(const SirConfig& cfg, Rng& rng);

struct SirRollout {
  std::size_t grid = 0;
  std::size_t steps = 0;  // transitions; steps + 1 frames
  SirParams params;
  std::vector<SirState> states;  // [steps + 1, grid, grid]

  SirState at(std::size_t step, std::size_t i, std::size_t j) const { return states[(step * grid + i) * grid + j]; }
  std::size_t count(std::size_t step, SirState s) const;
};

SirRollout sir_simulate(const SirConfig& cfg, Rng& rng);
// Rollout from given rates and initial infections.
SirRollout sir_simulate(const SirConfig& cfg, const SirParams& params, Rng& rng);
// Rollout from an explicit first frame.
SirRollout sir_simulate(const SirConfig& cfg, const SirParams& params, std::vector<SirState> initial, Rng& rng);

// One frame of the rollout as a task; the context cells lead the test set.
Task<double> sir_task_from_rollout(const SirRollout& rollout, const SirConfig& cfg, Rng& rng);
Task<double> sir_task_from_rollout(const SirRollout& rollout, const SirConfig& cfg, std::size_t n_ctx, Rng& rng);

// ---- task families --------------------------------------------------------------

enum class TaskFamily { gp, multires, sir, spherical };

TaskFamily parse_task_family(std::string_view text);
std::string_view to_string(TaskFamily f) noexcept;

// Batch i of a stream; tasks draw from per-task seeds derived from (seed, i).
struct TaskStream {
  TaskFamily family = TaskFamily::gp;
  GpTaskConfig gp;
  SirConfig sir;
  std::uint64_t seed = 0;

  std::vector<GpSample> gp_batch(std::size_t index) const;
  TaskBatch<double> batch(std::size_t index) const;
  std::size_t batch_size() const { return family == TaskFamily::sir ? sir.batch : gp.batch; }
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace bsatnp
