#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "bsatnp/model.hpp"
#include "bsatnp/param_store.hpp"
#include "bsatnp/tasks.hpp"

namespace bsatnp {

struct TrainConfig {
  std::size_t steps = 100000;
  std::size_t batch = 8;
  double lr_peak = 1e-4;
  double lr_floor = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 0.5;
  std::size_t validate_every = 10000;
  std::size_t eval_batches = 16;
  std::uint64_t seed = 0;
  // Wall-clock columns are written as 0 so that logs are byte-reproducible.
  bool deterministic = true;

  static TrainConfig paper() { return {}; }
  static TrainConfig desk();
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct EvalMetrics {
  double nll = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  double cvg95 = 0.0;
  std::size_t count = 0;
};

// Streaming 64-bit accumulation of the Gaussian metrics.
class MetricsAccumulator {
 public:
  template <typename T>
  void add(const Tensor<T>& mu, const Tensor<T>& sigma, const Tensor<T>& target);
  void add_point(double mu, double sigma, double target);
  EvalMetrics result() const;

 private:
  double nll_ = 0.0;
  double abs_ = 0.0;
  double sq_ = 0.0;
  std::size_t covered_ = 0;
  std::size_t n_ = 0;
};

template <typename T>
EvalMetrics compute_metrics(const Tensor<T>& mu, const Tensor<T>& sigma, const Tensor<T>& target);

// lr = floor + 0.5 (peak - floor)(1 + cos(pi step / steps))
double cosine_lr(std::size_t step, const TrainConfig& cfg);

template <typename T>
double global_grad_norm(const ParamStore<T>& store);

// Rescales every gradient so that the global norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t t = 0;

  explicit AdamState(const ParamStore<T>& store);
};

// Decoupled weight decay followed by a bias-corrected Adam step.
template <typename T>
void adamw_step(ParamStore<T>& store, AdamState<T>& state, const TrainConfig& cfg, double lr);

struct MetricRow {
  std::size_t step = 0;
  std::string split;
  EvalMetrics metrics;
  double lr = 0.0;
  double wallclock_s = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,split,nll,mae,rmse,cvg95,lr,wallclock_s";
std::string format_metric_row(const MetricRow& row);

struct TrainOptions {
  std::ostream* metrics = nullptr;  // receives the header and one line per row
  std::string checkpoint_path;      // best-by-validation checkpoint, rewritten on improvement
  std::function<void(const MetricRow&)> on_row;
};

struct TrainResult {
  ParamStore<float> best;
  ParamStore<float> last;
  double best_val_nll = 0.0;
  std::size_t best_step = 0;
  std::vector<MetricRow> log;
};

// Training and validation batches come from `stream` with seeds derived from
// cfg.seed, so the stream's own seed is ignored. Throws NumericError naming
// the step on a non-finite loss; the checkpoint on disk stays at the last
// good validation.
TrainResult train(const ModelConfig& model, const TaskStream& stream, const TrainConfig& cfg,
                  const TrainOptions& options = {});

using BatchTransform = std::function<TaskBatch<double>(const TaskBatch<double>&)>;

// Aggregates metrics over batches 0..n_batches-1 of `stream`.
EvalMetrics evaluate(const ParamStore<float>& params, const ModelConfig& model, const TaskStream& stream,
                     std::size_t n_batches, const BatchTransform& transform = {});

// Seeds of the streams used by train() and of the held-out test stream.
std::uint64_t train_stream_seed(std::uint64_t seed);
std::uint64_t validation_stream_seed(std::uint64_t seed);
std::uint64_t test_stream_seed(std::uint64_t seed);
std::uint64_t init_seed(std::uint64_t seed);

}  // namespace bsatnp
