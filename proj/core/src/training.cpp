#include "bsatnp/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <cstdio>
#include <numbers>
#include <ostream>

#include "bsatnp/checkpoint.hpp"

namespace bsatnp {

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.steps = 30000;
  c.validate_every = 3000;
  c.eval_batches = 8;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (steps == 0 || batch == 0) fail("steps and batch must be positive");
  if (!(lr_peak > 0.0) || lr_floor < 0.0 || lr_floor > lr_peak) fail("learning rates must satisfy 0 <= floor <= peak");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0) || weight_decay < 0.0) fail("eps must be positive and weight decay non-negative");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (validate_every == 0 || eval_batches == 0) fail("validate_every and eval_batches must be positive");
}

// ---- metrics ----------------------------------------------------------------------

void MetricsAccumulator::add_point(double mu, double sigma, double target) {
  const double r = target - mu;
  nll_ += 0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma) + 0.5 * r * r / (sigma * sigma);
  abs_ += std::abs(r);
  sq_ += r * r;
  if (std::abs(r) <= 1.96 * sigma) ++covered_;
  ++n_;
}

template <typename T>
void MetricsAccumulator::add(const Tensor<T>& mu, const Tensor<T>& sigma, const Tensor<T>& target) {
  require_shape(sigma.shape(), mu.shape(), "metrics sigma");
  require_shape(target.shape(), mu.shape(), "metrics target");
  for (std::size_t i = 0; i < mu.size(); ++i) add_point(mu[i], sigma[i], target[i]);
}

EvalMetrics MetricsAccumulator::result() const {
  EvalMetrics m;
  m.count = n_;
  if (n_ == 0) return m;
  const double n = static_cast<double>(n_);
  m.nll = nll_ / n;
  m.mae = abs_ / n;
  m.rmse = std::sqrt(sq_ / n);
  m.cvg95 = static_cast<double>(covered_) / n;
  return m;
}

template <typename T>
EvalMetrics compute_metrics(const Tensor<T>& mu, const Tensor<T>& sigma, const Tensor<T>& target) {
  MetricsAccumulator acc;
  acc.add(mu, sigma, target);
  return acc.result();
}

// ---- optimizer --------------------------------------------------------------------

double cosine_lr(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.steps) throw ContractError("cosine_lr: step beyond the schedule");
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.steps);
  return cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename T>
double global_grad_norm(const ParamStore<T>& store) {
  double sq = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (T g : store.grad(i).values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double norm = global_grad_norm(store);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    // a hair under max_norm so that float rounding cannot land above it
    const T factor = static_cast<T>(max_norm / norm * (1.0 - 1e-7));
    for (std::size_t i = 0; i < store.size(); ++i) {
      for (T& g : store.grad(i).values()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
AdamState<T>::AdamState(const ParamStore<T>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m.emplace_back(store.value(i).shape());
    v.emplace_back(store.value(i).shape());
  }
}

template <typename T>
void adamw_step(ParamStore<T>& store, AdamState<T>& state, const TrainConfig& cfg, double lr) {
  if (state.m.size() != store.size()) throw ContractError("optimizer state does not match the parameter store");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto p = store.value(i).values();
    auto g = store.grad(i).values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1, vhat = vj / c2;
      p[j] = static_cast<T>(p[j] * decay - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ---- loops ------------------------------------------------------------------------

std::string format_metric_row(const MetricRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.6f", r.step, r.split.c_str(), r.metrics.nll,
                r.metrics.mae, r.metrics.rmse, r.metrics.cvg95, r.lr, r.wallclock_s);
  return buf;
}

std::uint64_t train_stream_seed(std::uint64_t seed) { return derive_seed(seed, 0x7472, 0); }
std::uint64_t validation_stream_seed(std::uint64_t seed) { return derive_seed(seed, 0x7661, 0); }
std::uint64_t test_stream_seed(std::uint64_t seed) { return derive_seed(seed, 0x7465, 0); }
std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, 0x696e, 0); }

EvalMetrics evaluate(const ParamStore<float>& params, const ModelConfig& model, const TaskStream& stream,
                     std::size_t n_batches, const BatchTransform& transform) {
  MetricsAccumulator acc;
  for (std::size_t b = 0; b < n_batches; ++b) {
    TaskBatch<double> batch = stream.batch(b);
    if (transform) batch = transform(batch);
    const TaskBatch<float> fb = batch.cast<float>();
    const auto preds = predict(params, model, fb);
    for (std::size_t k = 0; k < preds.size(); ++k) acc.add(preds[k].mu, preds[k].sigma, fb.tasks[k].test.f);
  }
  return acc.result();
}

TrainResult train(const ModelConfig& model, const TaskStream& stream, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  model.validate();
  keep_freed_pages();
  TaskStream train_stream = stream;
  train_stream.gp.batch = cfg.batch;
  train_stream.sir.batch = cfg.batch;
  train_stream.seed = train_stream_seed(cfg.seed);
  TaskStream val_stream = train_stream;
  val_stream.seed = validation_stream_seed(cfg.seed);

  TrainResult result;
  ParamStore<float> params = init_params<float>(model, init_seed(cfg.seed));
  AdamState<float> adam(params);
  result.best = params;
  result.best_val_nll = std::numeric_limits<double>::infinity();

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (cfg.deterministic) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto emit = [&](MetricRow row) {
    if (options.metrics) *options.metrics << format_metric_row(row) << '\n' << std::flush;
    if (options.on_row) options.on_row(row);
    result.log.push_back(std::move(row));
  };
  if (options.metrics) *options.metrics << kMetricsHeader << '\n';

  MetricsAccumulator window;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const double lr = cosine_lr(step - 1, cfg);
    const TaskBatch<float> batch = train_stream.batch(step - 1).cast<float>();
    params.zero_grad();
    Tape<float> tape;
    Var<float> loss;
    ForwardGraph<float> graph;
    StreamInputs<float> in;
    try {
      in = make_stream(batch, model);
      graph = build_forward(tape, params, model, in);
      loss = gaussian_nll(graph.mu, graph.sigma, in.test_f, static_cast<float>(model.sigma_floor * 0.999));
      tape.backward(loss);
      clip_grad_norm(params, cfg.clip_norm);
    } catch (const NumericError& e) {
      throw NumericError("training step " + std::to_string(step) + ": " + e.what());
    }
    window.add(graph.mu.value(), graph.sigma.value(), in.test_f);
    adamw_step(params, adam, cfg, lr);

    if (step % cfg.validate_every == 0 || step == cfg.steps) {
      emit({step, "train", window.result(), lr, elapsed()});
      window = MetricsAccumulator{};
      const EvalMetrics val = evaluate(params, model, val_stream, cfg.eval_batches);
      if (!std::isfinite(val.nll)) throw NumericError("validation at step " + std::to_string(step) + " gave a non-finite NLL");
      emit({step, "val", val, lr, elapsed()});
      if (val.nll < result.best_val_nll) {
        result.best_val_nll = val.nll;
        result.best_step = step;
        result.best = params;
        if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, model, params);
      }
    }
  }
  result.last = std::move(params);
  return result;
}

#define BSATNP_INSTANTIATE_TRAINING(T)                                                            \
  template void MetricsAccumulator::add<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template EvalMetrics compute_metrics<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template double global_grad_norm<T>(const ParamStore<T>&);                                      \
  template double clip_grad_norm<T>(ParamStore<T>&, double);                                      \
  template struct AdamState<T>;                                                                   \
  template void adamw_step<T>(ParamStore<T>&, AdamState<T>&, const TrainConfig&, double);

BSATNP_INSTANTIATE_TRAINING(float)
BSATNP_INSTANTIATE_TRAINING(double)

#undef BSATNP_INSTANTIATE_TRAINING

}  // namespace bsatnp
