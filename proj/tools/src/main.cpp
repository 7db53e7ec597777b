#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "bsatnp/bench.hpp"
#include "bsatnp/checkpoint.hpp"
#include "bsatnp/config.hpp"
#include "bsatnp/task_io.hpp"
#include "bsatnp/training.hpp"
#include "png_image.hpp"

namespace fs = std::filesystem;
using namespace bsatnp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonOptions {
  std::string profile = "paper";
  std::string config_file;
  std::vector<std::string> sets;
  std::string family;
  std::int64_t seed = -1;
};

void add_common(CLI::App& cmd, CommonOptions& o) {
  cmd.add_option("--profile", o.profile, "paper or desk")->capture_default_str();
  cmd.add_option("--config", o.config_file, "key = value config file applied on top of the profile");
  cmd.add_option("--set", o.sets, "extra KEY=VALUE overrides, applied last");
  cmd.add_option("--family", o.family, "task family: gp, multires, sir, spherical");
  cmd.add_option("--seed", o.seed, "overrides train.seed");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg = RunConfig::for_profile(o.profile);
  if (!o.config_file.empty()) cfg = load_config_file(o.config_file, cfg);
  if (!o.family.empty()) set_config_value(cfg, "task.family", o.family);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(o.seed);
  cfg.validate();
  return cfg;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// ---- gen ---------------------------------------------------------------------------

struct GenOptions {
  CommonOptions common;
  std::size_t batches = 1;
  std::string out;
};

int run_gen(const GenOptions& o) {
  const RunConfig cfg = resolve(o.common);
  const TaskStream stream = cfg.stream();
  TaskBatch<double> all;
  for (std::size_t b = 0; b < o.batches; ++b) {
    auto batch = stream.batch(b);
    for (auto& t : batch.tasks) all.tasks.push_back(std::move(t));
  }
  save_tasks(o.out, all);
  std::printf("wrote %zu %s tasks to %s (fnv1a %016llx)\n", all.size(), std::string(to_string(cfg.family)).c_str(),
              o.out.c_str(), static_cast<unsigned long long>(fnv1a_file(o.out)));
  return kExitOk;
}

// ---- train -------------------------------------------------------------------------

struct TrainCliOptions {
  CommonOptions common;
  std::string out_dir;
  std::string bias;
  std::int64_t steps = -1;
  bool quiet = false;
};

int run_train(const TrainCliOptions& o) {
  RunConfig cfg = resolve(o.common);
  if (!o.bias.empty()) apply_bias_variant(cfg.model, o.bias);
  if (o.steps > 0) {
    cfg.train.steps = static_cast<std::size_t>(o.steps);
    cfg.train.validate_every = std::min(cfg.train.validate_every, cfg.train.steps);
  }
  cfg.validate();
  fs::create_directories(o.out_dir);
  const fs::path dir(o.out_dir);
  {
    std::ofstream c(dir / "run.cfg");
    c << config_to_text(cfg);
  }
  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
  if (!metrics) throw FormatError("cannot write metrics log in '" + o.out_dir + "'");

  TrainOptions opts;
  opts.metrics = &metrics;
  opts.checkpoint_path = (dir / "best.ckpt").string();
  if (!o.quiet) opts.on_row = [](const MetricRow& r) { std::cout << format_metric_row(r) << std::endl; };
  if (!o.quiet) {
    std::printf("training %s/%s model (%zu parameters, variant %s) for %zu steps\n", cfg.profile.c_str(),
                std::string(to_string(cfg.family)).c_str(), parameter_count(cfg.model),
                bias_variant_of(cfg.model).c_str(), cfg.train.steps);
  }
  const TrainResult result = train(cfg.model, cfg.stream(), cfg.train, opts);
  save_checkpoint((dir / "last.ckpt").string(), cfg.model, result.last);
  std::printf("best val nll %.6f at step %zu\n", result.best_val_nll, result.best_step);
  return kExitOk;
}

// ---- eval --------------------------------------------------------------------------

struct EvalOptions {
  CommonOptions common;
  std::string checkpoint;
  std::vector<std::string> bias;  // VARIANT=PATH
  std::string tasks_file;
  std::int64_t batches = -1;
  std::vector<double> shifts;
  std::vector<double> scales;
  std::vector<std::string> rotations;
  bool standard_rotations = false;
};

struct Setting {
  std::string name;
  BatchTransform transform;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

std::vector<Setting> eval_settings(const EvalOptions& o) {
  std::vector<Setting> out{{"base", {}}};
  for (double tau : o.shifts) {
    out.push_back({"shift=" + fmt(tau), [tau](const TaskBatch<double>& b) {
                     return apply_group_action(b, GroupAction::translate_s({tau}));
                   }});
  }
  for (double k : o.scales) {
    out.push_back({"scale=" + fmt(k), [k](const TaskBatch<double>& b) { return scale_locations(b, k); }});
  }
  std::vector<std::string> rots = o.rotations;
  if (o.standard_rotations) {
    rots.insert(rots.end(), {"yxz:-60,30,0", "yxz:-60,30,20"});
  }
  for (const auto& spec : rots) {
    const Rotation r = parse_rotation(spec);
    out.push_back({"rotate=" + spec, [r](const TaskBatch<double>& b) {
                     return apply_group_action(b, GroupAction::rotate(r));
                   }});
  }
  return out;
}

int run_eval(const EvalOptions& o) {
  const RunConfig cfg = resolve(o.common);
  std::vector<std::pair<std::string, std::string>> models;
  if (!o.checkpoint.empty()) models.emplace_back("model", o.checkpoint);
  for (const auto& kv : o.bias) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--bias expects VARIANT=CHECKPOINT, got '" + kv + "'");
    models.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (models.empty()) throw ConfigError("eval needs --checkpoint or at least one --bias VARIANT=CHECKPOINT");

  TaskStream stream = cfg.stream();
  stream.seed = test_stream_seed(cfg.train.seed);
  const std::size_t n_batches = o.batches > 0 ? static_cast<std::size_t>(o.batches) : cfg.train.eval_batches;
  TaskBatch<double> file_tasks;
  if (!o.tasks_file.empty()) file_tasks = load_tasks(o.tasks_file);

  const auto settings = eval_settings(o);
  std::printf("model,setting,nll,mae,rmse,cvg95,count\n");
  for (const auto& [label, path] : models) {
    const Checkpoint ck = load_checkpoint(path);
    if (label != "model") {
      const std::string actual = bias_variant_of(ck.model);
      if (actual != label) {
        throw ConfigError("checkpoint '" + path + "' is a " + actual + " model, not " + label);
      }
    }
    for (const auto& s : settings) {
      EvalMetrics m;
      if (o.tasks_file.empty()) {
        m = evaluate(ck.params, ck.model, stream, n_batches, s.transform);
      } else {
        MetricsAccumulator acc;
        const TaskBatch<double> b = s.transform ? s.transform(file_tasks) : file_tasks;
        const TaskBatch<float> fb = b.cast<float>();
        const auto preds = predict(ck.params, ck.model, fb);
        for (std::size_t k = 0; k < preds.size(); ++k) acc.add(preds[k].mu, preds[k].sigma, fb.tasks[k].test.f);
        m = acc.result();
      }
      std::printf("%s,%s,%.9g,%.9g,%.9g,%.9g,%zu\n", label.c_str(), s.name.c_str(), m.nll, m.mae, m.rmse, m.cvg95,
                  m.count);
    }
  }
  return kExitOk;
}

// ---- bench -------------------------------------------------------------------------

struct BenchOptions {
  BenchConfig cfg;
  bool showcase = false;
};

int run_bench(BenchOptions o) {
  if (o.showcase) {
    // 100K context points, 1M test points, scan path only
    o.cfg.ctx_sizes = {100000};
    o.cfg.test_sizes = {1000000};
    o.cfg.repeats = 0;
    o.cfg.naive_max_pairs = 0;
  }
  const auto rows = bench_attention(o.cfg);
  std::cout << format_bench_report(rows);
  for (const auto& r : rows) {
    if (r.max_abs_diff >= 0 && r.path == "bsa") {
      std::fprintf(stderr, "%zux%zu max |bsa - naive| = %.3g\n", r.n_ctx, r.n_test, r.max_abs_diff);
    }
  }
  if (o.showcase) std::fprintf(stderr, "showcase wall clock %.1f s\n", rows.front().seconds);
  return kExitOk;
}

// ---- plot --------------------------------------------------------------------------

struct PlotOptions {
  CommonOptions common;
  std::string metrics;
  std::string checkpoint;
  std::string out = "plot";
  std::size_t resolution = 128;
  std::size_t task_index = 0;
  std::size_t channel = 0;
};

void plot_curves(const std::string& csv, const std::string& out) {
  std::ifstream in(csv);
  if (!in) throw FormatError("cannot open metrics log '" + csv + "'");
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw FormatError("'" + csv + "' is not a metrics log");
  std::vector<std::pair<double, double>> train_pts, val_pts;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string step, split, nll;
    std::getline(ss, step, ',');
    std::getline(ss, split, ',');
    std::getline(ss, nll, ',');
    auto& dst = split == "val" ? val_pts : train_pts;
    dst.emplace_back(std::stod(step), std::stod(nll));
  }
  if (train_pts.empty() && val_pts.empty()) throw FormatError("metrics log '" + csv + "' has no rows");
  double x0 = 0, x1 = 1, y0 = std::numeric_limits<double>::max(), y1 = std::numeric_limits<double>::lowest();
  for (const auto* pts : {&train_pts, &val_pts}) {
    for (auto [x, y] : *pts) {
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (y1 - y0 < 1e-9) y1 = y0 + 1;
  const int w = 640, h = 400, pad = 40;
  tools::Image img(w, h);
  img.line(pad, h - pad, w - pad, h - pad, 0, 0, 0);
  img.line(pad, pad, pad, h - pad, 0, 0, 0);
  auto px = [&](double x) { return pad + static_cast<int>((x - x0) / (x1 - x0) * (w - 2 * pad)); };
  auto py = [&](double y) { return h - pad - static_cast<int>((y - y0) / (y1 - y0) * (h - 2 * pad)); };
  auto draw = [&](const std::vector<std::pair<double, double>>& pts, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      img.dot(px(pts[i].first), py(pts[i].second), 3, r, g, b);
      if (i) img.line(px(pts[i - 1].first), py(pts[i - 1].second), px(pts[i].first), py(pts[i].second), r, g, b);
    }
  };
  draw(train_pts, 31, 119, 180);
  draw(val_pts, 214, 39, 40);
  tools::write_png(out + "_curve.png", img);
  std::printf("wrote %s_curve.png (nll %.4g .. %.4g; blue train, red val)\n", out.c_str(), y0, y1);
}

void plot_field(const Tensor<double>& values, std::size_t res, const std::string& path) {
  double lo = values[0], hi = values[0];
  for (double v : values.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
  const int n = static_cast<int>(res);
  tools::Image img(n, n);
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      std::uint8_t r, g, b;
      tools::colormap((values[static_cast<std::size_t>(iy) * res + ix] - lo) / span, r, g, b);
      img.set(ix, n - 1 - iy, r, g, b);
    }
  }
  tools::write_png(path, img);
  std::printf("wrote %s (range %.4g .. %.4g)\n", path.c_str(), lo, hi);
}

void plot_predictions(const PlotOptions& o) {
  const RunConfig cfg = resolve(o.common);
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  if (ck.model.ds != 2) throw ConfigError("field plots need two spatial coordinates");
  TaskStream stream = cfg.stream();
  stream.seed = test_stream_seed(cfg.train.seed);
  const std::size_t per = stream.batch_size();
  const auto batch = stream.batch(o.task_index / per);
  Task<double> task = batch.tasks.at(o.task_index % per);
  if (o.channel >= task.df()) throw ConfigError("channel out of range for this task family");

  // bounding box of every location in the task
  double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
  for (const auto* pts : {&task.ctx.s, &task.test.s}) {
    for (std::size_t i = 0; i < pts->rows(); ++i) {
      for (std::size_t c = 0; c < 2; ++c) {
        lo[c] = std::min(lo[c], (*pts)(i, c));
        hi[c] = std::max(hi[c], (*pts)(i, c));
      }
    }
  }
  const std::size_t res = o.resolution;
  PointSet<double> grid = PointSet<double>::zeros(res * res, task.dx(), 2, task.dt(), task.df(), false);
  for (std::size_t iy = 0; iy < res; ++iy) {
    for (std::size_t ix = 0; ix < res; ++ix) {
      const std::size_t r = iy * res + ix;
      grid.s(r, 0) = lo[0] + (hi[0] - lo[0]) * (ix + 0.5) / res;
      grid.s(r, 1) = lo[1] + (hi[1] - lo[1]) * (iy + 0.5) / res;
    }
  }
  task.test = std::move(grid);
  const auto pred = predict(ck.params, ck.model, task.cast<float>());
  Tensor<double> mu({res * res}), sigma({res * res}), ctx({res * res}, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t r = 0; r < res * res; ++r) {
    mu[r] = pred.mu(r, o.channel);
    sigma[r] = pred.sigma(r, o.channel);
  }
  plot_field(mu, res, o.out + "_mean.png");
  plot_field(sigma, res, o.out + "_sigma.png");

  // context observations as dots over a white canvas
  const int n = static_cast<int>(std::max<std::size_t>(res, 256));
  tools::Image img(n, n);
  double flo = task.ctx.f(0, o.channel), fhi = flo;
  for (std::size_t i = 0; i < task.ctx.size(); ++i) {
    flo = std::min(flo, task.ctx.f(i, o.channel));
    fhi = std::max(fhi, task.ctx.f(i, o.channel));
  }
  for (std::size_t i = 0; i < task.ctx.size(); ++i) {
    const int x = static_cast<int>((task.ctx.s(i, 0) - lo[0]) / (hi[0] - lo[0]) * (n - 1));
    const int y = n - 1 - static_cast<int>((task.ctx.s(i, 1) - lo[1]) / (hi[1] - lo[1]) * (n - 1));
    std::uint8_t r, g, b;
    tools::colormap((task.ctx.f(i, o.channel) - flo) / std::max(fhi - flo, 1e-12), r, g, b);
    img.dot(x, y, 2, r, g, b);
  }
  tools::write_png(o.out + "_context.png", img);
  std::printf("wrote %s_context.png (%zu points)\n", o.out.c_str(), task.ctx.size());
}

int run_plot(const PlotOptions& o) {
  if (o.metrics.empty() && o.checkpoint.empty()) throw ConfigError("plot needs --metrics and/or --checkpoint");
  if (!o.metrics.empty()) plot_curves(o.metrics, o.out);
  if (!o.checkpoint.empty()) plot_predictions(o);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Biased scan attention transformer neural process"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate tasks into a flat binary file");
  add_common(*gen_cmd, gen.common);
  gen_cmd->add_option("--batches", gen.batches, "number of batches from the task stream")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output file")->required();

  TrainCliOptions tr;
  auto* train_cmd = app.add_subcommand("train", "train a model, writing metrics.csv and checkpoints to --out");
  add_common(*train_cmd, tr.common);
  train_cmd->add_option("--out", tr.out_dir, "output directory")->required();
  train_cmd->add_option("--bias", tr.bias, "bias variant: rbf, geodesic, embed");
  train_cmd->add_option("--steps", tr.steps, "overrides train.steps");
  train_cmd->add_flag("--quiet", tr.quiet, "do not echo metric rows");

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate checkpoints on held-out tasks under group actions");
  add_common(*eval_cmd, ev.common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint to evaluate");
  eval_cmd->add_option("--bias", ev.bias, "VARIANT=CHECKPOINT, repeatable; variant checked against the checkpoint");
  eval_cmd->add_option("--tasks", ev.tasks_file, "task file from `gen` instead of the held-out stream");
  eval_cmd->add_option("--batches", ev.batches, "held-out batches (default train.eval_batches)");
  eval_cmd->add_option("--shift", ev.shifts, "translate s by tau, repeatable");
  eval_cmd->add_option("--scale", ev.scales, "scale s by k, repeatable");
  eval_cmd->add_option("--rotate", ev.rotations, "rotate lon/lat, e.g. yxz:-60,30,0; repeatable");
  eval_cmd->add_flag("--standard-rotations", ev.standard_rotations, "add both rotations of the spherical benchmark");

  BenchOptions bo;
  auto* bench_cmd = app.add_subcommand("bench", "memory and throughput of scan vs naive attention");
  bench_cmd->add_option("--ctx", bo.cfg.ctx_sizes, "context sizes")->capture_default_str();
  bench_cmd->add_option("--test", bo.cfg.test_sizes, "test sizes")->capture_default_str();
  bench_cmd->add_option("--block", bo.cfg.block, "tile size")->capture_default_str();
  bench_cmd->add_option("--head-dim", bo.cfg.head_dim, "head width")->capture_default_str();
  bench_cmd->add_option("--basis", bo.cfg.basis, "RBF bases")->capture_default_str();
  bench_cmd->add_option("--repeats", bo.cfg.repeats, "timed runs per size")->capture_default_str();
  bench_cmd->add_option("--naive-max-pairs", bo.cfg.naive_max_pairs, "skip naive above this many score entries")
      ->capture_default_str();
  bench_cmd->add_option("--seed", bo.cfg.seed, "input seed")->capture_default_str();
  bench_cmd->add_flag("--showcase", bo.showcase, "1M test points over 100K context points, scan path only");

  PlotOptions po;
  auto* plot_cmd = app.add_subcommand("plot", "write PNG convergence curves and predicted fields");
  add_common(*plot_cmd, po.common);
  plot_cmd->add_option("--metrics", po.metrics, "metrics.csv from train");
  plot_cmd->add_option("--checkpoint", po.checkpoint, "checkpoint for mean/sigma field plots");
  plot_cmd->add_option("--out", po.out, "output file prefix")->capture_default_str();
  plot_cmd->add_option("--resolution", po.resolution, "grid cells per side")->capture_default_str();
  plot_cmd->add_option("--task", po.task_index, "held-out task index")->capture_default_str();
  plot_cmd->add_option("--channel", po.channel, "output channel")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*bench_cmd) return run_bench(bo);
    if (*plot_cmd) return run_plot(po);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
