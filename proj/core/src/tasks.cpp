#include "bsatnp/tasks.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace bsatnp {

// ---- priors ---------------------------------------------------------------------

double sample_beta(double a, double b, Rng& rng) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

double sample_inv_gamma(double a, double b, Rng& rng) {
  std::gamma_distribution<double> g(a, 1.0 / b);
  return 1.0 / g(rng);
}

int sample_randint(int lo, int hi, Rng& rng) {
  if (hi <= lo) throw ConfigError("randint needs lo < hi");
  return std::uniform_int_distribution<int>(lo, hi - 1)(rng);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the three words
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

// ---- GP tasks -------------------------------------------------------------------

GpTaskConfig GpTaskConfig::desk() {
  GpTaskConfig c;
  c.n_ctx_min = 32;
  c.n_ctx_max = 128;
  c.n_test = 256;
  return c;
}

GpTaskConfig GpTaskConfig::spherical() {
  GpTaskConfig c;
  c.kernel = GpKernel::exponential_geodesic;
  c.lo = -10.0;
  c.hi = 10.0;
  return c;
}

void GpTaskConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("gp task config: " + m); };
  if (!(hi > lo)) fail("box needs lo < hi");
  if (ds == 0) fail("ds must be positive");
  if (kernel == GpKernel::exponential_geodesic && ds != 2) fail("geodesic kernel needs ds = 2");
  if (n_ctx_min == 0 || n_ctx_max < n_ctx_min) fail("context range must satisfy 1 <= min <= max");
  if (n_test == 0 || batch == 0) fail("n_test and batch must be positive");
  if (noise_sd < 0.0) fail("noise_sd must be non-negative");
  if (!(ls_beta_a > 0.0 && ls_beta_b > 0.0 && ls_ig_a > 0.0 && ls_ig_b > 0.0)) fail("prior parameters must be positive");
  if (!(inner_hi > inner_lo && outer_hi > outer_lo)) fail("multiresolution boxes need lo < hi");
  if (!(jitter > 0.0) || max_jitter < jitter) fail("jitter range must satisfy 0 < jitter <= max_jitter");
}

namespace {

void unit_vector(double lon_deg, double lat_deg, double* u) {
  const double d = std::numbers::pi / 180.0;
  const double lo = lon_deg * d, la = lat_deg * d;
  u[0] = std::cos(la) * std::cos(lo);
  u[1] = std::cos(la) * std::sin(lo);
  u[2] = std::sin(la);
}

double geodesic_degrees(const double* a, const double* b) {
  double u[3], v[3];
  unit_vector(a[0], a[1], u);
  unit_vector(b[0], b[1], v);
  const double cx = u[1] * v[2] - u[2] * v[1];
  const double cy = u[2] * v[0] - u[0] * v[2];
  const double cz = u[0] * v[1] - u[1] * v[0];
  const double dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
  return std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) * 180.0 / std::numbers::pi;
}

Tensor<double> uniform_box(std::size_t n, std::size_t ds, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> s({n, ds});
  for (auto& v : s.values()) v = u(rng);
  return s;
}

Tensor<double> stack_rows(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out({a.rows() + b.rows(), a.cols()});
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
  return out;
}

double sample_lengthscale(const GpTaskConfig& cfg, Rng& rng) {
  return cfg.kernel == GpKernel::squared_exponential ? sample_beta(cfg.ls_beta_a, cfg.ls_beta_b, rng)
                                                     : sample_inv_gamma(cfg.ls_ig_a, cfg.ls_ig_b, rng);
}

std::size_t sample_count(std::size_t lo, std::size_t hi, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Builds the task from ctx/test locations: joint draw, then noise on ctx f.
GpSample finish_gp_task(const GpTaskConfig& cfg, const Tensor<double>& s_ctx, const Tensor<double>& s_test,
                        double lengthscale, Rng& rng) {
  const std::size_t nc = s_ctx.rows(), nt = s_test.rows(), ds = s_ctx.cols();
  const Tensor<double> f = gp_draw(cfg.kernel, stack_rows(s_ctx, s_test), lengthscale, cfg, rng);

  GpSample out;
  out.lengthscale = lengthscale;
  out.task.domain = cfg.kernel == GpKernel::exponential_geodesic ? SpatialDomain::lonlat : SpatialDomain::euclidean;
  out.task.ctx = PointSet<double>::zeros(nc, 0, ds, 0, 1, true);
  out.task.test = PointSet<double>::zeros(nt, 0, ds, 0, 1, false);
  out.task.ctx.s = s_ctx;
  out.task.test.s = s_test;
  out.ctx_latent = Tensor<double>({nc, 1});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < nc; ++i) {
    out.ctx_latent[i] = f[i];
    out.task.ctx.f[i] = f[i] + cfg.noise_sd * noise(rng);
  }
  for (std::size_t i = 0; i < nt; ++i) out.task.test.f[i] = f[nc + i];
  return out;
}

GpSample gp_task_at(const GpTaskConfig& cfg, double ls, std::size_t n_ctx, Rng& rng) {
  const Tensor<double> s_ctx = uniform_box(n_ctx, cfg.ds, cfg.lo, cfg.hi, rng);
  const Tensor<double> s_test = uniform_box(cfg.n_test, cfg.ds, cfg.lo, cfg.hi, rng);
  return finish_gp_task(cfg, s_ctx, s_test, ls, rng);
}

GpSample multires_task_at(const GpTaskConfig& cfg, double ls, std::size_t n_ctx, Rng& rng) {
  const std::size_t n_inner = n_ctx / 2;
  const Tensor<double> inner = uniform_box(n_inner, cfg.ds, cfg.inner_lo, cfg.inner_hi, rng);
  const Tensor<double> outer = uniform_box(n_ctx - n_inner, cfg.ds, cfg.outer_lo, cfg.outer_hi, rng);
  const Tensor<double> s_test = uniform_box(cfg.n_test, cfg.ds, cfg.inner_lo, cfg.inner_hi, rng);
  return finish_gp_task(cfg, stack_rows(inner, outer), s_test, ls, rng);
}

}  // namespace

Tensor<double> gp_kernel(GpKernel kernel, const Tensor<double>& a, const Tensor<double>& b, double lengthscale) {
  if (a.cols() != b.cols()) throw DimensionError("gp_kernel: location widths differ");
  if (!(lengthscale > 0.0)) throw ConfigError("gp_kernel: lengthscale must be positive");
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  Tensor<double> k({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (kernel == GpKernel::squared_exponential) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = a(i, c) - b(j, c);
          d2 += diff * diff;
        }
        k(i, j) = std::exp(-0.5 * d2 / (lengthscale * lengthscale));
      } else {
        if (d != 2) throw DimensionError("geodesic kernel needs (lon, lat) locations");
        k(i, j) = std::exp(-geodesic_degrees(a.row(i), b.row(j)) / lengthscale);
      }
    }
  }
  return k;
}

Tensor<double> jittered_cholesky(const Tensor<double>& k, double jitter, double max_jitter) {
  const auto n = static_cast<Eigen::Index>(k.rows());
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> km(k.data(), n, n);
  for (double j = jitter; j <= max_jitter * (1.0 + 1e-9); j *= 10.0) {
    Mat a = km;
    a.diagonal().array() += j;
    Eigen::LLT<Mat> llt(a);
    if (llt.info() == Eigen::Success) {
      Tensor<double> out({k.rows(), k.rows()});
      Eigen::Map<Mat>(out.data(), n, n) = llt.matrixL();
      return out;
    }
  }
  throw GenerationError("Cholesky failed for a " + std::to_string(k.rows()) + "x" + std::to_string(k.rows()) +
                        " kernel matrix with jitter up to " + std::to_string(max_jitter));
}

Tensor<double> gp_draw(GpKernel kernel, const Tensor<double>& locations, double lengthscale, const GpTaskConfig& cfg,
                       Rng& rng) {
  const Tensor<double> l = jittered_cholesky(gp_kernel(kernel, locations, locations, lengthscale), cfg.jitter,
                                             cfg.max_jitter);
  const std::size_t n = locations.rows();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(n);
  for (auto& v : z) v = normal(rng);
  Tensor<double> f({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j <= i; ++j) acc += l(i, j) * z[j];
    f[i] = acc;
  }
  return f;
}

GpSample gp_sample_task(const GpTaskConfig& cfg, Rng& rng) {
  cfg.validate();
  const double ls = sample_lengthscale(cfg, rng);
  return gp_task_at(cfg, ls, sample_count(cfg.n_ctx_min, cfg.n_ctx_max, rng), rng);
}

GpSample gp_sample_task(const GpTaskConfig& cfg, double lengthscale, std::size_t n_ctx, Rng& rng) {
  cfg.validate();
  return gp_task_at(cfg, lengthscale, n_ctx, rng);
}

GpSample make_multires_task(const GpTaskConfig& cfg, Rng& rng) {
  cfg.validate();
  const double ls = sample_lengthscale(cfg, rng);
  return multires_task_at(cfg, ls, sample_count(cfg.n_ctx_min, cfg.n_ctx_max, rng), rng);
}

double multires_reduction(const GpTaskConfig& cfg) {
  const double ratio = std::pow((cfg.outer_hi - cfg.outer_lo) / (cfg.inner_hi - cfg.inner_lo), static_cast<double>(cfg.ds));
  // Half the points cover the inner box densely; matching that density in
  // the outer box would take `ratio` times as many.
  return 1.0 - 2.0 / ratio;
}

GpSample spherical_gp_task(const GpTaskConfig& cfg, Rng& rng) {
  GpTaskConfig c = cfg;
  c.kernel = GpKernel::exponential_geodesic;
  c.ds = 2;
  return gp_sample_task(c, rng);
}

std::vector<Rotation> spherical_rotations() {
  return {euler_rotation("yxz", {0, 0, 0}), parse_rotation("yxz:-60,30,0"), parse_rotation("yxz:-60,30,20")};
}

// ---- SIR ------------------------------------------------------------------------

SirConfig SirConfig::desk() {
  SirConfig c;
  c.n_ctx_min = 32;
  c.n_ctx_max = 128;
  c.n_test = 256;
  return c;
}

void SirConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("sir config: " + m); };
  if (grid == 0 || !(hi > lo)) fail("grid must be positive with lo < hi");
  if (!(beta_a > 0 && beta_b > 0 && gamma_a > 0 && gamma_b > 0)) fail("prior parameters must be positive");
  if (omega_lo < 0 || omega_hi <= omega_lo) fail("initial infection range must satisfy 0 <= lo < hi");
  if (static_cast<std::size_t>(omega_hi - 1) > grid * grid) fail("more initial infections than cells");
  if (cutoff < 1.0) fail("cutoff must be at least one cell");
  if (n_ctx_min == 0 || n_ctx_max < n_ctx_min) fail("context range must satisfy 1 <= min <= max");
  if (n_test < n_ctx_max) fail("n_test must hold every context cell");
  if (n_test > grid * grid) fail("n_test exceeds the number of cells");
  if (batch == 0) fail("batch must be positive");
}

SirParams sample_sir_params(const SirConfig& cfg, Rng& rng) {
  SirParams p;
  p.beta = sample_beta(cfg.beta_a, cfg.beta_b, rng);
  p.gamma = std::min(1.0, sample_inv_gamma(cfg.gamma_a, cfg.gamma_b, rng));
  p.omega = sample_randint(cfg.omega_lo, cfg.omega_hi, rng);
  return p;
}

std::size_t SirRollout::count(std::size_t step, SirState s) const {
  const auto begin = states.begin() + static_cast<std::ptrdiff_t>(step * grid * grid);
  return static_cast<std::size_t>(std::count(begin, begin + static_cast<std::ptrdiff_t>(grid * grid), s));
}

SirRollout sir_simulate(const SirConfig& cfg, Rng& rng) {
  cfg.validate();
  const SirParams p = sample_sir_params(cfg, rng);
  return sir_simulate(cfg, p, rng);
}

SirRollout sir_simulate(const SirConfig& cfg, const SirParams& params, Rng& rng) {
  const std::size_t cells = cfg.grid * cfg.grid;
  std::vector<std::size_t> idx(cells);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // partial Fisher-Yates for the seed cells
  const auto omega = std::min<std::size_t>(static_cast<std::size_t>(std::max(params.omega, 0)), cells);
  for (std::size_t i = 0; i < omega; ++i) {
    std::swap(idx[i], idx[std::uniform_int_distribution<std::size_t>(i, cells - 1)(rng)]);
  }
  std::vector<SirState> initial(cells, SirState::S);
  for (std::size_t i = 0; i < omega; ++i) initial[idx[i]] = SirState::I;
  return sir_simulate(cfg, params, std::move(initial), rng);
}

SirRollout sir_simulate(const SirConfig& cfg, const SirParams& params, std::vector<SirState> initial, Rng& rng) {
  const std::size_t g = cfg.grid, cells = g * g;
  if (initial.size() != cells) throw DimensionError("initial SIR frame does not match the grid");
  SirRollout r;
  r.grid = g;
  r.steps = cfg.steps;
  r.params = params;
  r.states.reserve((cfg.steps + 1) * cells);
  r.states.insert(r.states.end(), initial.begin(), initial.end());

  // Interaction stencil within the cutoff, with the per-neighbour infection odds.
  struct Offset {
    int di, dj;
    double keep;  // 1 - beta * min(1, 1 / dist)
  };
  std::vector<Offset> stencil;
  const int reach = static_cast<int>(std::floor(cfg.cutoff));
  for (int di = -reach; di <= reach; ++di) {
    for (int dj = -reach; dj <= reach; ++dj) {
      if (di == 0 && dj == 0) continue;
      const double dist = std::sqrt(static_cast<double>(di * di + dj * dj));
      if (dist > cfg.cutoff) continue;
      stencil.push_back({di, dj, 1.0 - params.beta * std::min(1.0, 1.0 / dist)});
    }
  }

  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SirState> cur = std::move(initial), next(cells);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < g; ++i) {
      for (std::size_t j = 0; j < g; ++j) {
        const SirState s = cur[i * g + j];
        SirState out = s;
        if (s == SirState::I) {
          if (u(rng) < params.gamma) out = SirState::R;
        } else if (s == SirState::S) {
          double escape = 1.0;
          for (const auto& o : stencil) {
            const long ii = static_cast<long>(i) + o.di, jj = static_cast<long>(j) + o.dj;
            if (ii < 0 || jj < 0 || ii >= static_cast<long>(g) || jj >= static_cast<long>(g)) continue;
            if (cur[static_cast<std::size_t>(ii) * g + static_cast<std::size_t>(jj)] == SirState::I) escape *= o.keep;
          }
          if (escape < 1.0 && u(rng) < 1.0 - escape) out = SirState::I;
        }
        next[i * g + j] = out;
      }
    }
    std::swap(cur, next);
    r.states.insert(r.states.end(), cur.begin(), cur.end());
  }
  return r;
}

Task<double> sir_task_from_rollout(const SirRollout& rollout, const SirConfig& cfg, Rng& rng) {
  cfg.validate();
  return sir_task_from_rollout(rollout, cfg, sample_count(cfg.n_ctx_min, cfg.n_ctx_max, rng), rng);
}

Task<double> sir_task_from_rollout(const SirRollout& rollout, const SirConfig& cfg, std::size_t n_ctx, Rng& rng) {
  if (rollout.states.empty()) throw ContractError("empty SIR rollout");
  const std::size_t g = rollout.grid, cells = g * g;
  if (n_ctx == 0 || n_ctx > cfg.n_test || cfg.n_test > cells) {
    throw ConfigError("SIR task needs 1 <= n_ctx <= n_test <= cells");
  }
  const std::size_t step = std::uniform_int_distribution<std::size_t>(0, rollout.steps)(rng);
  std::vector<std::size_t> idx(cells);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < cfg.n_test; ++i) {
    std::swap(idx[i], idx[std::uniform_int_distribution<std::size_t>(i, cells - 1)(rng)]);
  }
  const double h = (cfg.hi - cfg.lo) / static_cast<double>(g);
  auto fill = [&](PointSet<double>& p, std::size_t row, std::size_t cell) {
    const std::size_t i = cell / g, j = cell % g;
    p.s(row, 0) = cfg.lo + (static_cast<double>(j) + 0.5) * h;
    p.s(row, 1) = cfg.lo + (static_cast<double>(i) + 0.5) * h;
    p.f(row, static_cast<std::size_t>(rollout.at(step, i, j))) = 1.0;
  };
  Task<double> task;
  task.ctx = PointSet<double>::zeros(n_ctx, 0, 2, 0, 3, true);
  task.test = PointSet<double>::zeros(cfg.n_test, 0, 2, 0, 3, false);
  for (std::size_t r = 0; r < n_ctx; ++r) fill(task.ctx, r, idx[r]);
  for (std::size_t r = 0; r < cfg.n_test; ++r) fill(task.test, r, idx[r]);
  return task;
}

// ---- families -------------------------------------------------------------------

TaskFamily parse_task_family(std::string_view text) {
  if (text == "gp") return TaskFamily::gp;
  if (text == "multires") return TaskFamily::multires;
  if (text == "sir") return TaskFamily::sir;
  if (text == "spherical") return TaskFamily::spherical;
  throw ConfigError("unknown task family '" + std::string(text) + "' (expected gp, multires, sir or spherical)");
}

std::string_view to_string(TaskFamily f) noexcept {
  switch (f) {
    case TaskFamily::gp: return "gp";
    case TaskFamily::multires: return "multires";
    case TaskFamily::sir: return "sir";
    case TaskFamily::spherical: return "spherical";
  }
  return "?";
}

std::vector<GpSample> TaskStream::gp_batch(std::size_t index) const {
  if (family == TaskFamily::sir) throw ConfigError("SIR streams carry no GP hyperparameters");
  GpTaskConfig c = gp;
  if (family == TaskFamily::spherical) {
    c.kernel = GpKernel::exponential_geodesic;
    c.ds = 2;
  }
  c.validate();
  Rng shared(derive_seed(seed, index, ~0ULL));
  const std::size_t n_ctx = sample_count(c.n_ctx_min, c.n_ctx_max, shared);
  std::vector<GpSample> out;
  for (std::size_t k = 0; k < c.batch; ++k) {
    Rng rng(derive_seed(seed, index, k));
    const double ls = sample_lengthscale(c, rng);
    out.push_back(family == TaskFamily::multires ? multires_task_at(c, ls, n_ctx, rng) : gp_task_at(c, ls, n_ctx, rng));
  }
  return out;
}

TaskBatch<double> TaskStream::batch(std::size_t index) const {
  TaskBatch<double> out;
  if (family == TaskFamily::sir) {
    sir.validate();
    Rng shared(derive_seed(seed, index, ~0ULL));
    const std::size_t n_ctx = sample_count(sir.n_ctx_min, sir.n_ctx_max, shared);
    for (std::size_t k = 0; k < sir.batch; ++k) {
      Rng rng(derive_seed(seed, index, k));
      out.tasks.push_back(sir_task_from_rollout(sir_simulate(sir, rng), sir, n_ctx, rng));
    }
    return out;
  }
  for (auto& s : gp_batch(index)) out.tasks.push_back(std::move(s.task));
  return out;
}

}  // namespace bsatnp
