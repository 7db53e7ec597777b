#include "bsatnp/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bsatnp/kernels.hpp"

namespace bsatnp {

void AttentionConfig::validate() const {
  if (block_q == 0 || block_k == 0) throw ConfigError("attention block sizes must be >= 1");
  if (heads == 0) throw ConfigError("attention needs at least one head");
  if (head_dim == 0 || value_dim == 0) throw ConfigError("attention head and value widths must be >= 1");
}

// ---- online softmax state ------------------------------------------------------

template <typename T>
void ScanState<T>::reset(std::size_t rows_, std::size_t dv_) {
  rows = rows_;
  dv = dv_;
  started = false;
  m.assign(rows, T{0});
  ell.assign(rows, T{0});
  o_tilde.assign(rows * dv, T{0});
}

template <typename T>
void scan_update(ScanState<T>& state, T* scores, std::size_t lds, std::size_t nk, const T* v, std::size_t ldv) {
  if (nk == 0) return;
  const std::size_t rows = state.rows, dv = state.dv;
  for (std::size_t r = 0; r < rows; ++r) {
    T* s = scores + r * lds;
    T mx = s[0];
    for (std::size_t j = 1; j < nk; ++j) mx = s[j] > mx ? s[j] : mx;
    T m_new = mx;
    T rescale = T{0};
    if (state.started) {
      m_new = std::max(state.m[r], mx);
      rescale = fast_exp(state.m[r] - m_new);
    }
    T row_sum{0};
    for (std::size_t j = 0; j < nk; ++j) {
      s[j] = fast_exp(s[j] - m_new);
      row_sum += s[j];
    }
    if (state.started) {
      state.ell[r] = rescale * state.ell[r] + row_sum;
      T* o = state.o_tilde.data() + r * dv;
      for (std::size_t c = 0; c < dv; ++c) o[c] *= rescale;
    } else {
      state.ell[r] = row_sum;
    }
    state.m[r] = m_new;
  }
  gemm<T>(false, false, rows, dv, nk, T{1}, scores, lds, v, ldv, state.started ? T{1} : T{0}, state.o_tilde.data(),
          dv);
  state.started = true;
}

template <typename T>
void scan_finalize(const ScanState<T>& state, T* out, std::size_t ldo) {
  for (std::size_t r = 0; r < state.rows; ++r) {
    const T l = state.ell[r];
    const T* o = state.o_tilde.data() + r * state.dv;
    T* dst = out + r * ldo;
    for (std::size_t c = 0; c < state.dv; ++c) dst[c] = o[c] / l;
  }
}

// ---- naive reference ------------------------------------------------------------

template <typename T>
Tensor<T> naive_biased_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias) {
  require_matrix(q, "naive_biased_attention Q");
  require_matrix(k, "naive_biased_attention K");
  require_matrix(v, "naive_biased_attention V");
  const std::size_t nq = q.dim(0), nk = k.dim(0), de = q.dim(1), dv = v.dim(1);
  if (nk == 0) throw DimensionError("naive_biased_attention: empty key set");
  if (k.dim(1) != de) throw DimensionError("naive_biased_attention: Q and K widths differ");
  if (v.dim(0) != nk) throw DimensionError("naive_biased_attention: K and V row counts differ");
  if (!bias.empty()) require_shape(bias.shape(), Shape{nq, nk}, "naive_biased_attention bias");
  Tensor<T> s({nq, nk});
  gemm<T>(false, true, nq, nk, de, T{1} / std::sqrt(static_cast<T>(de)), q.data(), de, k.data(), de, T{0}, s.data(),
          nk);
  if (!bias.empty()) {
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += bias[i];
  }
  check_finite(s, "naive_biased_attention", "score");
  ScanState<T> state;
  state.reset(nq, dv);
  scan_update(state, s.data(), nk, nk, v.data(), dv);
  Tensor<T> out({nq, dv});
  scan_finalize(state, out.data(), dv);
  return out;
}

// ---- scan ----------------------------------------------------------------------

namespace {

template <typename T>
std::vector<Segment> checked_segments(const ScanProblem<T>& p, const AttentionConfig& cfg) {
  cfg.validate();
  if (p.nk == 0) throw DimensionError("biased scan attention: empty key set");
  if (!p.q || !p.k || !p.v) throw ContractError("biased scan attention: null input");
  std::vector<Segment> segs = p.segments;
  if (segs.empty()) segs.push_back(Segment{0, p.nq, 0, p.nk});
  std::vector<Segment> sorted = segs;
  std::sort(sorted.begin(), sorted.end(), [](const Segment& a, const Segment& b) { return a.q_begin < b.q_begin; });
  std::size_t prev_end = 0;
  for (const auto& s : sorted) {
    if (s.q_begin + s.q_count > p.nq || s.k_begin + s.k_count > p.nk) {
      throw DimensionError("attention segment exceeds the query or key rows");
    }
    if (s.q_count > 0 && s.k_count == 0) throw DimensionError("attention segment with queries but no keys");
    if (s.q_count > 0 && s.q_begin < prev_end) throw ContractError("attention segments overlap in query rows");
    if (s.q_count > 0) prev_end = s.q_begin + s.q_count;
  }
  for (const auto& b : p.bias) {
    if (!b.q_feat || !b.k_feat || !b.a || !b.b) throw ContractError("bias term with missing inputs");
    if (b.kind == BiasKind::geodesic && b.width != 2) throw DimensionError("geodesic bias needs (lon, lat) features");
    if (b.kind == BiasKind::none) throw ContractError("bias term of kind none");
  }
  return segs;
}

// Per-tile bias workspace: transposed key coordinates, query unit vectors
// and one distance tile per term.
template <typename T>
struct BiasWork {
  std::vector<Buffer<T>> kt;
  std::vector<Buffer<T>> qu;
  std::vector<Buffer<T>> dist;
  std::vector<Buffer<T>> resp;

  BiasWork(const std::vector<BiasTerm<T>>& terms, std::size_t bq, std::size_t bk) {
    for (const auto& t : terms) {
      const std::size_t w = t.kind == BiasKind::geodesic ? 3 : t.width;
      kt.emplace_back(w * bk);
      qu.emplace_back(t.kind == BiasKind::geodesic ? 3 * bq : 0);
      dist.emplace_back(bq * bk);
    }
  }

  void load_queries(const std::vector<BiasTerm<T>>& terms, std::size_t i0, std::size_t rows) {
    for (std::size_t t = 0; t < terms.size(); ++t) {
      if (terms[t].kind == BiasKind::geodesic) {
        lonlat_to_unit(terms[t].q_feat + i0 * terms[t].q_ld, terms[t].q_ld, rows, qu[t].data(), 3, false);
      }
    }
  }

  void load_tile(const std::vector<BiasTerm<T>>& terms, std::size_t i0, std::size_t rows, std::size_t j0,
                 std::size_t cols) {
    for (std::size_t t = 0; t < terms.size(); ++t) {
      const auto& term = terms[t];
      const T* kf = term.k_feat + j0 * term.k_ld;
      if (term.kind == BiasKind::geodesic) {
        lonlat_to_unit(kf, term.k_ld, cols, kt[t].data(), cols, true);
        geo_dist_sq_tile(qu[t].data(), rows, kt[t].data(), cols, cols, dist[t].data(), cols);
      } else {
        for (std::size_t j = 0; j < cols; ++j) {
          for (std::size_t d = 0; d < term.width; ++d) kt[t][d * cols + j] = kf[j * term.k_ld + d];
        }
        sq_dist_tile(term.q_feat + i0 * term.q_ld, term.q_ld, rows, kt[t].data(), cols, cols, term.width,
                     dist[t].data(), cols);
      }
    }
  }

  // Same as bias_tile, but keeps every basis response exp(-b d) of the tile
  // in `resp` (term-major, then basis) for the gradient pass.
  void bias_tile_keep(const std::vector<BiasTerm<T>>& terms, std::size_t h, std::size_t rows, std::size_t cols,
                      T* bt) {
    const std::size_t n = rows * cols;
    std::fill(bt, bt + n, T{0});
    for (std::size_t t = 0; t < terms.size(); ++t) {
      const auto& term = terms[t];
      if (resp.size() <= t) resp.resize(t + 1);
      resp[t].resize(term.basis * n);
      const T* d = dist[t].data();
      for (std::size_t f = 0; f < term.basis; ++f) {
        const T af = term.a[h * term.basis + f];
        const T nb = -term.b[h * term.basis + f];
        T* e = resp[t].data() + f * n;
        for (std::size_t i = 0; i < n; ++i) {
          e[i] = fast_exp(nb * d[i]);
          bt[i] += af * e[i];
        }
      }
    }
  }

  // bt = sum over terms for head h; zeroed first.
  void bias_tile(const std::vector<BiasTerm<T>>& terms, std::size_t h, std::size_t rows, std::size_t cols,
                 T* bt) const {
    std::fill(bt, bt + rows * cols, T{0});
    for (std::size_t t = 0; t < terms.size(); ++t) {
      const auto& term = terms[t];
      radial_bias_accumulate(dist[t].data(), cols, rows, cols, term.a + h * term.basis, term.b + h * term.basis,
                             term.basis, bt, cols);
    }
  }
};

template <typename T>
bool tile_finite(const T* s, std::size_t n) {
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += s[i] - s[i];
  return acc == T{0};
}

// Scores of one (query tile, key tile, head): Q_h K_h^T / sqrt(de) + bias.
template <typename T>
void score_tile(const ScanProblem<T>& p, const AttentionConfig& cfg, BiasWork<T>& work, Buffer<T>& bt,
                std::size_t h, std::size_t i0, std::size_t rows, std::size_t j0, std::size_t cols, T* s,
                bool keep = false) {
  const std::size_t de = cfg.head_dim, ldq = cfg.heads * de;
  const T scale = T{1} / std::sqrt(static_cast<T>(de));
  gemm<T>(false, true, rows, cols, de, scale, p.q + i0 * ldq + h * de, ldq, p.k + j0 * ldq + h * de, ldq, T{0}, s,
          cols);
  if (!p.bias.empty()) {
    if (keep) {
      work.bias_tile_keep(p.bias, h, rows, cols, bt.data());
    } else {
      work.bias_tile(p.bias, h, rows, cols, bt.data());
    }
    for (std::size_t i = 0; i < rows * cols; ++i) s[i] += bt[i];
  }
  if (!tile_finite(s, rows * cols)) {
    throw NumericError("biased scan attention: non-finite score in tile (query row " + std::to_string(i0) +
                       ", key row " + std::to_string(j0) + ", head " + std::to_string(h) + ")");
  }
}

}  // namespace

template <typename T>
void bsa_forward_into(const ScanProblem<T>& p, const AttentionConfig& cfg, T* out, ScanStats<T>* stats) {
  const auto segs = checked_segments(p, cfg);
  const std::size_t H = cfg.heads, dv = cfg.value_dim, ldv = H * dv;
  const std::size_t bq = cfg.block_q, bk = cfg.block_k;
  if (stats) {
    if (stats->m.shape() != Shape{H, p.nq}) stats->m = Tensor<T>({H, p.nq});
    if (stats->ell.shape() != Shape{H, p.nq}) stats->ell = Tensor<T>({H, p.nq});
  }
  Buffer<T> s(bq * bk);
  Buffer<T> bt(p.bias.empty() ? 0 : bq * bk);
  BiasWork<T> work(p.bias, bq, bk);
  std::vector<ScanState<T>> state(H);
  for (const auto& seg : segs) {
    for (std::size_t i0 = seg.q_begin; i0 < seg.q_begin + seg.q_count; i0 += bq) {
      const std::size_t rows = std::min(bq, seg.q_begin + seg.q_count - i0);
      for (auto& st : state) st.reset(rows, dv);
      work.load_queries(p.bias, i0, rows);
      for (std::size_t j0 = seg.k_begin; j0 < seg.k_begin + seg.k_count; j0 += bk) {
        const std::size_t cols = std::min(bk, seg.k_begin + seg.k_count - j0);
        work.load_tile(p.bias, i0, rows, j0, cols);
        for (std::size_t h = 0; h < H; ++h) {
          score_tile(p, cfg, work, bt, h, i0, rows, j0, cols, s.data());
          scan_update(state[h], s.data(), cols, cols, p.v + j0 * ldv + h * dv, ldv);
        }
      }
      for (std::size_t h = 0; h < H; ++h) {
        scan_finalize(state[h], out + i0 * ldv + h * dv, ldv);
        if (stats) {
          for (std::size_t r = 0; r < rows; ++r) {
            stats->m(h, i0 + r) = state[h].m[r];
            stats->ell(h, i0 + r) = state[h].ell[r];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> bsa_forward(const ScanProblem<T>& problem, const AttentionConfig& cfg, ScanStats<T>* stats) {
  Tensor<T> out({problem.nq, cfg.heads * cfg.value_dim});
  bsa_forward_into(problem, cfg, out.data(), stats);
  return out;
}

template <typename T>
ScanGrads<T> ScanGrads<T>::zeros(const ScanProblem<T>& p, const AttentionConfig& cfg) {
  ScanGrads g;
  g.q = Tensor<T>({p.nq, cfg.heads * cfg.head_dim});
  g.k = Tensor<T>({p.nk, cfg.heads * cfg.head_dim});
  g.v = Tensor<T>({p.nk, cfg.heads * cfg.value_dim});
  for (const auto& t : p.bias) {
    g.a.emplace_back(Shape{cfg.heads, t.basis});
    g.b.emplace_back(Shape{cfg.heads, t.basis});
  }
  return g;
}

template <typename T>
void bsa_backward_into(const ScanProblem<T>& p, const AttentionConfig& cfg, const T* out, const ScanStats<T>& stats,
                       const T* d_out, ScanGrads<T>& g) {
  const auto segs = checked_segments(p, cfg);
  const std::size_t H = cfg.heads, de = cfg.head_dim, dv = cfg.value_dim;
  const std::size_t ldq = H * de, ldv = H * dv;
  const std::size_t bq = cfg.block_q, bk = cfg.block_k;
  if (stats.m.shape() != Shape{H, p.nq} || stats.ell.shape() != Shape{H, p.nq}) {
    throw ContractError("bsa_backward: saved row statistics do not match the problem");
  }
  if (g.q.shape() != Shape{p.nq, ldq} || g.k.shape() != Shape{p.nk, ldq} || g.v.shape() != Shape{p.nk, ldv} ||
      g.a.size() != p.bias.size() || g.b.size() != p.bias.size()) {
    throw ContractError("bsa_backward: gradient buffers do not match the problem");
  }
  const T scale = T{1} / std::sqrt(static_cast<T>(de));
  Buffer<T> s(bq * bk);
  Buffer<T> dp(bq * bk);
  Buffer<T> bt(p.bias.empty() ? 0 : bq * bk);
  Buffer<T> drow(H * bq);
  BiasWork<T> work(p.bias, bq, bk);
  std::vector<std::vector<double>> acc_a, acc_b;
  for (const auto& t : p.bias) {
    acc_a.emplace_back(H * t.basis, 0.0);
    acc_b.emplace_back(H * t.basis, 0.0);
  }
  for (const auto& seg : segs) {
    for (std::size_t i0 = seg.q_begin; i0 < seg.q_begin + seg.q_count; i0 += bq) {
      const std::size_t rows = std::min(bq, seg.q_begin + seg.q_count - i0);
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t r = 0; r < rows; ++r) {
          const T* o = out + (i0 + r) * ldv + h * dv;
          const T* go = d_out + (i0 + r) * ldv + h * dv;
          T acc{0};
          for (std::size_t c = 0; c < dv; ++c) acc += o[c] * go[c];
          drow[h * bq + r] = acc;
        }
      }
      work.load_queries(p.bias, i0, rows);
      for (std::size_t j0 = seg.k_begin; j0 < seg.k_begin + seg.k_count; j0 += bk) {
        const std::size_t cols = std::min(bk, seg.k_begin + seg.k_count - j0);
        work.load_tile(p.bias, i0, rows, j0, cols);
        for (std::size_t h = 0; h < H; ++h) {
          score_tile(p, cfg, work, bt, h, i0, rows, j0, cols, s.data(), true);
          for (std::size_t r = 0; r < rows; ++r) {
            const T m = stats.m(h, i0 + r);
            const T l = stats.ell(h, i0 + r);
            T* pr = s.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) pr[j] = fast_exp(pr[j] - m) / l;
          }
          const T* go = d_out + i0 * ldv + h * dv;
          gemm<T>(true, false, cols, dv, rows, T{1}, s.data(), cols, go, ldv, T{1}, g.v.data() + j0 * ldv + h * dv,
                  ldv);
          gemm<T>(false, true, rows, cols, dv, T{1}, go, ldv, p.v + j0 * ldv + h * dv, ldv, T{0}, dp.data(), cols);
          for (std::size_t r = 0; r < rows; ++r) {
            const T d = drow[h * bq + r];
            const T* pr = s.data() + r * cols;
            T* dr = dp.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) dr[j] = pr[j] * (dr[j] - d);
          }
          gemm<T>(false, false, rows, de, cols, scale, dp.data(), cols, p.k + j0 * ldq + h * de, ldq, T{1},
                  g.q.data() + i0 * ldq + h * de, ldq);
          gemm<T>(true, false, cols, de, rows, scale, dp.data(), cols, p.q + i0 * ldq + h * de, ldq, T{1},
                  g.k.data() + j0 * ldq + h * de, ldq);
          for (std::size_t t = 0; t < p.bias.size(); ++t) {
            const auto& term = p.bias[t];
            const T* dist = work.dist[t].data();
            for (std::size_t f = 0; f < term.basis; ++f) {
              const T* resp = work.resp[t].data() + f * rows * cols;
              double sa = 0.0, sb = 0.0;
              for (std::size_t r = 0; r < rows; ++r) {
                const T* dr = dp.data() + r * cols;
                const T* dd = dist + r * cols;
                const T* er = resp + r * cols;
                T ra{0}, rb{0};
                for (std::size_t j = 0; j < cols; ++j) {
                  const T e = dr[j] * er[j];
                  ra += e;
                  rb += e * dd[j];
                }
                sa += static_cast<double>(ra);
                sb += static_cast<double>(rb);
              }
              acc_a[t][h * term.basis + f] += sa;
              acc_b[t][h * term.basis + f] -= sb * static_cast<double>(term.a[h * term.basis + f]);
            }
          }
        }
      }
    }
  }
  for (std::size_t t = 0; t < p.bias.size(); ++t) {
    for (std::size_t i = 0; i < acc_a[t].size(); ++i) {
      g.a[t][i] += static_cast<T>(acc_a[t][i]);
      g.b[t][i] += static_cast<T>(acc_b[t][i]);
    }
  }
  check_finite(g.q, "bsa_backward", "gradient");
  check_finite(g.k, "bsa_backward", "gradient");
  check_finite(g.v, "bsa_backward", "gradient");
}

template <typename T>
ScanGrads<T> bsa_backward(const ScanProblem<T>& problem, const AttentionConfig& cfg, const Tensor<T>& out,
                          const ScanStats<T>& stats, const Tensor<T>& d_out) {
  const Shape expected{problem.nq, cfg.heads * cfg.value_dim};
  require_shape(out.shape(), expected, "bsa_backward output");
  require_shape(d_out.shape(), expected, "bsa_backward upstream gradient");
  auto g = ScanGrads<T>::zeros(problem, cfg);
  bsa_backward_into(problem, cfg, out.data(), stats, d_out.data(), g);
  return g;
}

// ---- tensor-level wrappers ---------------------------------------------------------

template <typename T>
BiasBinding<T> bind_bias(const BiasSpec& spec, const ParamStore<T>& store, std::size_t layer,
                         const FeatureSet<T>& q_feats, const FeatureSet<T>& k_feats, std::size_t heads) {
  BiasBinding<T> binding;
  const auto active = spec.active_groups();
  binding.rates.reserve(active.size());
  for (auto g : active) {
    const Tensor<T>* qf = q_feats.get(g);
    const Tensor<T>* kf = k_feats.get(g);
    if (!qf || !kf) {
      throw ConfigError("bias spec uses feature group '" + std::string(to_string(g)) + "' but no features were given");
    }
    if (qf->cols() != kf->cols()) throw DimensionError("bias features of query and key sets differ in width");
    const Tensor<T>& a = store.value(bias_param_name(layer, g, "a"));
    const Tensor<T>& b_raw = store.value(bias_param_name(layer, g, "b_raw"));
    require_shape(a.shape(), Shape{heads, spec[g].basis}, "bias amplitudes");
    Tensor<T> rate(b_raw.shape());
    for (std::size_t i = 0; i < rate.size(); ++i) rate[i] = softplus(b_raw[i]);
    binding.rates.push_back(std::move(rate));
    BiasTerm<T> term;
    term.kind = spec[g].kind;
    term.q_feat = qf->data();
    term.q_ld = qf->cols();
    term.k_feat = kf->data();
    term.k_ld = kf->cols();
    term.width = qf->cols();
    term.a = a.data();
    term.b = binding.rates.back().data();
    term.basis = spec[g].basis;
    binding.terms.push_back(term);
  }
  return binding;
}

template <typename T>
Tensor<T> bsa_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const FeatureSet<T>& q_feats,
                      const FeatureSet<T>& k_feats, const BiasSpec& spec, const ParamStore<T>& store,
                      std::size_t layer, const AttentionConfig& cfg) {
  cfg.validate();
  require_shape(q.shape(), Shape{q.rows(), cfg.heads * cfg.head_dim}, "bsa_forward Q");
  require_shape(k.shape(), Shape{k.rows(), cfg.heads * cfg.head_dim}, "bsa_forward K");
  require_shape(v.shape(), Shape{k.rows(), cfg.heads * cfg.value_dim}, "bsa_forward V");
  const auto binding = bind_bias(spec, store, layer, q_feats, k_feats, cfg.heads);
  ScanProblem<T> p;
  p.q = q.data();
  p.k = k.data();
  p.v = v.data();
  p.nq = q.rows();
  p.nk = k.rows();
  p.bias = binding.terms;
  return bsa_forward(p, cfg);
}

// ---- tape ops -------------------------------------------------------------------------

namespace {

template <typename T>
void check_attention_inputs(Var<T> q, Var<T> k, Var<T> v, std::span<const AttentionBias<T>> bias,
                            const AttentionConfig& cfg, const char* op) {
  cfg.validate();
  const std::string name(op);
  require_matrix(q.value(), name + " Q");
  require_matrix(k.value(), name + " K");
  require_matrix(v.value(), name + " V");
  const std::size_t nq = q.value().dim(0), nk = k.value().dim(0);
  require_shape(q.shape(), Shape{nq, cfg.heads * cfg.head_dim}, name + " Q");
  require_shape(k.shape(), Shape{nk, cfg.heads * cfg.head_dim}, name + " K");
  require_shape(v.shape(), Shape{nk, cfg.heads * cfg.value_dim}, name + " V");
  for (const auto& b : bias) {
    if (!b.q_feat || !b.k_feat) throw ContractError(name + ": bias without coordinates");
    if (b.q_feat->rows() != nq || b.k_feat->rows() != nk || b.q_feat->cols() != b.k_feat->cols()) {
      throw DimensionError(name + ": bias coordinates do not line up with Q/K rows");
    }
    if (b.a.value().rank() != 2 || b.a.value().dim(0) != cfg.heads) {
      throw DimensionError(name + ": bias amplitudes must be [heads, basis]");
    }
    require_shape(b.b_raw.shape(), b.a.shape(), name + " bias rates");
  }
}

template <typename T>
struct ScanContext {
  std::vector<Segment> segments;
  AttentionConfig cfg;
  std::vector<AttentionBias<T>> bias;
  std::vector<Tensor<T>> rates;
  ScanStats<T> stats;

  ScanProblem<T> problem(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const std::vector<const Tensor<T>*>& amps) const {
    ScanProblem<T> p;
    p.q = q.data();
    p.k = k.data();
    p.v = v.data();
    p.nq = q.rows();
    p.nk = k.rows();
    p.segments = segments;
    for (std::size_t i = 0; i < bias.size(); ++i) {
      BiasTerm<T> t;
      t.kind = bias[i].kind;
      t.q_feat = bias[i].q_feat->data();
      t.q_ld = bias[i].q_feat->cols();
      t.k_feat = bias[i].k_feat->data();
      t.k_ld = bias[i].k_feat->cols();
      t.width = bias[i].q_feat->cols();
      t.a = amps[i]->data();
      t.b = rates[i].data();
      t.basis = amps[i]->cols();
      p.bias.push_back(t);
    }
    return p;
  }
};

}  // namespace

template <typename T>
Var<T> scan_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const AttentionBias<T>> bias,
                      std::vector<Segment> segments, const AttentionConfig& cfg) {
  check_attention_inputs(q, k, v, bias, cfg, "scan_attention");
  auto ctx = std::make_shared<ScanContext<T>>();
  ctx->segments = std::move(segments);
  ctx->cfg = cfg;
  ctx->bias.assign(bias.begin(), bias.end());
  std::vector<Var<T>> inputs{q, k, v};
  std::vector<const Tensor<T>*> amps;
  for (const auto& b : bias) {
    const auto& raw = b.b_raw.value();
    Tensor<T> rate(raw.shape());
    for (std::size_t i = 0; i < rate.size(); ++i) rate[i] = softplus(raw[i]);
    ctx->rates.push_back(std::move(rate));
    amps.push_back(&b.a.value());
    inputs.push_back(b.a);
    inputs.push_back(b.b_raw);
  }
  const auto p = ctx->problem(q.value(), k.value(), v.value(), amps);
  Tensor<T> out = bsa_forward(p, cfg, q.tape->grad_enabled() ? &ctx->stats : nullptr);
  return q.tape->record("scan_attention", std::move(out), inputs, [ctx](Tape<T>& tape, std::size_t self) {
    const std::size_t nb = ctx->bias.size();
    std::vector<const Tensor<T>*> amps;
    for (std::size_t i = 0; i < nb; ++i) amps.push_back(&tape.value_of(tape.input(self, 3 + 2 * i)));
    const auto p = ctx->problem(tape.value_of(tape.input(self, 0)), tape.value_of(tape.input(self, 1)),
                                tape.value_of(tape.input(self, 2)), amps);
    auto g = ScanGrads<T>::zeros(p, ctx->cfg);
    bsa_backward_into(p, ctx->cfg, tape.value_of(self).data(), ctx->stats, tape.grad_buffer(self).data(), g);
    const Tensor<T>* parts[3] = {&g.q, &g.k, &g.v};
    for (std::size_t i = 0; i < 3; ++i) {
      const auto in = tape.input(self, i);
      if (!tape.needs_grad(in)) continue;
      auto& dst = tape.grad_buffer(in);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += (*parts[i])[j];
    }
    for (std::size_t t = 0; t < nb; ++t) {
      const auto ia = tape.input(self, 3 + 2 * t), ib = tape.input(self, 4 + 2 * t);
      if (tape.needs_grad(ia)) {
        auto& dst = tape.grad_buffer(ia);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g.a[t][j];
      }
      if (tape.needs_grad(ib)) {
        const auto& raw = tape.value_of(ib);
        auto& dst = tape.grad_buffer(ib);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g.b[t][j] * sigmoid(raw[j]);
      }
    }
  });
}

template <typename T>
Var<T> naive_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const AttentionBias<T>> bias,
                       std::vector<Segment> segments, const AttentionConfig& cfg) {
  check_attention_inputs(q, k, v, bias, cfg, "naive_attention");
  const std::size_t nq = q.value().dim(0), nk = k.value().dim(0);
  if (nk == 0) throw DimensionError("naive_attention: empty key set");
  if (segments.empty()) segments.push_back(Segment{0, nq, 0, nk});
  std::size_t next = 0;
  for (const auto& s : segments) {
    if (s.q_begin != next) throw ContractError("naive_attention: segments must cover the query rows in order");
    if (s.k_begin + s.k_count > nk) throw DimensionError("attention segment exceeds the key rows");
    if (s.q_count > 0 && s.k_count == 0) throw DimensionError("attention segment with queries but no keys");
    next += s.q_count;
  }
  if (next != nq) throw ContractError("naive_attention: segments must cover the query rows in order");
  const std::size_t H = cfg.heads, de = cfg.head_dim, dv = cfg.value_dim;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(de));
  std::vector<Var<T>> seg_outputs;
  for (const auto& s : segments) {
    if (s.q_count == 0) continue;
    const Var<T> qs = slice_rows(q, s.q_begin, s.q_count);
    const Var<T> ks = slice_rows(k, s.k_begin, s.k_count);
    const Var<T> vs = slice_rows(v, s.k_begin, s.k_count);
    std::vector<Tensor<T>> d2;
    for (const auto& b : bias) {
      const auto& qf = *b.q_feat;
      const auto& kf = *b.k_feat;
      const std::size_t w = qf.cols();
      Tensor<T> qsub({s.q_count, w}, std::span<const T>(qf.data() + s.q_begin * w, s.q_count * w));
      Tensor<T> ksub({s.k_count, w}, std::span<const T>(kf.data() + s.k_begin * w, s.k_count * w));
      d2.push_back(pairwise_distance_sq(b.kind, qsub, ksub));
    }
    std::vector<Var<T>> heads;
    for (std::size_t h = 0; h < H; ++h) {
      Var<T> scores = scale(matmul_nt(slice_cols(qs, h * de, de), slice_cols(ks, h * de, de)), inv_sqrt);
      if (!bias.empty()) {
        Var<T> total = radial_bias(d2[0], slice_rows(bias[0].a, h, 1), slice_rows(bias[0].b_raw, h, 1));
        for (std::size_t t = 1; t < bias.size(); ++t) {
          total = add(total, radial_bias(d2[t], slice_rows(bias[t].a, h, 1), slice_rows(bias[t].b_raw, h, 1)));
        }
        scores = add(scores, total);
      }
      heads.push_back(matmul(softmax_rows(scores), slice_cols(vs, h * dv, dv)));
    }
    seg_outputs.push_back(H == 1 ? heads[0] : concat_cols<T>(heads));
  }
  return seg_outputs.size() == 1 ? seg_outputs[0] : concat_rows<T>(seg_outputs);
}

template <typename T>
Var<T> multi_head_attention(Var<T> e_q, Var<T> e_kv, const AttentionParams<T>& params,
                            std::span<const AttentionBias<T>> bias, std::vector<Segment> segments,
                            const AttentionConfig& cfg, AttentionImpl impl) {
  cfg.validate();
  const auto& wq = params.wq.value();
  const auto& wo = params.wo.value();
  if (wq.rank() != 2 || wq.dim(1) != cfg.heads * cfg.head_dim) {
    throw ConfigError("attention projection width " + shape_string(wq.shape()) + " does not match " +
                      std::to_string(cfg.heads) + " heads of width " + std::to_string(cfg.head_dim));
  }
  if (wo.rank() != 2 || wo.dim(0) != cfg.heads * cfg.value_dim) {
    throw ConfigError("attention output projection " + shape_string(wo.shape()) + " does not match the head layout");
  }
  const Var<T> q = linear(e_q, params.wq, params.bq);
  const Var<T> k = linear(e_kv, params.wk, params.bk);
  const Var<T> v = linear(e_kv, params.wv, params.bv);
  const Var<T> att = impl == AttentionImpl::scan ? scan_attention(q, k, v, bias, std::move(segments), cfg)
                                                 : naive_attention(q, k, v, bias, std::move(segments), cfg);
  return linear(att, params.wo, params.bo);
}

#define BSATNP_INSTANTIATE_ATTENTION(T)                                                                               \
  template struct ScanState<T>;                                                                                       \
  template struct ScanGrads<T>;                                                                                       \
  template void scan_update<T>(ScanState<T>&, T*, std::size_t, std::size_t, const T*, std::size_t);                   \
  template void scan_finalize<T>(const ScanState<T>&, T*, std::size_t);                                               \
  template Tensor<T> naive_biased_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                               const Tensor<T>&);                                                     \
  template void bsa_forward_into<T>(const ScanProblem<T>&, const AttentionConfig&, T*, ScanStats<T>*);                \
  template Tensor<T> bsa_forward<T>(const ScanProblem<T>&, const AttentionConfig&, ScanStats<T>*);                    \
  template void bsa_backward_into<T>(const ScanProblem<T>&, const AttentionConfig&, const T*, const ScanStats<T>&,    \
                                     const T*, ScanGrads<T>&);                                                        \
  template ScanGrads<T> bsa_backward<T>(const ScanProblem<T>&, const AttentionConfig&, const Tensor<T>&,              \
                                        const ScanStats<T>&, const Tensor<T>&);                                       \
  template BiasBinding<T> bind_bias<T>(const BiasSpec&, const ParamStore<T>&, std::size_t, const FeatureSet<T>&,      \
                                       const FeatureSet<T>&, std::size_t);                                            \
  template Tensor<T> bsa_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const FeatureSet<T>&,       \
                                    const FeatureSet<T>&, const BiasSpec&, const ParamStore<T>&, std::size_t,         \
                                    const AttentionConfig&);                                                          \
  template Var<T> scan_attention<T>(Var<T>, Var<T>, Var<T>, std::span<const AttentionBias<T>>, std::vector<Segment>, \
                                    const AttentionConfig&);                                                          \
  template Var<T> naive_attention<T>(Var<T>, Var<T>, Var<T>, std::span<const AttentionBias<T>>,                       \
                                     std::vector<Segment>, const AttentionConfig&);                                   \
  template Var<T> multi_head_attention<T>(Var<T>, Var<T>, const AttentionParams<T>&,                                 \
                                          std::span<const AttentionBias<T>>, std::vector<Segment>,                    \
                                          const AttentionConfig&, AttentionImpl);

BSATNP_INSTANTIATE_ATTENTION(float)
BSATNP_INSTANTIATE_ATTENTION(double)

#undef BSATNP_INSTANTIATE_ATTENTION

}  // namespace bsatnp
