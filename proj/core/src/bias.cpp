#include "bsatnp/bias.hpp"

#include <cmath>
#include <numbers>

#include "bsatnp/kernels.hpp"

namespace bsatnp {

std::string_view to_string(FeatureGroup g) noexcept {
  switch (g) {
    case FeatureGroup::x: return "x";
    case FeatureGroup::s: return "s";
    case FeatureGroup::t: return "t";
  }
  return "?";
}

std::string_view to_string(BiasKind k) noexcept {
  switch (k) {
    case BiasKind::none: return "none";
    case BiasKind::rbf: return "rbf";
    case BiasKind::geodesic: return "geodesic";
  }
  return "?";
}

FeatureGroup parse_feature_group(std::string_view text) {
  for (auto g : kFeatureGroups) {
    if (text == to_string(g)) return g;
  }
  throw ConfigError("unknown feature group '" + std::string(text) + "' (expected x, s or t)");
}

BiasKind parse_bias_kind(std::string_view text) {
  for (auto k : {BiasKind::none, BiasKind::rbf, BiasKind::geodesic}) {
    if (text == to_string(k)) return k;
  }
  throw ConfigError("unknown bias kind '" + std::string(text) + "' (expected none, rbf or geodesic)");
}

bool BiasSpec::any() const noexcept {
  for (const auto& g : groups) {
    if (g.active()) return true;
  }
  return false;
}

std::vector<FeatureGroup> BiasSpec::active_groups() const {
  std::vector<FeatureGroup> out;
  for (auto g : kFeatureGroups) {
    if ((*this)[g].active()) out.push_back(g);
  }
  return out;
}

BiasSpec BiasSpec::defaults() {
  BiasSpec spec;
  spec[FeatureGroup::s] = GroupBias{BiasKind::rbf, 5};
  spec[FeatureGroup::t] = GroupBias{BiasKind::rbf, 3};
  return spec;
}

// ---- kernels ----------------------------------------------------------------

template <typename T>
void sq_dist_tile(const T* q, std::size_t ldq, std::size_t nq, const T* kt, std::size_t ldk, std::size_t nk,
                  std::size_t width, T* out, std::size_t ldo) {
  for (std::size_t i = 0; i < nq; ++i) {
    T* o = out + i * ldo;
    for (std::size_t j = 0; j < nk; ++j) o[j] = T{0};
    for (std::size_t d = 0; d < width; ++d) {
      const T qd = q[i * ldq + d];
      const T* kd = kt + d * ldk;
      for (std::size_t j = 0; j < nk; ++j) {
        const T diff = qd - kd[j];
        o[j] += diff * diff;
      }
    }
  }
}

template <typename T>
void lonlat_to_unit(const T* ll, std::size_t ldll, std::size_t n, T* out, std::size_t ld_out, bool transposed) {
  constexpr T deg = std::numbers::pi_v<T> / T{180};
  for (std::size_t i = 0; i < n; ++i) {
    const T lon = ll[i * ldll] * deg;
    const T lat = ll[i * ldll + 1] * deg;
    const T c = std::cos(lat);
    const T xyz[3] = {c * std::cos(lon), c * std::sin(lon), std::sin(lat)};
    for (std::size_t d = 0; d < 3; ++d) {
      if (transposed) {
        out[d * ld_out + i] = xyz[d];
      } else {
        out[i * ld_out + d] = xyz[d];
      }
    }
  }
}

template <typename T>
void geo_dist_sq_tile(const T* qu, std::size_t nq, const T* kt, std::size_t ldk, std::size_t nk, T* out,
                      std::size_t ldo) {
  const T* kx = kt;
  const T* ky = kt + ldk;
  const T* kz = kt + 2 * ldk;
  for (std::size_t i = 0; i < nq; ++i) {
    const T ux = qu[3 * i], uy = qu[3 * i + 1], uz = qu[3 * i + 2];
    T* o = out + i * ldo;
    for (std::size_t j = 0; j < nk; ++j) {
      const T cx = uy * kz[j] - uz * ky[j];
      const T cy = uz * kx[j] - ux * kz[j];
      const T cz = ux * ky[j] - uy * kx[j];
      const T cross = std::sqrt(cx * cx + cy * cy + cz * cz);
      const T dot = ux * kx[j] + uy * ky[j] + uz * kz[j];
      const T d = std::atan2(cross, dot);
      o[j] = d * d;
    }
  }
}

template <typename T>
void radial_bias_accumulate(const T* d2, std::size_t ldd, std::size_t nq, std::size_t nk, const T* a, const T* b,
                            std::size_t basis, T* out, std::size_t ldo) {
  for (std::size_t i = 0; i < nq; ++i) {
    const T* dr = d2 + i * ldd;
    T* o = out + i * ldo;
    for (std::size_t f = 0; f < basis; ++f) {
      const T af = a[f];
      const T nb = -b[f];
      for (std::size_t j = 0; j < nk; ++j) o[j] += af * fast_exp(nb * dr[j]);
    }
  }
}

// ---- tensor wrappers ----------------------------------------------------------

namespace {

template <typename T>
Tensor<T> transposed(const Tensor<T>& m) {
  const std::size_t r = m.rows(), c = m.cols();
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = m[i * c + j];
  }
  return out;
}

template <typename T>
void check_points(const Tensor<T>& q, const Tensor<T>& k, const char* what) {
  require_matrix(q, what);
  require_matrix(k, what);
  if (q.dim(1) != k.dim(1)) {
    throw DimensionError(std::string(what) + ": coordinate widths differ, " + shape_string(q.shape()) + " vs " +
                         shape_string(k.shape()));
  }
}

template <typename T>
void check_radial_params(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.size() != b.size()) throw DimensionError(std::string(what) + ": a and b hold different basis counts");
  for (std::size_t f = 0; f < b.size(); ++f) {
    if (!(b[f] > T{0})) throw ContractError(std::string(what) + ": decay rates must be positive");
  }
}

}  // namespace

template <typename T>
Tensor<T> pairwise_distance_sq(BiasKind kind, const Tensor<T>& q, const Tensor<T>& k) {
  check_points(q, k, "pairwise_distance_sq");
  const std::size_t nq = q.dim(0), nk = k.dim(0);
  Tensor<T> out({nq, nk});
  if (kind == BiasKind::geodesic) {
    if (q.dim(1) != 2) throw DimensionError("geodesic distance needs (lon, lat) pairs, got " + shape_string(q.shape()));
    Tensor<T> qu({nq, 3});
    Tensor<T> kt({3, nk});
    lonlat_to_unit(q.data(), 2, nq, qu.data(), 3, false);
    lonlat_to_unit(k.data(), 2, nk, kt.data(), nk, true);
    geo_dist_sq_tile(qu.data(), nq, kt.data(), nk, nk, out.data(), nk);
  } else {
    const Tensor<T> kt = transposed(k);
    sq_dist_tile(q.data(), q.dim(1), nq, kt.data(), nk, nk, q.dim(1), out.data(), nk);
  }
  return out;
}

template <typename T>
Tensor<T> rbf_bias_tile(const Tensor<T>& q_loc, const Tensor<T>& k_loc, const Tensor<T>& a, const Tensor<T>& b) {
  check_radial_params(a, b, "rbf_bias_tile");
  const Tensor<T> d2 = pairwise_distance_sq(BiasKind::rbf, q_loc, k_loc);
  Tensor<T> out(d2.shape());
  radial_bias_accumulate(d2.data(), d2.cols(), d2.rows(), d2.cols(), a.data(), b.data(), a.size(), out.data(),
                         out.cols());
  return out;
}

template <typename T>
Tensor<T> geodesic_bias_tile(const Tensor<T>& q_ll, const Tensor<T>& k_ll, const Tensor<T>& a, const Tensor<T>& b) {
  check_radial_params(a, b, "geodesic_bias_tile");
  const Tensor<T> d2 = pairwise_distance_sq(BiasKind::geodesic, q_ll, k_ll);
  Tensor<T> out(d2.shape());
  radial_bias_accumulate(d2.data(), d2.cols(), d2.rows(), d2.cols(), a.data(), b.data(), a.size(), out.data(),
                         out.cols());
  return out;
}

template <typename T>
RbfTileGrads<T> rbf_bias_tile_backward(const Tensor<T>& q_loc, const Tensor<T>& k_loc, const Tensor<T>& a,
                                       const Tensor<T>& b, const Tensor<T>& d_bias) {
  check_radial_params(a, b, "rbf_bias_tile_backward");
  check_points(q_loc, k_loc, "rbf_bias_tile_backward");
  const std::size_t nq = q_loc.dim(0), nk = k_loc.dim(0), w = q_loc.dim(1), F = a.size();
  require_shape(d_bias.shape(), Shape{nq, nk}, "rbf_bias_tile_backward upstream");
  RbfTileGrads<T> g{Tensor<T>(a.shape()), Tensor<T>(b.shape()), Tensor<T>(q_loc.shape())};
  const Tensor<T> d2 = pairwise_distance_sq(BiasKind::rbf, q_loc, k_loc);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < nk; ++j) {
      const T up = d_bias(i, j);
      const T dd = d2(i, j);
      T dB_dd2{0};
      for (std::size_t f = 0; f < F; ++f) {
        const T e = std::exp(-b[f] * dd);
        g.a[f] += up * e;
        g.b[f] -= up * a[f] * e * dd;
        dB_dd2 -= a[f] * b[f] * e;
      }
      for (std::size_t c = 0; c < w; ++c) g.q_loc(i, c) += up * dB_dd2 * T{2} * (q_loc(i, c) - k_loc(j, c));
    }
  }
  return g;
}

// ---- parameters -----------------------------------------------------------------

std::string bias_param_name(std::size_t layer, FeatureGroup g, std::string_view which) {
  return "krblock." + std::to_string(layer) + ".bias." + std::string(to_string(g)) + "." + std::string(which);
}

template <typename T>
void add_bias_params(ParamStore<T>& store, const BiasSpec& spec, std::size_t layer, std::size_t heads,
                     std::mt19937_64& rng) {
  std::uniform_real_distribution<double> amp(0.0, 0.5);
  for (auto g : spec.active_groups()) {
    const auto& gb = spec[g];
    if (!(gb.b_init_min > 0.0) || gb.b_init_max < gb.b_init_min) {
      throw ConfigError("bias init range for group " + std::string(to_string(g)) + " must satisfy 0 < min <= max");
    }
    const std::size_t F = gb.basis;
    Tensor<T> a({heads, F});
    Tensor<T> b_raw({heads, F});
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t f = 0; f < F; ++f) {
        a(h, f) = static_cast<T>(amp(rng));
        const double frac = F > 1 ? static_cast<double>(f) / static_cast<double>(F - 1) : 0.0;
        const double rate = std::exp(std::log(gb.b_init_min) + frac * (std::log(gb.b_init_max) - std::log(gb.b_init_min)));
        b_raw(h, f) = static_cast<T>(softplus_inverse(rate));
      }
    }
    store.add(bias_param_name(layer, g, "a"), std::move(a));
    store.add(bias_param_name(layer, g, "b_raw"), std::move(b_raw));
  }
}

template <typename T>
Tensor<T> compose_bias(const BiasSpec& spec, const ParamStore<T>& store, std::size_t layer, std::size_t head,
                       const FeatureSet<T>& q_feats, const FeatureSet<T>& k_feats) {
  const Tensor<T>* any_q = nullptr;
  const Tensor<T>* any_k = nullptr;
  for (auto g : kFeatureGroups) {
    if (!any_q) any_q = q_feats.get(g);
    if (!any_k) any_k = k_feats.get(g);
  }
  const auto active = spec.active_groups();
  if (active.empty()) {
    if (!any_q || !any_k) throw ConfigError("compose_bias: no feature tensors to size the tile");
    return Tensor<T>({any_q->rows(), any_k->rows()});
  }
  Tensor<T> out;
  for (auto g : active) {
    const Tensor<T>* qf = q_feats.get(g);
    const Tensor<T>* kf = k_feats.get(g);
    if (!qf || !kf) {
      throw ConfigError("bias spec uses feature group '" + std::string(to_string(g)) + "' but no features were given");
    }
    const Tensor<T>& a = store.value(bias_param_name(layer, g, "a"));
    const Tensor<T>& b_raw = store.value(bias_param_name(layer, g, "b_raw"));
    if (head >= a.dim(0)) throw DimensionError("compose_bias: head index out of range");
    const std::size_t F = a.dim(1);
    std::vector<T> b(F);
    for (std::size_t f = 0; f < F; ++f) b[f] = softplus(b_raw(head, f));
    const Tensor<T> d2 = pairwise_distance_sq(spec[g].kind, *qf, *kf);
    if (out.empty()) out = Tensor<T>(d2.shape());
    require_shape(d2.shape(), out.shape(), "compose_bias tile");
    radial_bias_accumulate(d2.data(), d2.cols(), d2.rows(), d2.cols(), a.row(head), b.data(), F, out.data(),
                           out.cols());
  }
  return out;
}

template <typename T>
Var<T> radial_bias(const Tensor<T>& d2, Var<T> a, Var<T> b_raw) {
  if (a.tape != b_raw.tape) throw ContractError("radial_bias: operands live on different tapes");
  const auto& av = a.value();
  const auto& bv = b_raw.value();
  if (av.size() != bv.size()) throw DimensionError("radial_bias: a and b_raw hold different basis counts");
  require_matrix(d2, "radial_bias");
  const std::size_t F = av.size();
  std::vector<T> b(F);
  for (std::size_t f = 0; f < F; ++f) b[f] = softplus(bv[f]);
  Tensor<T> out(d2.shape());
  radial_bias_accumulate(d2.data(), d2.cols(), d2.rows(), d2.cols(), av.data(), b.data(), F, out.data(), out.cols());
  return a.tape->record("radial_bias", std::move(out), {a, b_raw}, [d2, F](Tape<T>& tape, std::size_t self) {
    const auto ia = tape.input(self, 0), ib = tape.input(self, 1);
    const auto& g = tape.grad_buffer(self);
    const auto& av = tape.value_of(ia);
    const auto& bv = tape.value_of(ib);
    std::vector<T> da(F, T{0}), db(F, T{0});
    for (std::size_t f = 0; f < F; ++f) {
      const T nb = -softplus(bv[f]);
      T sa{0}, sb{0};
      for (std::size_t i = 0; i < d2.size(); ++i) {
        const T e = fast_exp(nb * d2[i]);
        sa += g[i] * e;
        sb -= g[i] * e * d2[i];
      }
      da[f] = sa;
      db[f] = sb * av[f] * sigmoid(bv[f]);
    }
    if (tape.needs_grad(ia)) {
      auto& ga = tape.grad_buffer(ia);
      for (std::size_t f = 0; f < F; ++f) ga[f] += da[f];
    }
    if (tape.needs_grad(ib)) {
      auto& gb = tape.grad_buffer(ib);
      for (std::size_t f = 0; f < F; ++f) gb[f] += db[f];
    }
  });
}

#define BSATNP_INSTANTIATE_BIAS(T)                                                                                  \
  template void sq_dist_tile<T>(const T*, std::size_t, std::size_t, const T*, std::size_t, std::size_t, std::size_t, \
                                T*, std::size_t);                                                                   \
  template void lonlat_to_unit<T>(const T*, std::size_t, std::size_t, T*, std::size_t, bool);                       \
  template void geo_dist_sq_tile<T>(const T*, std::size_t, const T*, std::size_t, std::size_t, T*, std::size_t);    \
  template void radial_bias_accumulate<T>(const T*, std::size_t, std::size_t, std::size_t, const T*, const T*,      \
                                          std::size_t, T*, std::size_t);                                            \
  template Tensor<T> rbf_bias_tile<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> geodesic_bias_tile<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template RbfTileGrads<T> rbf_bias_tile_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                                     const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> pairwise_distance_sq<T>(BiasKind, const Tensor<T>&, const Tensor<T>&);                         \
  template void add_bias_params<T>(ParamStore<T>&, const BiasSpec&, std::size_t, std::size_t, std::mt19937_64&);    \
  template Tensor<T> compose_bias<T>(const BiasSpec&, const ParamStore<T>&, std::size_t, std::size_t,               \
                                     const FeatureSet<T>&, const FeatureSet<T>&);                                   \
  template Var<T> radial_bias<T>(const Tensor<T>&, Var<T>, Var<T>);

BSATNP_INSTANTIATE_BIAS(float)
BSATNP_INSTANTIATE_BIAS(double)

#undef BSATNP_INSTANTIATE_BIAS

}  // namespace bsatnp
