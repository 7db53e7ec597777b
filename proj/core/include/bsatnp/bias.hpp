#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bsatnp/autodiff.hpp"
#include "bsatnp/param_store.hpp"
#include "bsatnp/tensor.hpp"

namespace bsatnp {

enum class FeatureGroup { x = 0, s = 1, t = 2 };
inline constexpr std::array<FeatureGroup, 3> kFeatureGroups{FeatureGroup::x, FeatureGroup::s, FeatureGroup::t};

enum class BiasKind { none, rbf, geodesic };

std::string_view to_string(FeatureGroup g) noexcept;
std::string_view to_string(BiasKind k) noexcept;
FeatureGroup parse_feature_group(std::string_view text);
BiasKind parse_bias_kind(std::string_view text);

// Bias definition for one feature group. `basis` radial functions per head.
// The decay rates are initialized log-spaced over [b_init_min, b_init_max],
// in inverse squared units of the group's coordinates (radians for geodesic).
struct GroupBias {
  BiasKind kind = BiasKind::none;
  std::size_t basis = 0;
  double b_init_min = 0.5;
  double b_init_max = 50.0;

  bool active() const noexcept { return kind != BiasKind::none && basis > 0; }
  bool operator==(const GroupBias&) const = default;
};

struct BiasSpec {
  std::array<GroupBias, 3> groups{};

  GroupBias& operator[](FeatureGroup g) noexcept { return groups[static_cast<std::size_t>(g)]; }
  const GroupBias& operator[](FeatureGroup g) const noexcept { return groups[static_cast<std::size_t>(g)]; }

  bool any() const noexcept;
  std::vector<FeatureGroup> active_groups() const;
  bool operator==(const BiasSpec&) const = default;

  // x: none, s: rbf with 5 bases, t: rbf with 3 bases.
  static BiasSpec defaults();
};

// Per-group coordinate tensors of one point set, rows = points. Groups a
// caller does not have stay null.
template <typename T>
struct FeatureSet {
  const Tensor<T>* x = nullptr;
  const Tensor<T>* s = nullptr;
  const Tensor<T>* t = nullptr;

  const Tensor<T>* get(FeatureGroup g) const noexcept {
    switch (g) {
      case FeatureGroup::x: return x;
      case FeatureGroup::s: return s;
      case FeatureGroup::t: return t;
    }
    return nullptr;
  }
};

// ---- raw tile kernels -------------------------------------------------------
// Shared by the tensor wrappers below, the naive reference and the scan, so
// all three see identical roundoff.

// out[i*ldo + j] = sum_d (q[i*ldq + d] - kt[d*ldk + j])^2.  `kt` is the key
// tile stored transposed (width x nk), which keeps the inner loop contiguous.
template <typename T>
void sq_dist_tile(const T* q, std::size_t ldq, std::size_t nq, const T* kt, std::size_t ldk, std::size_t nk,
                  std::size_t width, T* out, std::size_t ldo);

// (longitude, latitude) in degrees -> Cartesian unit vector; writes 3 values
// per point, transposed (3 x n, leading dimension ld_out) when `transposed`.
template <typename T>
void lonlat_to_unit(const T* ll, std::size_t ldll, std::size_t n, T* out, std::size_t ld_out, bool transposed);

// Squared great-circle distance (radians^2) between unit vectors qu (nq x 3)
// and kt (3 x nk, leading dimension ldk), via atan2(|u x v|, u . v).
template <typename T>
void geo_dist_sq_tile(const T* qu, std::size_t nq, const T* kt, std::size_t ldk, std::size_t nk, T* out,
                      std::size_t ldo);

// out += sum_f a[f] * exp(-b[f] * d2), elementwise over an nq x nk tile.
template <typename T>
void radial_bias_accumulate(const T* d2, std::size_t ldd, std::size_t nq, std::size_t nk, const T* a, const T* b,
                            std::size_t basis, T* out, std::size_t ldo);

// ---- tensor-level API --------------------------------------------------------

// B_ij = sum_f a_f exp(-b_f |q_i - k_j|^2). b must be positive.
template <typename T>
Tensor<T> rbf_bias_tile(const Tensor<T>& q_loc, const Tensor<T>& k_loc, const Tensor<T>& a, const Tensor<T>& b);

// Same kernel over great-circle distance; inputs are (lon, lat) in degrees.
template <typename T>
Tensor<T> geodesic_bias_tile(const Tensor<T>& q_ll, const Tensor<T>& k_ll, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct RbfTileGrads {
  Tensor<T> a;
  Tensor<T> b;
  Tensor<T> q_loc;
};

// Vector-Jacobian product of rbf_bias_tile for an upstream gradient dB.
template <typename T>
RbfTileGrads<T> rbf_bias_tile_backward(const Tensor<T>& q_loc, const Tensor<T>& k_loc, const Tensor<T>& a,
                                       const Tensor<T>& b, const Tensor<T>& d_bias);

// Pairwise distance term the radial kernel of `kind` consumes (squared
// Euclidean or squared geodesic).
template <typename T>
Tensor<T> pairwise_distance_sq(BiasKind kind, const Tensor<T>& q, const Tensor<T>& k);

// Names of the learnable bias tensors of one layer and group, each [H, F].
std::string bias_param_name(std::size_t layer, FeatureGroup g, std::string_view which);

// Adds a / b_raw entries for every active group of `spec` at `layer`.
template <typename T>
void add_bias_params(ParamStore<T>& store, const BiasSpec& spec, std::size_t layer, std::size_t heads,
                     std::mt19937_64& rng);

// Sum over active groups of the per-group tiles for one (layer, head), with
// b = softplus(b_raw) read from `store`. Groups with kind none cost nothing.
template <typename T>
Tensor<T> compose_bias(const BiasSpec& spec, const ParamStore<T>& store, std::size_t layer, std::size_t head,
                       const FeatureSet<T>& q_feats, const FeatureSet<T>& k_feats);

// Tape op: sum_f a_f exp(-softplus(b_raw_f) * d2) with d2 held constant.
// a and b_raw are [F] or [1, F].
template <typename T>
Var<T> radial_bias(const Tensor<T>& d2, Var<T> a, Var<T> b_raw);

}  // namespace bsatnp
