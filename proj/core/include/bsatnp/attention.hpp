#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "bsatnp/autodiff.hpp"
#include "bsatnp/bias.hpp"
#include "bsatnp/memory.hpp"
#include "bsatnp/tensor.hpp"

namespace bsatnp {

// Tile extents and head layout. Q and K carry heads side by side in their
// columns: [n, heads * head_dim]; V likewise with value_dim.
struct AttentionConfig {
  std::size_t block_q = 64;
  std::size_t block_k = 64;
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  std::size_t value_dim = 0;

  void validate() const;
  bool operator==(const AttentionConfig&) const = default;
};

// Query rows [q_begin, q_begin + q_count) attend to key rows
// [k_begin, k_begin + k_count). A batch of tasks is one problem with one or
// more segments per task.
struct Segment {
  std::size_t q_begin = 0;
  std::size_t q_count = 0;
  std::size_t k_begin = 0;
  std::size_t k_count = 0;
};

// One additive bias term evaluated tile by tile from raw coordinates. Feature
// rows line up with Q rows (q_feat) and K rows (k_feat). a and b are [heads,
// basis] row-major; b already positive.
template <typename T>
struct BiasTerm {
  BiasKind kind = BiasKind::rbf;
  const T* q_feat = nullptr;
  std::size_t q_ld = 0;
  const T* k_feat = nullptr;
  std::size_t k_ld = 0;
  std::size_t width = 0;
  const T* a = nullptr;
  const T* b = nullptr;
  std::size_t basis = 0;
};

template <typename T>
struct ScanProblem {
  const T* q = nullptr;
  const T* k = nullptr;
  const T* v = nullptr;
  std::size_t nq = 0;
  std::size_t nk = 0;
  // Empty means a single segment covering all rows.
  std::vector<Segment> segments;
  std::vector<BiasTerm<T>> bias;
};

// Running (m, ell, O~) of the online softmax for a block of query rows.
template <typename T>
struct ScanState {
  std::size_t rows = 0;
  std::size_t dv = 0;
  bool started = false;
  Buffer<T> m;
  Buffer<T> ell;
  Buffer<T> o_tilde;

  void reset(std::size_t rows_, std::size_t dv_);
};

// Folds one tile of scores (rows x nk, leading dimension lds) into the
// state. Overwrites the scores with the unnormalized weights exp(x - m).
template <typename T>
void scan_update(ScanState<T>& state, T* scores, std::size_t lds, std::size_t nk, const T* v, std::size_t ldv);

// out[r, :] = O~[r, :] / ell[r]
template <typename T>
void scan_finalize(const ScanState<T>& state, T* out, std::size_t ldo);

// Final row statistics kept for the backward pass, [heads, nq].
template <typename T>
struct ScanStats {
  Tensor<T> m;
  Tensor<T> ell;
};

// Reference: softmax(Q K^T / sqrt(de) + bias) V with the full score matrix.
template <typename T>
Tensor<T> naive_biased_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias);

// Tiled scan. `out` is nq x (heads * value_dim); `stats` may be null.
// Scratch is O(block_q * block_k + heads * block_q * value_dim) independent of
// the key count.
template <typename T>
void bsa_forward_into(const ScanProblem<T>& problem, const AttentionConfig& cfg, T* out, ScanStats<T>* stats);

template <typename T>
Tensor<T> bsa_forward(const ScanProblem<T>& problem, const AttentionConfig& cfg, ScanStats<T>* stats = nullptr);

template <typename T>
struct ScanGrads {
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> v;
  // Per bias term, [heads, basis]; db is with respect to the positive rate b.
  std::vector<Tensor<T>> a;
  std::vector<Tensor<T>> b;

  static ScanGrads zeros(const ScanProblem<T>& problem, const AttentionConfig& cfg);
};

// Recomputes every tile from the inputs and the saved row statistics and
// accumulates gradients into `grads` (which must come from ScanGrads::zeros).
template <typename T>
void bsa_backward_into(const ScanProblem<T>& problem, const AttentionConfig& cfg, const T* out,
                       const ScanStats<T>& stats, const T* d_out, ScanGrads<T>& grads);

template <typename T>
ScanGrads<T> bsa_backward(const ScanProblem<T>& problem, const AttentionConfig& cfg, const Tensor<T>& out,
                          const ScanStats<T>& stats, const Tensor<T>& d_out);

// Effective bias terms of one layer read from a ParamStore (b = softplus of
// the stored raw rates). Keeps the positive rates alive next to the terms.
template <typename T>
struct BiasBinding {
  std::vector<BiasTerm<T>> terms;
  std::vector<Tensor<T>> rates;
};

template <typename T>
BiasBinding<T> bind_bias(const BiasSpec& spec, const ParamStore<T>& store, std::size_t layer,
                         const FeatureSet<T>& q_feats, const FeatureSet<T>& k_feats, std::size_t heads);

// Tensor-level entry: Q [nq, H*de], K [nk, H*de], V [nk, H*dv].
template <typename T>
Tensor<T> bsa_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const FeatureSet<T>& q_feats,
                      const FeatureSet<T>& k_feats, const BiasSpec& spec, const ParamStore<T>& store,
                      std::size_t layer, const AttentionConfig& cfg);

// ---- tape integration ------------------------------------------------------------

// Bias group input to the attention ops: coordinates are constants, the
// amplitudes a [H, F] and raw rates b_raw [H, F] are differentiable.
template <typename T>
struct AttentionBias {
  BiasKind kind = BiasKind::rbf;
  std::shared_ptr<const Tensor<T>> q_feat;
  std::shared_ptr<const Tensor<T>> k_feat;
  Var<T> a;
  Var<T> b_raw;
};

// Scan attention as a single tape node; backward is bsa_backward.
template <typename T>
Var<T> scan_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const AttentionBias<T>> bias,
                      std::vector<Segment> segments, const AttentionConfig& cfg);

// Same function composed from ordinary tape ops with materialized scores.
// Segments must partition the query rows in order. Used as a gradient oracle.
template <typename T>
Var<T> naive_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const AttentionBias<T>> bias,
                       std::vector<Segment> segments, const AttentionConfig& cfg);

template <typename T>
struct AttentionParams {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

enum class AttentionImpl { scan, naive };

// Projects e_q to queries and e_kv to keys/values, attends per head, and
// applies the output projection. Result is [rows(e_q), d_model].
template <typename T>
Var<T> multi_head_attention(Var<T> e_q, Var<T> e_kv, const AttentionParams<T>& params,
                            std::span<const AttentionBias<T>> bias, std::vector<Segment> segments,
                            const AttentionConfig& cfg, AttentionImpl impl = AttentionImpl::scan);

}  // namespace bsatnp
