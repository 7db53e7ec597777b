#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bsatnp/attention.hpp"
#include "bsatnp/autodiff.hpp"
#include "bsatnp/bias.hpp"
#include "bsatnp/param_store.hpp"
#include "bsatnp/task.hpp"

namespace bsatnp {

struct ModelConfig {
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t attn_width = 128;  // all heads together
  std::size_t group_width = 32;  // per-group encoder output
  std::vector<std::size_t> embed_widths{256, 128, 64};
  std::vector<std::size_t> ffn_widths{256, 64};
  std::vector<std::size_t> head_widths{256, 64};  // followed by the 2*df output layer
  BiasSpec bias = BiasSpec::defaults();
  // Which of {x, s, t} feed the embedder; obs and f always do.
  std::array<bool, 3> embed_groups{true, false, false};
  std::size_t dx = 0;
  std::size_t ds = 2;
  std::size_t dt = 0;
  std::size_t df = 1;
  SpatialDomain domain = SpatialDomain::euclidean;
  std::size_t block_q = 64;
  std::size_t block_k = 64;
  AttentionImpl impl = AttentionImpl::scan;
  bool checkpoint_blocks = false;
  bool share_ffn = true;
  double sigma_floor = 1e-3;

  static ModelConfig paper();
  static ModelConfig desk();

  bool embeds(FeatureGroup g) const { return embed_groups[static_cast<std::size_t>(g)]; }
  std::size_t width(FeatureGroup g) const;
  // Bias spec with groups of zero width switched off.
  BiasSpec effective_bias() const;
  AttentionConfig attention() const;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct PredictiveOutput {
  Tensor<T> mu;     // [n_t, df]
  Tensor<T> sigma;  // [n_t, df], >= sigma floor
};

template <typename T>
void init_params(ParamStore<T>& store, const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore<T> store;
  init_params(store, cfg, seed);
  return store;
}

std::size_t parameter_count(const ModelConfig& cfg);

// Row layout of a batch on the tape: every task's context rows first, then
// every task's test rows.
struct StreamLayout {
  std::vector<std::size_t> ctx_offset;
  std::vector<std::size_t> ctx_count;
  std::vector<std::size_t> test_offset;  // relative to the start of the test block
  std::vector<std::size_t> test_count;
  std::size_t n_ctx = 0;
  std::size_t n_test = 0;

  std::size_t rows() const { return n_ctx + n_test; }
  // Context self-attention per task followed by test-to-context cross-attention per task.
  std::vector<Segment> segments() const;
};

template <typename T>
StreamLayout make_layout(const TaskBatch<T>& batch);

// Stacked inputs of a batch in stream order. Test f is zeroed here.
template <typename T>
struct StreamInputs {
  StreamLayout layout;
  std::vector<std::size_t> obs;
  Tensor<T> f_in;
  std::array<std::shared_ptr<const Tensor<T>>, 3> feats;      // all rows
  std::array<std::shared_ptr<const Tensor<T>>, 3> ctx_feats;  // context rows
  Tensor<T> test_f;                                           // targets
};

template <typename T>
StreamInputs<T> make_stream(const TaskBatch<T>& batch, const ModelConfig& cfg);

// Token embeddings for every stream row, [rows, d_model].
template <typename T>
Var<T> embed(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, const StreamInputs<T>& in);

// One KRBlock over the whole stream; feature tensors are read, never written.
template <typename T>
Var<T> krblock(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, std::size_t layer, Var<T> e,
               const StreamInputs<T>& in);

template <typename T>
struct ForwardGraph {
  Var<T> mu;     // [n_test total, df]
  Var<T> sigma;
  StreamLayout layout;
};

template <typename T>
ForwardGraph<T> build_forward(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, const StreamInputs<T>& in);

// Mean Gaussian NLL over every test point of the batch.
template <typename T>
Var<T> build_loss(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, const TaskBatch<T>& batch);

// Inference without gradient bookkeeping; one output per task.
template <typename T>
std::vector<PredictiveOutput<T>> predict(const ParamStore<T>& store, const ModelConfig& cfg, const TaskBatch<T>& batch);

template <typename T>
PredictiveOutput<T> predict(const ParamStore<T>& store, const ModelConfig& cfg, const Task<T>& task);

}  // namespace bsatnp
