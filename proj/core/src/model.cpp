#include "bsatnp/model.hpp"

#include <cmath>
#include <random>
#include <string>

namespace bsatnp {

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.layers = 4;
  c.heads = 2;
  c.d_model = 32;
  c.attn_width = 64;
  c.group_width = 16;
  c.embed_widths = {128, 64, 32};
  c.ffn_widths = {128, 32};
  c.head_widths = {128, 32};
  return c;
}

std::size_t ModelConfig::width(FeatureGroup g) const {
  switch (g) {
    case FeatureGroup::x: return dx;
    case FeatureGroup::s: return ds;
    case FeatureGroup::t: return dt;
  }
  return 0;
}

BiasSpec ModelConfig::effective_bias() const {
  BiasSpec out = bias;
  for (auto g : kFeatureGroups) {
    if (width(g) == 0) out[g].kind = BiasKind::none;
  }
  return out;
}

AttentionConfig ModelConfig::attention() const {
  AttentionConfig a;
  a.block_q = block_q;
  a.block_k = block_k;
  a.heads = heads;
  a.head_dim = heads ? attn_width / heads : 0;
  a.value_dim = a.head_dim;
  return a;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (layers == 0) fail("layers must be at least 1");
  if (heads == 0 || attn_width == 0 || attn_width % heads != 0) fail("attention width must be a positive multiple of heads");
  if (d_model == 0 || group_width == 0) fail("d_model and group_width must be positive");
  if (embed_widths.empty() || embed_widths.back() != d_model) fail("embed widths must end at d_model");
  if (ffn_widths.empty() || ffn_widths.back() != d_model) fail("ffn widths must end at d_model");
  for (auto w : embed_widths) if (w == 0) fail("zero embed width");
  for (auto w : ffn_widths) if (w == 0) fail("zero ffn width");
  for (auto w : head_widths) if (w == 0) fail("zero head width");
  if (df == 0) fail("df must be at least 1");
  if (!(sigma_floor > 0.0)) fail("sigma_floor must be positive");
  if (block_q == 0 || block_k == 0) fail("block sizes must be positive");
  if (domain == SpatialDomain::lonlat && ds != 2) fail("(lon, lat) domain needs ds = 2");
  const BiasSpec eff = effective_bias();
  for (auto g : eff.active_groups()) {
    if (eff[g].kind == BiasKind::geodesic && width(g) != 2) {
      fail("geodesic bias on group " + std::string(to_string(g)) + " needs (lon, lat) coordinates");
    }
  }
  attention().validate();
}

// ---- parameters -------------------------------------------------------------

namespace {

template <typename T>
void add_linear(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> w({in, out});
  for (auto& v : w.values()) v = static_cast<T>(u(rng));
  store.add(prefix + ".w", std::move(w));
  store.add(prefix + ".b", Tensor<T>({out}));
}

template <typename T>
void add_norm(ParamStore<T>& store, const std::string& prefix, std::size_t width) {
  store.add(prefix + ".g", Tensor<T>({width}, T{1}));
  store.add(prefix + ".b", Tensor<T>({width}));
}

template <typename T>
void add_mlp(ParamStore<T>& store, const std::string& prefix, std::size_t in, const std::vector<std::size_t>& widths,
             std::mt19937_64& rng) {
  for (std::size_t i = 0; i < widths.size(); ++i) {
    add_linear(store, prefix + "." + std::to_string(i), in, widths[i], rng);
    in = widths[i];
  }
}

std::string block_prefix(std::size_t layer) { return "krblock." + std::to_string(layer); }

std::size_t embed_input_width(const ModelConfig& cfg) {
  std::size_t groups = 2;  // obs and f
  for (auto g : kFeatureGroups) {
    if (cfg.embeds(g) && cfg.width(g) > 0) ++groups;
  }
  return groups * cfg.group_width;
}

}  // namespace

template <typename T>
void init_params(ParamStore<T>& store, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor<T> table({2, cfg.group_width});
    for (auto& v : table.values()) v = static_cast<T>(u(rng));
    store.add("embed.obs.table", std::move(table));
  }
  add_linear(store, "embed.f", cfg.df, cfg.group_width, rng);
  for (auto g : kFeatureGroups) {
    if (cfg.embeds(g) && cfg.width(g) > 0) {
      add_linear(store, "embed." + std::string(to_string(g)), cfg.width(g), cfg.group_width, rng);
    }
  }
  add_mlp(store, "embed.mlp", embed_input_width(cfg), cfg.embed_widths, rng);

  const BiasSpec eff = cfg.effective_bias();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = block_prefix(l);
    add_norm(store, p + ".ln1", cfg.d_model);
    add_linear(store, p + ".attn.q", cfg.d_model, cfg.attn_width, rng);
    add_linear(store, p + ".attn.k", cfg.d_model, cfg.attn_width, rng);
    add_linear(store, p + ".attn.v", cfg.d_model, cfg.attn_width, rng);
    add_linear(store, p + ".attn.o", cfg.attn_width, cfg.d_model, rng);
    add_norm(store, p + ".ln2", cfg.d_model);
    add_mlp(store, p + ".ffn", cfg.d_model, cfg.ffn_widths, rng);
    if (!cfg.share_ffn) add_mlp(store, p + ".ffn_test", cfg.d_model, cfg.ffn_widths, rng);
    add_bias_params(store, eff, l, cfg.heads, rng);
  }

  add_norm(store, "head.ln", cfg.d_model);
  std::vector<std::size_t> widths = cfg.head_widths;
  widths.push_back(2 * cfg.df);
  add_mlp(store, "head.mlp", cfg.d_model, widths, rng);
}

std::size_t parameter_count(const ModelConfig& cfg) { return init_params<float>(cfg, 0).parameter_count(); }

// ---- stream layout ------------------------------------------------------------

std::vector<Segment> StreamLayout::segments() const {
  std::vector<Segment> segs;
  for (std::size_t b = 0; b < ctx_count.size(); ++b) segs.push_back({ctx_offset[b], ctx_count[b], ctx_offset[b], ctx_count[b]});
  for (std::size_t b = 0; b < test_count.size(); ++b) {
    segs.push_back({n_ctx + test_offset[b], test_count[b], ctx_offset[b], ctx_count[b]});
  }
  return segs;
}

template <typename T>
StreamLayout make_layout(const TaskBatch<T>& batch) {
  StreamLayout l;
  for (const auto& task : batch.tasks) {
    l.ctx_offset.push_back(l.n_ctx);
    l.ctx_count.push_back(task.ctx.size());
    l.n_ctx += task.ctx.size();
    l.test_offset.push_back(l.n_test);
    l.test_count.push_back(task.test.size());
    l.n_test += task.test.size();
  }
  return l;
}

namespace {

template <typename T>
const Tensor<T>& group_of(const PointSet<T>& p, FeatureGroup g) {
  switch (g) {
    case FeatureGroup::x: return p.x;
    case FeatureGroup::s: return p.s;
    case FeatureGroup::t: return p.t;
  }
  return p.x;
}

template <typename T>
void copy_rows(const Tensor<T>& src, Tensor<T>& dst, std::size_t row) {
  std::copy(src.values().begin(), src.values().end(), dst.data() + row * dst.cols());
}

}  // namespace

template <typename T>
StreamInputs<T> make_stream(const TaskBatch<T>& batch, const ModelConfig& cfg) {
  batch.validate();
  const auto& first = batch.tasks.front();
  if (first.dx() != cfg.dx || first.ds() != cfg.ds || first.dt() != cfg.dt || first.df() != cfg.df) {
    throw ConfigError("task widths (dx " + std::to_string(first.dx()) + ", ds " + std::to_string(first.ds()) + ", dt " +
                      std::to_string(first.dt()) + ", df " + std::to_string(first.df()) +
                      ") do not match the model config (dx " + std::to_string(cfg.dx) + ", ds " +
                      std::to_string(cfg.ds) + ", dt " + std::to_string(cfg.dt) + ", df " + std::to_string(cfg.df) + ")");
  }
  if (first.domain != cfg.domain) throw ConfigError("task spatial domain does not match the model config");

  StreamInputs<T> in;
  in.layout = make_layout(batch);
  const auto& L = in.layout;
  const std::size_t rows = L.rows();
  in.obs.assign(rows, 0);
  std::fill(in.obs.begin(), in.obs.begin() + static_cast<std::ptrdiff_t>(L.n_ctx), std::size_t{1});
  in.f_in = Tensor<T>({rows, cfg.df});
  in.test_f = Tensor<T>({L.n_test, cfg.df});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    copy_rows(batch.tasks[b].ctx.f, in.f_in, L.ctx_offset[b]);
    copy_rows(batch.tasks[b].test.f, in.test_f, L.test_offset[b]);
  }
  for (auto g : kFeatureGroups) {
    const std::size_t w = cfg.width(g);
    auto all = std::make_shared<Tensor<T>>(Shape{rows, w});
    auto ctx = std::make_shared<Tensor<T>>(Shape{L.n_ctx, w});
    if (w > 0) {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        copy_rows(group_of(batch.tasks[b].ctx, g), *all, L.ctx_offset[b]);
        copy_rows(group_of(batch.tasks[b].ctx, g), *ctx, L.ctx_offset[b]);
        copy_rows(group_of(batch.tasks[b].test, g), *all, L.n_ctx + L.test_offset[b]);
      }
    }
    in.feats[static_cast<std::size_t>(g)] = std::move(all);
    in.ctx_feats[static_cast<std::size_t>(g)] = std::move(ctx);
  }
  return in;
}

// ---- network ------------------------------------------------------------------

namespace {

template <typename T>
Var<T> mlp(Tape<T>& tape, ParamStore<T>& store, const std::string& prefix, std::size_t depth, Var<T> h,
           bool act_last) {
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string p = prefix + "." + std::to_string(i);
    h = linear(h, tape.param(store, p + ".w"), tape.param(store, p + ".b"));
    if (i + 1 < depth || act_last) h = gelu(h);
  }
  return h;
}

// MLP over parameter handles laid out as w0, b0, w1, b1, ...
template <typename T>
Var<T> mlp(std::span<const Var<T>> p, Var<T> h) {
  const std::size_t depth = p.size() / 2;
  for (std::size_t i = 0; i < depth; ++i) {
    h = linear(h, p[2 * i], p[2 * i + 1]);
    if (i + 1 < depth) h = gelu(h);
  }
  return h;
}

// Handles of one block's parameters in the order block_body consumes them.
std::vector<std::string> block_param_names(const ModelConfig& cfg, std::size_t layer) {
  const std::string p = block_prefix(layer);
  std::vector<std::string> names{p + ".ln1.g",    p + ".ln1.b",    p + ".attn.q.w", p + ".attn.q.b",
                                 p + ".attn.k.w", p + ".attn.k.b", p + ".attn.v.w", p + ".attn.v.b",
                                 p + ".attn.o.w", p + ".attn.o.b", p + ".ln2.g",    p + ".ln2.b"};
  auto add_mlp_names = [&](const std::string& prefix) {
    for (std::size_t i = 0; i < cfg.ffn_widths.size(); ++i) {
      names.push_back(prefix + "." + std::to_string(i) + ".w");
      names.push_back(prefix + "." + std::to_string(i) + ".b");
    }
  };
  add_mlp_names(p + ".ffn");
  if (!cfg.share_ffn) add_mlp_names(p + ".ffn_test");
  for (auto g : cfg.effective_bias().active_groups()) {
    names.push_back(bias_param_name(layer, g, "a"));
    names.push_back(bias_param_name(layer, g, "b_raw"));
  }
  return names;
}

template <typename T>
Var<T> block_body(const ModelConfig& cfg, const StreamInputs<T>& in, Var<T> e, std::span<const Var<T>> p) {
  const auto& L = in.layout;
  const std::size_t nf = cfg.ffn_widths.size() * 2;

  std::vector<AttentionBias<T>> bias;
  std::size_t k = 12 + nf * (cfg.share_ffn ? 1 : 2);
  const BiasSpec eff = cfg.effective_bias();
  for (auto g : eff.active_groups()) {
    const auto gi = static_cast<std::size_t>(g);
    bias.push_back({eff[g].kind, in.feats[gi], in.ctx_feats[gi], p[k], p[k + 1]});
    k += 2;
  }

  const Var<T> h = layer_norm(e, p[0], p[1]);
  const Var<T> kv = slice_rows(h, 0, L.n_ctx);
  const AttentionParams<T> ap{p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]};
  const Var<T> att = multi_head_attention(h, kv, ap, std::span<const AttentionBias<T>>(bias), L.segments(),
                                          cfg.attention(), cfg.impl);
  e = add(e, att);

  const Var<T> h2 = layer_norm(e, p[10], p[11]);
  Var<T> ff;
  if (cfg.share_ffn) {
    ff = mlp(p.subspan(12, nf), h2);
  } else {
    const Var<T> parts[2] = {mlp(p.subspan(12, nf), slice_rows(h2, 0, L.n_ctx)),
                             mlp(p.subspan(12 + nf, nf), slice_rows(h2, L.n_ctx, L.n_test))};
    ff = concat_rows(std::span<const Var<T>>(parts));
  }
  return add(e, ff);
}

}  // namespace

template <typename T>
Var<T> embed(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, const StreamInputs<T>& in) {
  std::vector<Var<T>> parts;
  parts.push_back(embedding(tape.param(store, "embed.obs.table"), std::span<const std::size_t>(in.obs)));
  parts.push_back(linear(tape.constant(in.f_in), tape.param(store, "embed.f.w"), tape.param(store, "embed.f.b")));
  for (auto g : kFeatureGroups) {
    if (!cfg.embeds(g) || cfg.width(g) == 0) continue;
    const std::string p = "embed." + std::string(to_string(g));
    parts.push_back(linear(tape.constant(*in.feats[static_cast<std::size_t>(g)]), tape.param(store, p + ".w"),
                           tape.param(store, p + ".b")));
  }
  const Var<T> cat = concat_cols(std::span<const Var<T>>(parts));
  return mlp(tape, store, "embed.mlp", cfg.embed_widths.size(), cat, false);
}

template <typename T>
Var<T> krblock(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, std::size_t layer, Var<T> e,
               const StreamInputs<T>& in) {
  std::vector<Var<T>> vars{e};
  for (const auto& name : block_param_names(cfg, layer)) vars.push_back(tape.param(store, name));
  try {
    if (cfg.checkpoint_blocks && tape.grad_enabled()) {
      // The segment is replayed during backward, after the caller's inputs are gone.
      auto owned = std::make_shared<const StreamInputs<T>>(in);
      return tape.checkpoint(std::span<const Var<T>>(vars), [cfg, owned](Tape<T>&, std::span<const Var<T>> ins) {
        return block_body(cfg, *owned, ins[0], ins.subspan(1));
      });
    }
    return block_body(cfg, in, e, std::span<const Var<T>>(vars).subspan(1));
  } catch (const NumericError& err) {
    throw NumericError("krblock " + std::to_string(layer) + ": " + err.what());
  }
}

template <typename T>
ForwardGraph<T> build_forward(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, const StreamInputs<T>& in) {
  Var<T> e = embed(tape, store, cfg, in);
  for (std::size_t l = 0; l < cfg.layers; ++l) e = krblock(tape, store, cfg, l, e, in);
  const Var<T> test = slice_rows(e, in.layout.n_ctx, in.layout.n_test);
  Var<T> h = layer_norm(test, tape.param(store, "head.ln.g"), tape.param(store, "head.ln.b"));
  h = mlp(tape, store, "head.mlp", cfg.head_widths.size() + 1, h, false);
  ForwardGraph<T> out;
  out.mu = slice_cols(h, 0, cfg.df);
  out.sigma = add_scalar(softplus(slice_cols(h, cfg.df, cfg.df)), static_cast<T>(cfg.sigma_floor));
  out.layout = in.layout;
  return out;
}

template <typename T>
Var<T> build_loss(Tape<T>& tape, ParamStore<T>& store, const ModelConfig& cfg, const TaskBatch<T>& batch) {
  const StreamInputs<T> in = make_stream(batch, cfg);
  const ForwardGraph<T> g = build_forward(tape, store, cfg, in);
  // Rounding can land softplus(x) + floor a hair under the floor in float.
  return gaussian_nll(g.mu, g.sigma, in.test_f, static_cast<T>(cfg.sigma_floor * 0.999));
}

template <typename T>
std::vector<PredictiveOutput<T>> predict(const ParamStore<T>& store, const ModelConfig& cfg,
                                         const TaskBatch<T>& batch) {
  Tape<T> tape(GradMode::disabled);
  // Inference tapes copy parameter values and never write gradients back.
  auto& mutable_store = const_cast<ParamStore<T>&>(store);
  const StreamInputs<T> in = make_stream(batch, cfg);
  const ForwardGraph<T> g = build_forward(tape, mutable_store, cfg, in);
  const auto& mu = g.mu.value();
  const auto& sigma = g.sigma.value();
  std::vector<PredictiveOutput<T>> out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t off = in.layout.test_offset[b] * cfg.df;
    const std::size_t n = in.layout.test_count[b] * cfg.df;
    out.push_back({Tensor<T>({in.layout.test_count[b], cfg.df}, std::span<const T>(mu.data() + off, n)),
                   Tensor<T>({in.layout.test_count[b], cfg.df}, std::span<const T>(sigma.data() + off, n))});
  }
  return out;
}

template <typename T>
PredictiveOutput<T> predict(const ParamStore<T>& store, const ModelConfig& cfg, const Task<T>& task) {
  TaskBatch<T> batch;
  batch.tasks.push_back(task);
  return predict(store, cfg, batch).front();
}

#define BSATNP_INSTANTIATE_MODEL(T)                                                                              \
  template void init_params<T>(ParamStore<T>&, const ModelConfig&, std::uint64_t);                               \
  template StreamLayout make_layout<T>(const TaskBatch<T>&);                                                     \
  template StreamInputs<T> make_stream<T>(const TaskBatch<T>&, const ModelConfig&);                              \
  template Var<T> embed<T>(Tape<T>&, ParamStore<T>&, const ModelConfig&, const StreamInputs<T>&);                \
  template Var<T> krblock<T>(Tape<T>&, ParamStore<T>&, const ModelConfig&, std::size_t, Var<T>,                  \
                             const StreamInputs<T>&);                                                            \
  template ForwardGraph<T> build_forward<T>(Tape<T>&, ParamStore<T>&, const ModelConfig&, const StreamInputs<T>&); \
  template Var<T> build_loss<T>(Tape<T>&, ParamStore<T>&, const ModelConfig&, const TaskBatch<T>&);              \
  template std::vector<PredictiveOutput<T>> predict<T>(const ParamStore<T>&, const ModelConfig&,                 \
                                                       const TaskBatch<T>&);                                     \
  template PredictiveOutput<T> predict<T>(const ParamStore<T>&, const ModelConfig&, const Task<T>&);

BSATNP_INSTANTIATE_MODEL(float)
BSATNP_INSTANTIATE_MODEL(double)

#undef BSATNP_INSTANTIATE_MODEL

}  // namespace bsatnp
