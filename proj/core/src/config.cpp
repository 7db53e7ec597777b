#include "bsatnp/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace bsatnp {

RunConfig RunConfig::paper() {
  RunConfig c;
  c.sync_model_widths();
  return c;
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.profile = "desk";
  c.model = ModelConfig::desk();
  c.train = TrainConfig::desk();
  c.gp = GpTaskConfig::desk();
  c.sir = SirConfig::desk();
  c.sync_model_widths();
  return c;
}

RunConfig RunConfig::for_profile(std::string_view name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  throw ConfigError("unknown profile '" + std::string(name) + "' (expected paper or desk)");
}

void RunConfig::sync_model_widths() {
  model.dx = 0;
  model.dt = 0;
  model.ds = 2;
  model.df = family == TaskFamily::sir ? 3 : 1;
  model.domain = family == TaskFamily::spherical ? SpatialDomain::lonlat : SpatialDomain::euclidean;
  if (family != TaskFamily::sir && family != TaskFamily::spherical) model.ds = gp.ds;
}

void RunConfig::set_family(TaskFamily f) {
  const bool was_sphere = family == TaskFamily::spherical, is_sphere = f == TaskFamily::spherical;
  if (was_sphere != is_sphere) {
    // the two GP families live on different domains; sizes and noise carry over
    const GpTaskConfig d = is_sphere ? GpTaskConfig::spherical() : GpTaskConfig::paper();
    gp.kernel = d.kernel;
    gp.lo = d.lo;
    gp.hi = d.hi;
    gp.ds = d.ds;
  }
  // SIR decays to a lower floor; an explicitly chosen floor is left alone
  constexpr double kGpFloor = 2e-5, kSirFloor = 1e-5;
  if (f == TaskFamily::sir && family != TaskFamily::sir && train.lr_floor == kGpFloor) train.lr_floor = kSirFloor;
  if (f != TaskFamily::sir && family == TaskFamily::sir && train.lr_floor == kSirFloor) train.lr_floor = kGpFloor;
  family = f;
  sync_model_widths();
}

TaskStream RunConfig::stream() const {
  TaskStream s;
  s.family = family;
  s.gp = gp;
  s.sir = sir;
  if (family == TaskFamily::spherical && gp.kernel != GpKernel::exponential_geodesic) {
    // Spherical tasks always use the geodesic kernel on their own box.
    s.gp.kernel = GpKernel::exponential_geodesic;
  }
  s.gp.batch = train.batch;
  s.sir.batch = train.batch;
  s.seed = train.seed;
  return s;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (family == TaskFamily::sir) {
    sir.validate();
  } else {
    gp.validate();
  }
  RunConfig synced = *this;
  synced.sync_model_widths();
  if (synced.model.dx != model.dx || synced.model.ds != model.ds || synced.model.dt != model.dt ||
      synced.model.df != model.df || synced.model.domain != model.domain) {
    throw ConfigError("model feature widths do not match the " + std::string(to_string(family)) + " task family");
  }
}

// ---- value codecs -----------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(std::string_view key, std::string_view text) {
  double v = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + std::string(key) + "' expects a number, got '" + std::string(text) + "'");
  }
  return v;
}

template <typename U>
U parse_uint(std::string_view key, std::string_view text) {
  U v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + std::string(key) + "' expects a non-negative integer, got '" +
                      std::string(text) + "'");
  }
  return v;
}

int parse_int(std::string_view key, std::string_view text) {
  int v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + std::string(key) + "' expects an integer, got '" + std::string(text) + "'");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError("config key '" + std::string(key) + "' expects true or false, got '" + std::string(text) + "'");
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto item = trim(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<std::size_t> parse_widths(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(text)) out.push_back(parse_uint<std::size_t>(key, item));
  if (out.empty()) throw ConfigError("config key '" + std::string(key) + "' expects a comma-separated width list");
  return out;
}

std::string fmt_widths(const std::vector<std::size_t>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
  return s;
}

std::string fmt_groups(const std::array<bool, 3>& g) {
  std::string s;
  for (auto fg : kFeatureGroups) {
    if (g[static_cast<std::size_t>(fg)]) s += (s.empty() ? "" : ",") + std::string(to_string(fg));
  }
  return s.empty() ? "none" : s;
}

std::array<bool, 3> parse_groups(std::string_view text) {
  std::array<bool, 3> g{false, false, false};
  if (trim(text) == "none") return g;
  for (const auto& item : split_list(text)) g[static_cast<std::size_t>(parse_feature_group(item))] = true;
  return g;
}

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename Field>
Key size_key(std::string name, Field field) {
  return {name, [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); },
          [field, name](RunConfig& c, std::string_view v) { field(c) = parse_uint<std::size_t>(name, v); }};
}

template <typename Field>
Key double_key(std::string name, Field field) {
  return {name, [field](const RunConfig& c) { return fmt_double(field(const_cast<RunConfig&>(c))); },
          [field, name](RunConfig& c, std::string_view v) { field(c) = parse_double(name, v); }};
}

template <typename Field>
Key bool_key(std::string name, Field field) {
  return {name, [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [field, name](RunConfig& c, std::string_view v) { field(c) = parse_bool(name, v); }};
}

template <typename Field>
Key widths_key(std::string name, Field field) {
  return {name, [field](const RunConfig& c) { return fmt_widths(field(const_cast<RunConfig&>(c))); },
          [field, name](RunConfig& c, std::string_view v) { field(c) = parse_widths(name, v); }};
}

std::string_view domain_name(SpatialDomain d) { return d == SpatialDomain::lonlat ? "lonlat" : "euclidean"; }

SpatialDomain parse_domain(std::string_view v) {
  if (v == "euclidean") return SpatialDomain::euclidean;
  if (v == "lonlat") return SpatialDomain::lonlat;
  throw ConfigError("unknown spatial domain '" + std::string(v) + "' (expected euclidean or lonlat)");
}

std::string_view kernel_name(GpKernel k) {
  return k == GpKernel::squared_exponential ? "squared_exponential" : "exponential_geodesic";
}

GpKernel parse_kernel(std::string_view v) {
  if (v == "squared_exponential" || v == "se") return GpKernel::squared_exponential;
  if (v == "exponential_geodesic" || v == "geodesic") return GpKernel::exponential_geodesic;
  throw ConfigError("unknown GP kernel '" + std::string(v) + "' (expected squared_exponential or exponential_geodesic)");
}

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back({"profile", [](const RunConfig& c) { return c.profile; },
                 [](RunConfig& c, std::string_view v) { c = RunConfig::for_profile(v); }});
    k.push_back({"task.family", [](const RunConfig& c) { return std::string(to_string(c.family)); },
                 [](RunConfig& c, std::string_view v) {
                   c.set_family(parse_task_family(v));
                 }});

    // model
    k.push_back(size_key("model.layers", [](RunConfig& c) -> auto& { return c.model.layers; }));
    k.push_back(size_key("model.heads", [](RunConfig& c) -> auto& { return c.model.heads; }));
    k.push_back(size_key("model.d_model", [](RunConfig& c) -> auto& { return c.model.d_model; }));
    k.push_back(size_key("model.attn_width", [](RunConfig& c) -> auto& { return c.model.attn_width; }));
    k.push_back(size_key("model.group_width", [](RunConfig& c) -> auto& { return c.model.group_width; }));
    k.push_back(widths_key("model.embed_widths", [](RunConfig& c) -> auto& { return c.model.embed_widths; }));
    k.push_back(widths_key("model.ffn_widths", [](RunConfig& c) -> auto& { return c.model.ffn_widths; }));
    k.push_back(widths_key("model.head_widths", [](RunConfig& c) -> auto& { return c.model.head_widths; }));
    k.push_back({"model.embed_groups", [](const RunConfig& c) { return fmt_groups(c.model.embed_groups); },
                 [](RunConfig& c, std::string_view v) { c.model.embed_groups = parse_groups(v); }});
    for (auto g : kFeatureGroups) {
      const auto gi = static_cast<std::size_t>(g);
      const std::string p = "model.bias." + std::string(to_string(g));
      k.push_back({p, [gi](const RunConfig& c) { return std::string(to_string(c.model.bias.groups[gi].kind)); },
                   [gi](RunConfig& c, std::string_view v) { c.model.bias.groups[gi].kind = parse_bias_kind(v); }});
      k.push_back(size_key(p + ".basis", [gi](RunConfig& c) -> auto& { return c.model.bias.groups[gi].basis; }));
      k.push_back(double_key(p + ".b_init_min", [gi](RunConfig& c) -> auto& { return c.model.bias.groups[gi].b_init_min; }));
      k.push_back(double_key(p + ".b_init_max", [gi](RunConfig& c) -> auto& { return c.model.bias.groups[gi].b_init_max; }));
    }
    k.push_back(size_key("model.dx", [](RunConfig& c) -> auto& { return c.model.dx; }));
    k.push_back(size_key("model.ds", [](RunConfig& c) -> auto& { return c.model.ds; }));
    k.push_back(size_key("model.dt", [](RunConfig& c) -> auto& { return c.model.dt; }));
    k.push_back(size_key("model.df", [](RunConfig& c) -> auto& { return c.model.df; }));
    k.push_back({"model.domain", [](const RunConfig& c) { return std::string(domain_name(c.model.domain)); },
                 [](RunConfig& c, std::string_view v) { c.model.domain = parse_domain(v); }});
    k.push_back(size_key("model.block_q", [](RunConfig& c) -> auto& { return c.model.block_q; }));
    k.push_back(size_key("model.block_k", [](RunConfig& c) -> auto& { return c.model.block_k; }));
    k.push_back({"model.impl",
                 [](const RunConfig& c) { return std::string(c.model.impl == AttentionImpl::scan ? "scan" : "naive"); },
                 [](RunConfig& c, std::string_view v) {
                   if (v == "scan") c.model.impl = AttentionImpl::scan;
                   else if (v == "naive") c.model.impl = AttentionImpl::naive;
                   else throw ConfigError("model.impl expects scan or naive, got '" + std::string(v) + "'");
                 }});
    k.push_back(bool_key("model.checkpoint_blocks", [](RunConfig& c) -> auto& { return c.model.checkpoint_blocks; }));
    k.push_back(bool_key("model.share_ffn", [](RunConfig& c) -> auto& { return c.model.share_ffn; }));
    k.push_back(double_key("model.sigma_floor", [](RunConfig& c) -> auto& { return c.model.sigma_floor; }));

    // train
    k.push_back(size_key("train.steps", [](RunConfig& c) -> auto& { return c.train.steps; }));
    k.push_back(size_key("train.batch", [](RunConfig& c) -> auto& { return c.train.batch; }));
    k.push_back(double_key("train.lr_peak", [](RunConfig& c) -> auto& { return c.train.lr_peak; }));
    k.push_back(double_key("train.lr_floor", [](RunConfig& c) -> auto& { return c.train.lr_floor; }));
    k.push_back(double_key("train.beta1", [](RunConfig& c) -> auto& { return c.train.beta1; }));
    k.push_back(double_key("train.beta2", [](RunConfig& c) -> auto& { return c.train.beta2; }));
    k.push_back(double_key("train.eps", [](RunConfig& c) -> auto& { return c.train.eps; }));
    k.push_back(double_key("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    k.push_back(double_key("train.clip_norm", [](RunConfig& c) -> auto& { return c.train.clip_norm; }));
    k.push_back(size_key("train.validate_every", [](RunConfig& c) -> auto& { return c.train.validate_every; }));
    k.push_back(size_key("train.eval_batches", [](RunConfig& c) -> auto& { return c.train.eval_batches; }));
    k.push_back({"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
                 [](RunConfig& c, std::string_view v) { c.train.seed = parse_uint<std::uint64_t>("train.seed", v); }});
    k.push_back(bool_key("train.deterministic", [](RunConfig& c) -> auto& { return c.train.deterministic; }));

    // gp
    k.push_back({"gp.kernel", [](const RunConfig& c) { return std::string(kernel_name(c.gp.kernel)); },
                 [](RunConfig& c, std::string_view v) { c.gp.kernel = parse_kernel(v); }});
    k.push_back(double_key("gp.lo", [](RunConfig& c) -> auto& { return c.gp.lo; }));
    k.push_back(double_key("gp.hi", [](RunConfig& c) -> auto& { return c.gp.hi; }));
    k.push_back({"gp.ds", [](const RunConfig& c) { return std::to_string(c.gp.ds); },
                 [](RunConfig& c, std::string_view v) {
                   c.gp.ds = parse_uint<std::size_t>("gp.ds", v);
                   c.sync_model_widths();
                 }});
    k.push_back(size_key("gp.n_ctx_min", [](RunConfig& c) -> auto& { return c.gp.n_ctx_min; }));
    k.push_back(size_key("gp.n_ctx_max", [](RunConfig& c) -> auto& { return c.gp.n_ctx_max; }));
    k.push_back(size_key("gp.n_test", [](RunConfig& c) -> auto& { return c.gp.n_test; }));
    k.push_back(double_key("gp.noise_sd", [](RunConfig& c) -> auto& { return c.gp.noise_sd; }));
    k.push_back(double_key("gp.ls_beta_a", [](RunConfig& c) -> auto& { return c.gp.ls_beta_a; }));
    k.push_back(double_key("gp.ls_beta_b", [](RunConfig& c) -> auto& { return c.gp.ls_beta_b; }));
    k.push_back(double_key("gp.ls_ig_a", [](RunConfig& c) -> auto& { return c.gp.ls_ig_a; }));
    k.push_back(double_key("gp.ls_ig_b", [](RunConfig& c) -> auto& { return c.gp.ls_ig_b; }));
    k.push_back(double_key("gp.inner_lo", [](RunConfig& c) -> auto& { return c.gp.inner_lo; }));
    k.push_back(double_key("gp.inner_hi", [](RunConfig& c) -> auto& { return c.gp.inner_hi; }));
    k.push_back(double_key("gp.outer_lo", [](RunConfig& c) -> auto& { return c.gp.outer_lo; }));
    k.push_back(double_key("gp.outer_hi", [](RunConfig& c) -> auto& { return c.gp.outer_hi; }));
    k.push_back(double_key("gp.jitter", [](RunConfig& c) -> auto& { return c.gp.jitter; }));
    k.push_back(double_key("gp.max_jitter", [](RunConfig& c) -> auto& { return c.gp.max_jitter; }));

    // sir
    k.push_back(size_key("sir.grid", [](RunConfig& c) -> auto& { return c.sir.grid; }));
    k.push_back(double_key("sir.lo", [](RunConfig& c) -> auto& { return c.sir.lo; }));
    k.push_back(double_key("sir.hi", [](RunConfig& c) -> auto& { return c.sir.hi; }));
    k.push_back(double_key("sir.beta_a", [](RunConfig& c) -> auto& { return c.sir.beta_a; }));
    k.push_back(double_key("sir.beta_b", [](RunConfig& c) -> auto& { return c.sir.beta_b; }));
    k.push_back(double_key("sir.gamma_a", [](RunConfig& c) -> auto& { return c.sir.gamma_a; }));
    k.push_back(double_key("sir.gamma_b", [](RunConfig& c) -> auto& { return c.sir.gamma_b; }));
    k.push_back({"sir.omega_lo", [](const RunConfig& c) { return std::to_string(c.sir.omega_lo); },
                 [](RunConfig& c, std::string_view v) { c.sir.omega_lo = parse_int("sir.omega_lo", v); }});
    k.push_back({"sir.omega_hi", [](const RunConfig& c) { return std::to_string(c.sir.omega_hi); },
                 [](RunConfig& c, std::string_view v) { c.sir.omega_hi = parse_int("sir.omega_hi", v); }});
    k.push_back(size_key("sir.steps", [](RunConfig& c) -> auto& { return c.sir.steps; }));
    k.push_back(double_key("sir.cutoff", [](RunConfig& c) -> auto& { return c.sir.cutoff; }));
    k.push_back(size_key("sir.n_ctx_min", [](RunConfig& c) -> auto& { return c.sir.n_ctx_min; }));
    k.push_back(size_key("sir.n_ctx_max", [](RunConfig& c) -> auto& { return c.sir.n_ctx_max; }));
    k.push_back(size_key("sir.n_test", [](RunConfig& c) -> auto& { return c.sir.n_test; }));
    return k;
  }();
  return table;
}

const Key& find_key(std::string_view name) {
  const auto& table = key_table();
  auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == name; });
  if (it == table.end()) {
    std::string msg = "unknown config key '" + std::string(name) + "'; valid keys:";
    for (const auto& k : table) msg += "\n  " + k.name;
    throw ConfigError(msg);
  }
  return *it;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : key_table()) out.push_back(k.name);
  return out;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  find_key(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) { return find_key(key).get(cfg); }

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value, got '" + line + "'");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    set_config_value(base, full, std::string_view(line).substr(eq + 1));
  }
  return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string config_to_text(const RunConfig& cfg, std::string_view prefix) {
  std::string out;
  for (const auto& k : key_table()) {
    if (k.name == "profile" && !prefix.empty()) continue;
    if (k.name.compare(0, prefix.size(), prefix) != 0) continue;
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

std::string model_config_to_text(const ModelConfig& model) {
  RunConfig c;
  c.model = model;
  return config_to_text(c, "model.");
}

ModelConfig parse_model_config(std::string_view text) {
  RunConfig c;
  c.model = ModelConfig{};
  std::istringstream in{std::string(text)};
  std::string raw;
  std::string filtered;
  while (std::getline(in, raw)) {
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.rfind("model.", 0) != 0) throw ConfigError("model config text holds a non-model key: '" + line + "'");
    filtered += line + "\n";
  }
  return parse_config(filtered, c).model;
}

// ---- bias variants ----------------------------------------------------------------

void apply_bias_variant(ModelConfig& model, std::string_view variant) {
  auto& sb = model.bias[FeatureGroup::s];
  auto& tb = model.bias[FeatureGroup::t];
  const auto s_index = static_cast<std::size_t>(FeatureGroup::s);
  const std::size_t s_basis = sb.basis ? sb.basis : BiasSpec::defaults()[FeatureGroup::s].basis;
  if (variant == "rbf" || variant == "geodesic") {
    sb.kind = variant == "rbf" ? BiasKind::rbf : BiasKind::geodesic;
    sb.basis = s_basis;
    model.embed_groups[s_index] = false;
  } else if (variant == "embed") {
    sb.kind = BiasKind::none;
    tb.kind = BiasKind::none;
    model.embed_groups[s_index] = true;
  } else {
    throw ConfigError("unknown bias variant '" + std::string(variant) + "' (expected rbf, geodesic or embed)");
  }
}

std::string bias_variant_of(const ModelConfig& model) {
  const auto eff = model.effective_bias();
  const bool embeds_s = model.embeds(FeatureGroup::s);
  const auto s_kind = eff[FeatureGroup::s].active() ? eff[FeatureGroup::s].kind : BiasKind::none;
  bool any_bias = false;
  for (const auto& g : eff.groups) any_bias = any_bias || g.active();
  if (!embeds_s && s_kind == BiasKind::rbf) return "rbf";
  if (!embeds_s && s_kind == BiasKind::geodesic) return "geodesic";
  if (embeds_s && !any_bias) return "embed";
  return "custom";
}

}  // namespace bsatnp
