#include "bsatnp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "bsatnp/kernels.hpp"

namespace bsatnp {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite ") + what + " produced by op '" + op + "' (shape " +
                       shape_string(t.shape()) + ")");
  }
}

// ---- Tape ---------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled();
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::param(ParamStore<T>& store, std::string_view name) {
  const std::size_t i = store.index(name);
  Node n;
  n.op = "param";
  n.value = store.value(i);
  n.requires_grad = grad_enabled();
  n.store = &store;
  n.param_index = i;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
  return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward) {
  check_finite(value, op);
  Node n;
  n.op = op;
  n.value = std::move(value);
  if (grad_enabled()) {
    for (const auto& v : inputs) {
      if (v.tape != this) throw ContractError(std::string("op '") + op + "' mixes values from different tapes");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t node) {
  auto& n = nodes_[node];
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var<T> v) const {
  const auto& n = nodes_.at(v.id);
  if (!n.requires_grad) throw ContractError(std::string("node '") + n.op + "' does not require gradients");
  if (!n.has_grad) throw ContractError(std::string("node '") + n.op + "' received no gradient; call backward() first");
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  const auto& v = value(loss);
  if (v.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(v.shape()));
  }
  Tensor<T> seed(v.shape(), T{1});
  backward(std::span<const Var<T>>(&loss, 1), std::span<const Tensor<T>>(&seed, 1));
}

template <typename T>
void Tape<T>::backward(std::span<const Var<T>> outputs, std::span<const Tensor<T>> seeds) {
  if (!grad_enabled()) throw ContractError("backward() on a tape recorded with gradients disabled");
  if (outputs.size() != seeds.size()) throw ContractError("backward(): one seed per output required");
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<T>();
  }
  std::size_t last = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto id = outputs[i].id;
    require_shape(seeds[i].shape(), nodes_.at(id).value.shape(), "backward seed");
    auto& g = grad_buffer(id);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += seeds[i][j];
    last = std::max(last, id);
  }
  for (std::size_t id = last + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, id);
    for (auto in : n.inputs) {
      if (nodes_[in].has_grad) check_finite(nodes_[in].grad, n.op, "gradient");
    }
  }
  for (auto& n : nodes_) {
    if (n.store != nullptr && n.has_grad) {
      auto& dst = n.store->grad(n.param_index);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }
}

template <typename T>
Var<T> Tape<T>::checkpoint(std::span<const Var<T>> inputs, SegmentFn fn) {
  Tensor<T> out_value;
  {
    Tape<T> inner(GradMode::disabled);
    std::vector<Var<T>> ins;
    ins.reserve(inputs.size());
    for (const auto& v : inputs) ins.push_back(inner.constant(value(v)));
    out_value = inner.value(fn(inner, ins));
  }
  ++checkpoints_;
  return record("checkpoint", std::move(out_value), inputs, [fn](Tape& tape, std::size_t self) {
    const auto& node = tape.nodes_[self];
    Tape<T> inner(GradMode::enabled);
    std::vector<Var<T>> ins;
    ins.reserve(node.inputs.size());
    for (auto in : node.inputs) ins.push_back(inner.leaf(tape.nodes_[in].value, tape.nodes_[in].requires_grad));
    const Var<T> out = fn(inner, ins);
    inner.backward(std::span<const Var<T>>(&out, 1), std::span<const Tensor<T>>(&node.grad, 1));
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (!inner.requires_grad(ins[k]) || !inner.nodes_[ins[k].id].has_grad) continue;
      auto& g = tape.grad_buffer(node.inputs[k]);
      const auto& src = inner.grad(ins[k]);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += src[j];
    }
  });
}

// ---- op helpers -----------------------------------------------------------

namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands live on different tapes");
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T, typename F, typename D>
Var<T> unary(Var<T> x, const char* op, F f, D df) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.tape->record(op, std::move(out), {x}, [df](Tape<T>& tape, std::size_t self) {
    const auto in = tape.input(self, 0);
    if (!tape.needs_grad(in)) return;
    const auto& xv = tape.value_of(in);
    const auto& yv = tape.value_of(self);
    const auto& g = tape.grad_buffer(self);
    auto& gx = tape.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

// ---- ops -------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  gemm<T>(false, false, m, n, k, T{1}, av.data(), k, bv.data(), n, T{0}, out.data(), n);
  return a.tape->record("matmul", std::move(out), {a, b}, [m, n, k](Tape<T>& tape, std::size_t self) {
    const auto ia = tape.input(self, 0), ib = tape.input(self, 1);
    const auto& g = tape.grad_buffer(self);
    if (tape.needs_grad(ia)) {
      gemm<T>(false, true, m, k, n, T{1}, g.data(), n, tape.value_of(ib).data(), n, T{1}, tape.grad_buffer(ia).data(), k);
    }
    if (tape.needs_grad(ib)) {
      gemm<T>(true, false, k, n, m, T{1}, tape.value_of(ia).data(), k, g.data(), n, T{1}, tape.grad_buffer(ib).data(), n);
    }
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul_nt");
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank2(av, "matmul_nt");
  require_rank2(bv, "matmul_nt");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) {
    throw DimensionError("matmul_nt: inner extents differ, " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()) + "^T");
  }
  Tensor<T> out({m, n});
  gemm<T>(false, true, m, n, k, T{1}, av.data(), k, bv.data(), k, T{0}, out.data(), n);
  return a.tape->record("matmul_nt", std::move(out), {a, b}, [m, n, k](Tape<T>& tape, std::size_t self) {
    const auto ia = tape.input(self, 0), ib = tape.input(self, 1);
    const auto& g = tape.grad_buffer(self);
    if (tape.needs_grad(ia)) {
      gemm<T>(false, false, m, k, n, T{1}, g.data(), n, tape.value_of(ib).data(), k, T{1}, tape.grad_buffer(ia).data(), k);
    }
    if (tape.needs_grad(ib)) {
      gemm<T>(true, false, n, k, m, T{1}, g.data(), n, tape.value_of(ia).data(), k, T{1}, tape.grad_buffer(ib).data(), k);
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "add");
  require_shape(b.shape(), a.shape(), "add");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record("add", std::move(out), {a, b}, [](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_buffer(self);
    for (std::size_t k = 0; k < 2; ++k) {
      const auto in = tape.input(self, k);
      if (tape.needs_grad(in)) accumulate(tape.grad_buffer(in), g);
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "sub");
  require_shape(b.shape(), a.shape(), "sub");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape->record("sub", std::move(out), {a, b}, [](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_buffer(self);
    const auto ia = tape.input(self, 0), ib = tape.input(self, 1);
    if (tape.needs_grad(ia)) accumulate(tape.grad_buffer(ia), g);
    if (tape.needs_grad(ib)) {
      auto& gb = tape.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "mul");
  require_shape(b.shape(), a.shape(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record("mul", std::move(out), {a, b}, [](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_buffer(self);
    const auto ia = tape.input(self, 0), ib = tape.input(self, 1);
    const auto& av = tape.value_of(ia);
    const auto& bv = tape.value_of(ib);
    if (tape.needs_grad(ia)) {
      auto& ga = tape.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.needs_grad(ib)) {
      auto& gb = tape.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> add_row(Var<T> x, Var<T> bias) {
  require_same_tape(x, bias, "add_row");
  const auto& xv = x.value();
  const auto& bv = bias.value();
  require_rank2(xv, "add_row");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  if (bv.size() != c || bv.rank() > 2 || (bv.rank() == 2 && bv.dim(0) != 1)) {
    throw DimensionError("add_row: bias of shape " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = xv.row(i);
    T* o = out.row(i);
    for (std::size_t j = 0; j < c; ++j) o[j] = xr[j] + bv[j];
  }
  return x.tape->record("add_row", std::move(out), {x, bias}, [r, c](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_buffer(self);
    const auto ix = tape.input(self, 0), ib = tape.input(self, 1);
    if (tape.needs_grad(ix)) accumulate(tape.grad_buffer(ix), g);
    if (tape.needs_grad(ib)) {
      auto& gb = tape.grad_buffer(ib);
      for (std::size_t i = 0; i < r; ++i) {
        const T* gr = g.row(i);
        for (std::size_t j = 0; j < c; ++j) gb[j] += gr[j];
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return unary<T>(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T offset) {
  return unary<T>(x, "add_scalar", [offset](T v) { return v + offset; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary<T>(
      x, "gelu", [](T v) { return T(0.5) * v * (T{1} + fast_erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T{1} + fast_erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * fast_exp(T(-0.5) * v * v); });
}

template <typename T>
Var<T> softplus(Var<T> x) {
  return unary<T>(x, "softplus", [](T v) { return bsatnp::softplus(v); }, [](T v, T) { return sigmoid(v); });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return unary<T>(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> x) {
  return unary<T>(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary<T>(x, "square", [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  T s{0};
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  return x.tape->record("sum", Tensor<T>::scalar(s), {x}, [](Tape<T>& tape, std::size_t self) {
    const auto in = tape.input(self, 0);
    if (!tape.needs_grad(in)) return;
    const T g = tape.grad_buffer(self)[0];
    auto& gx = tape.grad_buffer(in);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const auto& xv = x.value();
  if (xv.empty()) throw DimensionError("mean: empty tensor");
  const T inv = T{1} / static_cast<T>(xv.size());
  return scale(sum(x), inv);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, T eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, shift, "layer_norm");
  const auto& xv = x.value();
  require_rank2(xv, "layer_norm");
  const std::size_t r = xv.dim(0), d = xv.dim(1);
  if (d == 0) throw DimensionError("layer_norm: feature width must be >= 1");
  require_shape(gain.shape(), Shape{d}, "layer_norm gain");
  require_shape(shift.shape(), Shape{d}, "layer_norm shift");
  const auto& gv = gain.value();
  const auto& sv = shift.value();
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto rstd = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = xv.row(i);
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    T* hr = xhat->row(i);
    T* o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * rs;
      o[j] = hr[j] * gv[j] + sv[j];
    }
  }
  return x.tape->record("layer_norm", std::move(out), {x, gain, shift}, [xhat, rstd, r, d](Tape<T>& tape, std::size_t self) {
    const auto ix = tape.input(self, 0), ig = tape.input(self, 1), is = tape.input(self, 2);
    const auto& g = tape.grad_buffer(self);
    const auto& gv = tape.value_of(ig);
    if (tape.needs_grad(ig) || tape.needs_grad(is)) {
      auto& gg = tape.grad_buffer(ig);
      auto& gs = tape.grad_buffer(is);
      for (std::size_t i = 0; i < r; ++i) {
        const T* gr = g.row(i);
        const T* hr = xhat->row(i);
        for (std::size_t j = 0; j < d; ++j) {
          gg[j] += gr[j] * hr[j];
          gs[j] += gr[j];
        }
      }
    }
    if (tape.needs_grad(ix)) {
      auto& gx = tape.grad_buffer(ix);
      for (std::size_t i = 0; i < r; ++i) {
        const T* gr = g.row(i);
        const T* hr = xhat->row(i);
        T mean_dh{0}, mean_dh_h{0};
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = gr[j] * gv[j];
          mean_dh += dh;
          mean_dh_h += dh * hr[j];
        }
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        T* gxr = gx.row(i);
        const T rs = (*rstd)[i];
        for (std::size_t j = 0; j < d; ++j) gxr[j] += rs * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
      }
    }
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_cols");
    require_rank2(p.value(), "concat_cols");
    if (p.value().dim(0) != r) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor<T> out({r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(pv.row(i), widths[k], out.row(i) + off);
    off += widths[k];
  }
  return parts[0].tape->record("concat_cols", std::move(out), parts, [widths, r, total](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_buffer(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const auto in = tape.input(self, k);
      if (tape.needs_grad(in)) {
        auto& gi = tape.grad_buffer(in);
        for (std::size_t i = 0; i < r; ++i) {
          const T* src = g.data() + i * total + off;
          T* dst = gi.data() + i * widths[k];
          for (std::size_t j = 0; j < widths[k]; ++j) dst[j] += src[j];
        }
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_rows");
    require_rank2(p.value(), "concat_rows");
    if (p.value().dim(1) != c) throw DimensionError("concat_rows: column counts differ");
    counts.push_back(p.value().dim(0));
    total += counts.back();
  }
  Tensor<T> out({total, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off * c);
    off += p.value().dim(0);
  }
  return parts[0].tape->record("concat_rows", std::move(out), parts, [counts, c](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_buffer(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      const auto in = tape.input(self, k);
      if (tape.needs_grad(in)) {
        auto& gi = tape.grad_buffer(in);
        const T* src = g.data() + off * c;
        for (std::size_t j = 0; j < counts[k] * c; ++j) gi[j] += src[j];
      }
      off += counts[k];
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  const auto& xv = x.value();
  require_rank2(xv, "slice_rows");
  if (begin + count > xv.dim(0)) throw DimensionError("slice_rows: range exceeds " + shape_string(xv.shape()));
  const std::size_t c = xv.dim(1);
  Tensor<T> out({count, c});
  std::copy_n(xv.data() + begin * c, count * c, out.data());
  return x.tape->record("slice_rows", std::move(out), {x}, [begin, count, c](Tape<T>& tape, std::size_t self) {
    const auto in = tape.input(self, 0);
    if (!tape.needs_grad(in)) return;
    const auto& g = tape.grad_buffer(self);
    T* dst = tape.grad_buffer(in).data() + begin * c;
    for (std::size_t j = 0; j < count * c; ++j) dst[j] += g[j];
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count) {
  const auto& xv = x.value();
  require_rank2(xv, "slice_cols");
  if (begin + count > xv.dim(1)) throw DimensionError("slice_cols: range exceeds " + shape_string(xv.shape()));
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> out({r, count});
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xv.row(i) + begin, count, out.row(i));
  return x.tape->record("slice_cols", std::move(out), {x}, [begin, count, r, c](Tape<T>& tape, std::size_t self) {
    const auto in = tape.input(self, 0);
    if (!tape.needs_grad(in)) return;
    const auto& g = tape.grad_buffer(self);
    auto& gx = tape.grad_buffer(in);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < count; ++j) gx[i * c + begin + j] += g[i * count + j];
    }
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const auto& xv = x.value();
  require_rank2(xv, "softmax_rows");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  if (c == 0) throw DimensionError("softmax_rows: zero columns");
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = xv.row(i);
    T* o = out.row(i);
    const T m = *std::max_element(xr, xr + c);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(xr[j] - m);
      s += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
  }
  return x.tape->record("softmax_rows", std::move(out), {x}, [r, c](Tape<T>& tape, std::size_t self) {
    const auto in = tape.input(self, 0);
    if (!tape.needs_grad(in)) return;
    const auto& g = tape.grad_buffer(self);
    const auto& y = tape.value_of(self);
    auto& gx = tape.grad_buffer(in);
    for (std::size_t i = 0; i < r; ++i) {
      const T* gr = g.row(i);
      const T* yr = y.row(i);
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      T* gxr = gx.row(i);
      for (std::size_t j = 0; j < c; ++j) gxr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::size_t> indices) {
  const auto& tv = table.value();
  require_rank2(tv, "embedding");
  const std::size_t rows = tv.dim(0), w = tv.dim(1);
  for (auto i : indices) {
    if (i >= rows) throw DimensionError("embedding: index " + std::to_string(i) + " out of range");
  }
  Tensor<T> out({indices.size(), w});
  for (std::size_t i = 0; i < indices.size(); ++i) std::copy_n(tv.row(indices[i]), w, out.row(i));
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.tape->record("embedding", std::move(out), {table}, [idx = std::move(idx), w](Tape<T>& tape, std::size_t self) {
    const auto in = tape.input(self, 0);
    if (!tape.needs_grad(in)) return;
    const auto& g = tape.grad_buffer(self);
    auto& gt = tape.grad_buffer(in);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < w; ++j) gt[idx[i] * w + j] += g[i * w + j];
    }
  });
}

template <typename T>
Var<T> gaussian_nll(Var<T> mu, Var<T> sigma, const Tensor<T>& target, T sigma_floor) {
  require_same_tape(mu, sigma, "gaussian_nll");
  require_shape(sigma.shape(), mu.shape(), "gaussian_nll sigma");
  require_shape(target.shape(), mu.shape(), "gaussian_nll target");
  const auto& mv = mu.value();
  const auto& sv = sigma.value();
  if (mv.empty()) throw DimensionError("gaussian_nll: no predictions");
  const T half_log_2pi = T(0.5) * std::log(T{2} * std::numbers::pi_v<T>);
  T total{0};
  for (std::size_t i = 0; i < mv.size(); ++i) {
    if (!(sv[i] >= sigma_floor)) {
      throw ContractError("gaussian_nll: sigma " + std::to_string(static_cast<double>(sv[i])) + " below floor " +
                          std::to_string(static_cast<double>(sigma_floor)));
    }
    const T z = (target[i] - mv[i]) / sv[i];
    total += half_log_2pi + std::log(sv[i]) + T(0.5) * z * z;
  }
  const T inv_n = T{1} / static_cast<T>(mv.size());
  return mu.tape->record("gaussian_nll", Tensor<T>::scalar(total * inv_n), {mu, sigma},
                         [target, inv_n](Tape<T>& tape, std::size_t self) {
                           const auto im = tape.input(self, 0), is = tape.input(self, 1);
                           const T g = tape.grad_buffer(self)[0] * inv_n;
                           const auto& mv = tape.value_of(im);
                           const auto& sv = tape.value_of(is);
                           if (tape.needs_grad(im)) {
                             auto& gm = tape.grad_buffer(im);
                             for (std::size_t i = 0; i < mv.size(); ++i) {
                               gm[i] += g * (mv[i] - target[i]) / (sv[i] * sv[i]);
                             }
                           }
                           if (tape.needs_grad(is)) {
                             auto& gs = tape.grad_buffer(is);
                             for (std::size_t i = 0; i < mv.size(); ++i) {
                               const T r = target[i] - mv[i];
                               gs[i] += g * (T{1} / sv[i] - r * r / (sv[i] * sv[i] * sv[i]));
                             }
                           }
                         });
}

#define BSATNP_INSTANTIATE_OPS(T)                                                          \
  template class Tape<T>;                                                                  \
  template void check_finite<T>(const Tensor<T>&, const char*, const char*);               \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                               \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                            \
  template Var<T> add<T>(Var<T>, Var<T>);                                                  \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                  \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                  \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                              \
  template Var<T> scale<T>(Var<T>, T);                                                     \
  template Var<T> add_scalar<T>(Var<T>, T);                                                \
  template Var<T> gelu<T>(Var<T>);                                                         \
  template Var<T> softplus<T>(Var<T>);                                                     \
  template Var<T> exp<T>(Var<T>);                                                          \
  template Var<T> log<T>(Var<T>);                                                          \
  template Var<T> square<T>(Var<T>);                                                       \
  template Var<T> sum<T>(Var<T>);                                                          \
  template Var<T> mean<T>(Var<T>);                                                         \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                \
  template Var<T> concat_cols<T>(std::span<const Var<T>>);                                 \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                 \
  template Var<T> slice_rows<T>(Var<T>, std::size_t, std::size_t);                         \
  template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);                         \
  template Var<T> softmax_rows<T>(Var<T>);                                                 \
  template Var<T> embedding<T>(Var<T>, std::span<const std::size_t>);                      \
  template Var<T> gaussian_nll<T>(Var<T>, Var<T>, const Tensor<T>&, T);

BSATNP_INSTANTIATE_OPS(float)
BSATNP_INSTANTIATE_OPS(double)

#undef BSATNP_INSTANTIATE_OPS

}  // namespace bsatnp
