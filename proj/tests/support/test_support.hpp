#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>

#include "bsatnp/autodiff.hpp"
#include "bsatnp/param_store.hpp"
#include "bsatnp/tensor.hpp"

namespace bsatnp::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(u(rng));
  return t;
}

struct GradCheck {
  std::size_t coordinates = 0;
  std::size_t passed = 0;
  double worst = 0.0;

  double pass_fraction() const { return coordinates ? static_cast<double>(passed) / coordinates : 1.0; }
};

// Relative error with a small floor so coordinates whose true gradient is
// ~0 are judged on an absolute 1e-3 * tol scale.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

// Compares tape gradients of every parameter in `store` with central
// differences of the scalar returned by `build`.
inline GradCheck check_param_gradients(
    ParamStore<double>& store, const std::function<Var<double>(Tape<double>&, ParamStore<double>&)>& build,
    double tol = 1e-4, double h = 1e-4) {
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(build(tape, store));
  }
  auto eval = [&] {
    Tape<double> tape(GradMode::disabled);
    return build(tape, store).value().item();
  };
  GradCheck out;
  for (std::size_t p = 0; p < store.size(); ++p) {
    auto& value = store.value(p);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = eval();
      value[i] = saved - h;
      const double down = eval();
      value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(store.grad(p)[i], numeric);
      out.coordinates += 1;
      out.passed += err <= tol ? 1 : 0;
      out.worst = std::max(out.worst, err);
    }
  }
  return out;
}

}  // namespace bsatnp::testing
