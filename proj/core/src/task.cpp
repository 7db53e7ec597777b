#include "bsatnp/task.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <string>

namespace bsatnp {

template <typename T>
PointSet<T> PointSet<T>::zeros(std::size_t n, std::size_t dx, std::size_t ds, std::size_t dt, std::size_t df,
                               bool observed) {
  PointSet p;
  p.obs.assign(n, observed ? 1 : 0);
  p.x = Tensor<T>({n, dx});
  p.s = Tensor<T>({n, ds});
  p.t = Tensor<T>({n, dt});
  p.f = Tensor<T>({n, df});
  return p;
}

namespace {

template <typename T>
void check_side(const PointSet<T>& p, const char* side, std::uint8_t flag) {
  const std::size_t n = p.size();
  if (n == 0) throw ContractError(std::string("task has no ") + side + " points");
  for (auto* t : {&p.x, &p.s, &p.t, &p.f}) {
    if (t->rank() != 2 || t->dim(0) != n) {
      throw DimensionError(std::string("task ") + side + " feature of shape " + shape_string(t->shape()) +
                           " does not have " + std::to_string(n) + " rows");
    }
    if (!t->all_finite()) throw NumericError(std::string("task ") + side + " holds non-finite values");
  }
  for (auto o : p.obs) {
    if (o != flag) throw ContractError(std::string("task ") + side + " points carry the wrong observation flag");
  }
}

}  // namespace

template <typename T>
void Task<T>::validate() const {
  check_side(ctx, "context", 1);
  check_side(test, "test", 0);
  if (ctx.x.cols() != test.x.cols() || ctx.s.cols() != test.s.cols() || ctx.t.cols() != test.t.cols() ||
      ctx.f.cols() != test.f.cols()) {
    throw DimensionError("context and test feature widths differ");
  }
  if (df() == 0) throw DimensionError("task needs at least one output dimension");
  if (domain == SpatialDomain::lonlat && ds() != 2) throw DimensionError("(lon, lat) tasks need two spatial columns");
}

template <typename T>
void TaskBatch<T>::validate() const {
  if (tasks.empty()) throw ContractError("empty task batch");
  for (const auto& t : tasks) {
    t.validate();
    const auto& a = tasks.front();
    if (t.dx() != a.dx() || t.ds() != a.ds() || t.dt() != a.dt() || t.df() != a.df() || t.domain != a.domain) {
      throw DimensionError("tasks in one batch must share feature widths");
    }
  }
}

// ---- rotations ----------------------------------------------------------------

namespace {

Rotation multiply(const Rotation& a, const Rotation& b) {
  Rotation c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return c;
}

Rotation axis_rotation(char axis, double degrees) {
  const double r = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(r), s = std::sin(r);
  switch (axis) {
    case 'x': return {1, 0, 0, 0, c, -s, 0, s, c};
    case 'y': return {c, 0, s, 0, 1, 0, -s, 0, c};
    case 'z': return {c, -s, 0, s, c, 0, 0, 0, 1};
    default: throw ConfigError(std::string("unknown rotation axis '") + axis + "'");
  }
}

}  // namespace

Rotation euler_rotation(std::string_view axes, const std::array<double, 3>& degrees) {
  if (axes.size() != 3) throw ConfigError("rotation axes must name three axes, e.g. yxz");
  Rotation r{1, 0, 0, 0, 1, 0, 0, 0, 1};
  for (std::size_t i = 0; i < 3; ++i) r = multiply(r, axis_rotation(axes[i], degrees[i]));
  return r;
}

Rotation parse_rotation(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw ConfigError("rotation must look like yxz:a,b,c, got '" + std::string(text) + "'");
  std::array<double, 3> angles{};
  std::string_view rest = text.substr(colon + 1);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto comma = rest.find(',');
    const std::string_view item = rest.substr(0, comma);
    const std::string buf(item);
    std::size_t used = 0;
    try {
      angles[i] = std::stod(buf, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != buf.size()) throw ConfigError("bad rotation angle '" + buf + "'");
    if (i < 2 && comma == std::string_view::npos) throw ConfigError("rotation needs three angles");
    if (i == 2 && comma != std::string_view::npos) throw ConfigError("rotation needs exactly three angles");
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
  }
  return euler_rotation(text.substr(0, colon), angles);
}

Rotation transpose(const Rotation& r) {
  return {r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]};
}

void rotate_lonlat(double& lon, double& lat, const Rotation& r) {
  const double d = std::numbers::pi / 180.0;
  const double lo = lon * d, la = lat * d;
  const double u[3] = {std::cos(la) * std::cos(lo), std::cos(la) * std::sin(lo), std::sin(la)};
  double v[3] = {};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) v[i] += r[i * 3 + k] * u[k];
  lon = std::atan2(v[1], v[0]) / d;
  lat = std::asin(std::clamp(v[2], -1.0, 1.0)) / d;
}

// ---- group actions ------------------------------------------------------------

namespace {

template <typename T>
void translate(Tensor<T>& coords, const std::vector<double>& shift) {
  const std::size_t w = coords.cols();
  if (w == 0) return;
  if (shift.size() != 1 && shift.size() != w) {
    throw ConfigError("translation has " + std::to_string(shift.size()) + " components for coordinates of width " +
                      std::to_string(w));
  }
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    for (std::size_t c = 0; c < w; ++c) coords(i, c) += static_cast<T>(shift.size() == 1 ? shift[0] : shift[c]);
  }
}

template <typename T>
void rotate(Tensor<T>& coords, const Rotation& r) {
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    double lon = coords(i, 0), lat = coords(i, 1);
    rotate_lonlat(lon, lat, r);
    coords(i, 0) = static_cast<T>(lon);
    coords(i, 1) = static_cast<T>(lat);
  }
}

}  // namespace

template <typename T>
Task<T> apply_group_action(const Task<T>& task, const GroupAction& action) {
  Task<T> out = task;
  for (auto* side : {&out.ctx, &out.test}) {
    switch (action.kind) {
      case GroupAction::Kind::translate_s: translate(side->s, action.shift); break;
      case GroupAction::Kind::translate_t: translate(side->t, action.shift); break;
      case GroupAction::Kind::rotate:
        if (task.domain != SpatialDomain::lonlat || task.ds() != 2) {
          throw ConfigError("rotation applies only to (lon, lat) spatial coordinates");
        }
        rotate(side->s, action.rotation);
        break;
    }
  }
  return out;
}

template <typename T>
TaskBatch<T> apply_group_action(const TaskBatch<T>& batch, const GroupAction& action) {
  TaskBatch<T> out;
  for (const auto& t : batch.tasks) out.tasks.push_back(apply_group_action(t, action));
  return out;
}

template <typename T>
TaskBatch<T> scale_locations(const TaskBatch<T>& batch, double k) {
  if (!(k > 0.0)) throw ConfigError("location scale must be positive");
  TaskBatch<T> out = batch;
  for (auto& t : out.tasks) {
    for (auto* side : {&t.ctx, &t.test}) {
      for (std::size_t i = 0; i < side->s.size(); ++i) side->s[i] = static_cast<T>(side->s[i] * k);
    }
  }
  return out;
}

#define BSATNP_INSTANTIATE_TASK(T)                                                   \
  template struct PointSet<T>;                                                       \
  template struct Task<T>;                                                           \
  template struct TaskBatch<T>;                                                      \
  template Task<T> apply_group_action<T>(const Task<T>&, const GroupAction&);        \
  template TaskBatch<T> apply_group_action<T>(const TaskBatch<T>&, const GroupAction&); \
  template TaskBatch<T> scale_locations<T>(const TaskBatch<T>&, double);

BSATNP_INSTANTIATE_TASK(float)
BSATNP_INSTANTIATE_TASK(double)

#undef BSATNP_INSTANTIATE_TASK

}  // namespace bsatnp
