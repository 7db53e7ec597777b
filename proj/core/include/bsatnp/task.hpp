#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "bsatnp/tensor.hpp"

namespace bsatnp {

// How the spatial coordinates s of a task are to be read.
enum class SpatialDomain { euclidean, lonlat };

// One side (context or test) of a prediction problem. Every tensor has one
// row per point; a feature group of width 0 is legal and simply absent.
template <typename T>
struct PointSet {
  std::vector<std::uint8_t> obs;
  Tensor<T> x;
  Tensor<T> s;
  Tensor<T> t;
  Tensor<T> f;

  std::size_t size() const noexcept { return obs.size(); }
  bool operator==(const PointSet&) const = default;

  // Empty point set with the given widths.
  static PointSet zeros(std::size_t n, std::size_t dx, std::size_t ds, std::size_t dt, std::size_t df, bool observed);

  template <typename U>
  PointSet<U> cast() const {
    return PointSet<U>{obs, x.template cast<U>(), s.template cast<U>(), t.template cast<U>(), f.template cast<U>()};
  }
};

template <typename T>
struct Task {
  PointSet<T> ctx;
  PointSet<T> test;
  SpatialDomain domain = SpatialDomain::euclidean;

  std::size_t dx() const { return ctx.x.cols(); }
  std::size_t ds() const { return ctx.s.cols(); }
  std::size_t dt() const { return ctx.t.cols(); }
  std::size_t df() const { return ctx.f.cols(); }

  // obs flags, counts >= 1, widths shared by ctx and test, finite values.
  void validate() const;

  template <typename U>
  Task<U> cast() const {
    return Task<U>{ctx.template cast<U>(), test.template cast<U>(), domain};
  }

  bool operator==(const Task&) const = default;
};

template <typename T>
struct TaskBatch {
  std::vector<Task<T>> tasks;

  std::size_t size() const noexcept { return tasks.size(); }
  // Validates each task and that all tasks share feature widths.
  void validate() const;

  template <typename U>
  TaskBatch<U> cast() const {
    TaskBatch<U> out;
    for (const auto& t : tasks) out.tasks.push_back(t.template cast<U>());
    return out;
  }

  bool operator==(const TaskBatch&) const = default;
};

// 3x3 rotation, row-major.
using Rotation = std::array<double, 9>;

// R = R_a1(angle1) R_a2(angle2) R_a3(angle3) for an intrinsic axis string
// such as "yxz"; angles in degrees.
Rotation euler_rotation(std::string_view axes, const std::array<double, 3>& degrees);
// Parses "yxz:a,b,c".
Rotation parse_rotation(std::string_view text);
Rotation transpose(const Rotation& r);

struct GroupAction {
  enum class Kind { translate_s, translate_t, rotate };
  Kind kind = Kind::translate_s;
  std::vector<double> shift;  // translate: one entry per coordinate, or one broadcast to all
  Rotation rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static GroupAction translate_s(std::vector<double> tau) {
    GroupAction a;
    a.shift = std::move(tau);
    return a;
  }
  static GroupAction translate_t(std::vector<double> tau) {
    GroupAction a;
    a.kind = Kind::translate_t;
    a.shift = std::move(tau);
    return a;
  }
  static GroupAction rotate(const Rotation& r) {
    GroupAction a;
    a.kind = Kind::rotate;
    a.rotation = r;
    return a;
  }
};

// Applies the action to the named coordinates of ctx and test alike; f is
// never touched. Rotation requires (lon, lat) tasks.
template <typename T>
Task<T> apply_group_action(const Task<T>& task, const GroupAction& action);

template <typename T>
TaskBatch<T> apply_group_action(const TaskBatch<T>& batch, const GroupAction& action);

// Multiplies every spatial coordinate by k (the "scaled" evaluation setting).
template <typename T>
TaskBatch<T> scale_locations(const TaskBatch<T>& batch, double k);

// (lon, lat) degrees rotated on the sphere; used by tasks and tests.
void rotate_lonlat(double& lon, double& lat, const Rotation& r);

}  // namespace bsatnp
