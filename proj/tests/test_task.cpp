#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "bsatnp/task.hpp"
#include "support/test_support.hpp"

using namespace bsatnp;
using bsatnp::testing::random_tensor;

namespace {

Task<double> box_task(std::size_t nc, std::size_t nt, std::mt19937_64& rng, double lo = -2, double hi = 2) {
  Task<double> t;
  t.ctx = PointSet<double>::zeros(nc, 0, 2, 1, 1, true);
  t.test = PointSet<double>::zeros(nt, 0, 2, 1, 1, false);
  t.ctx.s = random_tensor<double>({nc, 2}, rng, lo, hi);
  t.test.s = random_tensor<double>({nt, 2}, rng, lo, hi);
  t.ctx.t = random_tensor<double>({nc, 1}, rng);
  t.test.t = random_tensor<double>({nt, 1}, rng);
  t.ctx.f = random_tensor<double>({nc, 1}, rng);
  t.test.f = random_tensor<double>({nt, 1}, rng);
  return t;
}

Task<double> sphere_task(std::size_t n, std::mt19937_64& rng) {
  Task<double> t = box_task(n, n, rng, -10, 10);
  t.domain = SpatialDomain::lonlat;
  return t;
}

double great_circle(double lon1, double lat1, double lon2, double lat2) {
  const double d = std::numbers::pi / 180;
  const double c = std::sin(lat1 * d) * std::sin(lat2 * d) + std::cos(lat1 * d) * std::cos(lat2 * d) * std::cos((lon1 - lon2) * d);
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace

TEST(TaskValidate, AcceptsWellFormedTask) {
  std::mt19937_64 rng(1);
  EXPECT_NO_THROW(box_task(4, 3, rng).validate());
}

TEST(TaskValidate, RejectsBadObsFlags) {
  std::mt19937_64 rng(2);
  auto t = box_task(4, 3, rng);
  t.test.obs[1] = 1;
  EXPECT_THROW(t.validate(), ContractError);
}

TEST(TaskValidate, RejectsEmptySides) {
  Task<double> t;
  t.ctx = PointSet<double>::zeros(0, 0, 2, 0, 1, true);
  t.test = PointSet<double>::zeros(2, 0, 2, 0, 1, false);
  EXPECT_ANY_THROW(t.validate());
}

TEST(TaskValidate, RejectsWidthMismatch) {
  std::mt19937_64 rng(3);
  auto t = box_task(4, 3, rng);
  t.test.s = Tensor<double>({3, 3});
  EXPECT_ANY_THROW(t.validate());
}

TEST(TaskValidate, RejectsNonFinite) {
  std::mt19937_64 rng(4);
  auto t = box_task(4, 3, rng);
  t.ctx.f[2] = std::nan("");
  EXPECT_ANY_THROW(t.validate());
}

TEST(GroupAction, ZeroShiftIsIdentity) {
  std::mt19937_64 rng(5);
  const auto t = box_task(6, 5, rng);
  EXPECT_EQ(apply_group_action(t, GroupAction::translate_s({0.0})), t);
  EXPECT_EQ(apply_group_action(t, GroupAction::translate_t({0.0})), t);
}

TEST(GroupAction, ShiftByTenMovesBoxToEightTwelve) {
  std::mt19937_64 rng(6);
  const auto t = box_task(64, 64, rng);
  const auto moved = apply_group_action(t, GroupAction::translate_s({10.0}));
  for (const auto* s : {&moved.ctx.s, &moved.test.s}) {
    for (double v : s->values()) {
      EXPECT_GE(v, 8.0);
      EXPECT_LE(v, 12.0);
    }
  }
  EXPECT_EQ(moved.ctx.f, t.ctx.f);
  EXPECT_EQ(moved.test.f, t.test.f);
  EXPECT_EQ(moved.ctx.t, t.ctx.t);
}

TEST(GroupAction, PerCoordinateShift) {
  std::mt19937_64 rng(7);
  const auto t = box_task(3, 2, rng);
  const auto moved = apply_group_action(t, GroupAction::translate_s({1.0, -2.0}));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(moved.ctx.s(i, 0), t.ctx.s(i, 0) + 1.0);
    EXPECT_DOUBLE_EQ(moved.ctx.s(i, 1), t.ctx.s(i, 1) - 2.0);
  }
  EXPECT_THROW(apply_group_action(t, GroupAction::translate_s({1.0, 2.0, 3.0})), ConfigError);
}

TEST(GroupAction, TemporalShiftOnlyTouchesT) {
  std::mt19937_64 rng(8);
  const auto t = box_task(3, 2, rng);
  const auto moved = apply_group_action(t, GroupAction::translate_t({5.0}));
  EXPECT_EQ(moved.ctx.s, t.ctx.s);
  EXPECT_DOUBLE_EQ(moved.test.t(1, 0), t.test.t(1, 0) + 5.0);
}

TEST(GroupAction, RotationNeedsLonLat) {
  std::mt19937_64 rng(9);
  const auto t = box_task(3, 2, rng);
  EXPECT_THROW(apply_group_action(t, GroupAction::rotate(parse_rotation("yxz:-60,30,0"))), ConfigError);
}

TEST(GroupAction, RotationThenInverseRestoresCoordinates) {
  std::mt19937_64 rng(10);
  const auto t = sphere_task(40, rng);
  const Rotation r = parse_rotation("yxz:-60,30,20");
  const auto back = apply_group_action(apply_group_action(t, GroupAction::rotate(r)), GroupAction::rotate(transpose(r)));
  for (std::size_t i = 0; i < t.ctx.s.size(); ++i) EXPECT_NEAR(back.ctx.s[i], t.ctx.s[i], 1e-6);
  for (std::size_t i = 0; i < t.test.s.size(); ++i) EXPECT_NEAR(back.test.s[i], t.test.s[i], 1e-6);
}

TEST(GroupAction, RotationPreservesGreatCircleDistances) {
  std::mt19937_64 rng(11);
  const auto t = sphere_task(30, rng);
  const auto rot = apply_group_action(t, GroupAction::rotate(parse_rotation("yxz:-60,30,0")));
  for (std::size_t i = 0; i < 30; ++i) {
    for (std::size_t j = 0; j < 30; ++j) {
      const double d0 = great_circle(t.ctx.s(i, 0), t.ctx.s(i, 1), t.test.s(j, 0), t.test.s(j, 1));
      const double d1 = great_circle(rot.ctx.s(i, 0), rot.ctx.s(i, 1), rot.test.s(j, 0), rot.test.s(j, 1));
      EXPECT_NEAR(d0, d1, 1e-6);
    }
  }
}

TEST(Rotation, EulerComposesAxisRotations) {
  // a pure 90 degree turn about z maps x onto y
  const Rotation r = euler_rotation("zxy", {90, 0, 0});
  EXPECT_NEAR(r[0], 0.0, 1e-15);
  EXPECT_NEAR(r[3], 1.0, 1e-15);
  const Rotation id = euler_rotation("yxz", {0, 0, 0});
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(id[i], i % 4 == 0 ? 1.0 : 0.0);
}

TEST(Rotation, IsOrthonormal) {
  const Rotation r = parse_rotation("yxz:-60,30,20");
  const Rotation rt = transpose(r);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 3; ++k) acc += r[i * 3 + k] * rt[k * 3 + j];
      EXPECT_NEAR(acc, i == j ? 1.0 : 0.0, 1e-14);
    }
  }
}

TEST(Rotation, ParseRejectsMalformedText) {
  EXPECT_THROW(parse_rotation("yxz"), ConfigError);
  EXPECT_THROW(parse_rotation("yxq:1,2,3"), ConfigError);
  EXPECT_THROW(parse_rotation("yxz:1,2"), ConfigError);
  EXPECT_THROW(parse_rotation("yxz:a,b,c"), ConfigError);
}

TEST(ScaleLocations, MultipliesSpatialCoordinates) {
  std::mt19937_64 rng(12);
  TaskBatch<double> b{{box_task(5, 4, rng)}};
  const auto scaled = scale_locations(b, 3.0);
  for (std::size_t i = 0; i < b.tasks[0].ctx.s.size(); ++i) {
    EXPECT_DOUBLE_EQ(scaled.tasks[0].ctx.s[i], 3.0 * b.tasks[0].ctx.s[i]);
  }
  EXPECT_EQ(scaled.tasks[0].ctx.f, b.tasks[0].ctx.f);
  EXPECT_ANY_THROW(scale_locations(b, 0.0));
}
