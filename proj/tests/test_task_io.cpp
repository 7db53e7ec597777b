#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "bsatnp/task_io.hpp"
#include "bsatnp/tasks.hpp"

using namespace bsatnp;

namespace {

TaskBatch<double> mixed_tasks() {
  TaskStream gp;
  gp.gp = GpTaskConfig::desk();
  gp.gp.n_test = 16;
  gp.gp.batch = 2;
  TaskBatch<double> b = gp.batch(0);
  // a task of other sizes from a later batch
  gp.gp.n_test = 9;
  b.tasks.push_back(gp.batch(1).tasks[0]);
  return b;
}

std::string bytes_of(const TaskBatch<double>& b) {
  std::ostringstream out;
  write_tasks(out, b);
  return out.str();
}

// Round trip is exact once values are representable in 32 bits.
TaskBatch<double> through_float(const TaskBatch<double>& b) { return b.cast<float>().cast<double>(); }

}  // namespace

TEST(TaskIo, RoundTrip) {
  const auto b = mixed_tasks();
  std::istringstream in(bytes_of(b));
  const auto back = read_tasks(in);
  EXPECT_EQ(back, through_float(b));
  EXPECT_EQ(bytes_of(back), bytes_of(b));
}

TEST(TaskIo, SphericalDomainSurvives) {
  TaskStream s;
  s.family = TaskFamily::spherical;
  s.gp = GpTaskConfig::spherical();
  s.gp.n_test = 9;
  s.gp.batch = 2;
  const auto b = s.batch(0);
  std::istringstream in(bytes_of(b));
  const auto back = read_tasks(in);
  EXPECT_EQ(back, through_float(b));
  EXPECT_EQ(back.tasks[1].domain, SpatialDomain::lonlat);
}

TEST(TaskIo, SirOneHotSurvives) {
  TaskStream s;
  s.family = TaskFamily::sir;
  s.sir = SirConfig::desk();
  s.sir.batch = 1;
  const auto b = s.batch(0);
  std::istringstream in(bytes_of(b));
  EXPECT_EQ(read_tasks(in), b);
}

TEST(TaskIo, HeaderLayout) {
  const std::string bytes = bytes_of(mixed_tasks());
  EXPECT_EQ(bytes.substr(0, 8), "BSATNPT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3u);  // little-endian task count
}

TEST(TaskIo, RejectsCorruptFiles) {
  const std::string good = bytes_of(mixed_tasks());
  auto expect_bad = [](std::string bytes) {
    std::istringstream in(bytes);
    EXPECT_THROW(read_tasks(in), FormatError);
  };
  std::string magic = good;
  magic[3] = 'Q';
  expect_bad(magic);
  expect_bad(good.substr(0, good.size() / 2));
  expect_bad("");
  // first task's first ctx obs flag sits after magic, count and seven u32 header fields
  std::string flag = good;
  flag[8 + 4 + 7 * 4] = 2;
  expect_bad(flag);
  // a ctx point flagged as a test point fails task validation
  std::string as_test = good;
  as_test[8 + 4 + 7 * 4] = 0;
  expect_bad(as_test);
  std::string domain = good;
  domain[8 + 4 + 6 * 4] = 7;
  expect_bad(domain);
}

TEST(TaskIo, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "bsatnp_tasks_test.bin").string();
  const auto b = mixed_tasks();
  save_tasks(path, b);
  EXPECT_EQ(load_tasks(path), through_float(b));
  std::filesystem::remove(path);
  EXPECT_THROW(load_tasks(path), FormatError);
}
