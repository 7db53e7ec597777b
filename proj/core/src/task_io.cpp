#include "bsatnp/task_io.hpp"

#include <cstdio>
#include <fstream>

#include "bsatnp/binary_io.hpp"

namespace bsatnp {

namespace {

const std::string kMagic = "BSATNPT1";
constexpr std::uint32_t kMaxRows = 1u << 28;
constexpr std::uint32_t kMaxWidth = 1u << 16;

void put_block(std::ostream& out, const PointSet<double>& p) {
  for (auto o : p.obs) binio::put_uint<std::uint32_t>(out, o);
  for (const Tensor<double>* t : {&p.x, &p.s, &p.t, &p.f}) {
    for (double v : t->values()) binio::put_f32(out, static_cast<float>(v));
  }
}

PointSet<double> get_block(std::istream& in, std::size_t n, std::size_t dx, std::size_t ds, std::size_t dt,
                           std::size_t df, const char* side) {
  PointSet<double> p = PointSet<double>::zeros(n, dx, ds, dt, df, false);
  for (auto& o : p.obs) {
    const auto v = binio::get_uint<std::uint32_t>(in, side);
    if (v > 1) throw FormatError(std::string(side) + " obs flag is neither 0 nor 1");
    o = static_cast<std::uint8_t>(v);
  }
  for (Tensor<double>* t : {&p.x, &p.s, &p.t, &p.f}) {
    for (double& v : t->values()) v = binio::get_f32(in, side);
  }
  return p;
}

}  // namespace

void write_tasks(std::ostream& out, const TaskBatch<double>& batch) {
  batch.validate();
  out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  binio::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(batch.size()));
  for (const auto& task : batch.tasks) {
    for (std::size_t v : {task.ctx.size(), task.test.size(), task.dx(), task.ds(), task.dt(), task.df()}) {
      binio::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(v));
    }
    binio::put_uint<std::uint32_t>(out, task.domain == SpatialDomain::lonlat ? 1u : 0u);
    put_block(out, task.ctx);
    put_block(out, task.test);
  }
  if (!out) throw FormatError("failed writing task file");
}

TaskBatch<double> read_tasks(std::istream& in) {
  binio::expect_magic(in, kMagic, "task file");
  const auto count = binio::get_uint<std::uint32_t>(in, "task count");
  TaskBatch<double> batch;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint32_t h[7];
    for (auto& v : h) v = binio::get_uint<std::uint32_t>(in, "task header");
    if (h[0] > kMaxRows || h[1] > kMaxRows) throw FormatError("implausible point count in task header");
    for (int i = 2; i < 6; ++i) {
      if (h[i] > kMaxWidth) throw FormatError("implausible feature width in task header");
    }
    if (h[6] > 1) throw FormatError("unknown spatial domain code " + std::to_string(h[6]));
    Task<double> task;
    task.domain = h[6] == 1 ? SpatialDomain::lonlat : SpatialDomain::euclidean;
    task.ctx = get_block(in, h[0], h[2], h[3], h[4], h[5], "ctx block");
    task.test = get_block(in, h[1], h[2], h[3], h[4], h[5], "test block");
    try {
      task.validate();
    } catch (const std::exception& e) {
      throw FormatError("task " + std::to_string(k) + " in file is invalid: " + e.what());
    }
    batch.tasks.push_back(std::move(task));
  }
  return batch;
}

void save_tasks(const std::string& path, const TaskBatch<double>& batch) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + tmp + "' for writing");
    write_tasks(out, batch);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move task file into '" + path + "'");
}

TaskBatch<double> load_tasks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open task file '" + path + "'");
  return read_tasks(in);
}

}  // namespace bsatnp
