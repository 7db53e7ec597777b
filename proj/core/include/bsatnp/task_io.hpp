#pragma once

#include <iosfwd>
#include <string>

#include "bsatnp/task.hpp"

namespace bsatnp {

// Flat little-endian task file, every field 32 bits wide:
//
//   "BSATNPT1"                      8 bytes
//   u32 task count
//   per task:
//     u32 n_ctx, n_test, dx, ds, dt, df, domain (0 euclidean, 1 lonlat)
//     ctx block:  obs[n_ctx] u32, x, s, t, f as row-major f32
//     test block: obs[n_test] u32, x, s, t, f as row-major f32
//
// Values are stored as float, so a double batch loses precision on write.
void write_tasks(std::ostream& out, const TaskBatch<double>& batch);
TaskBatch<double> read_tasks(std::istream& in);

void save_tasks(const std::string& path, const TaskBatch<double>& batch);
TaskBatch<double> load_tasks(const std::string& path);

}  // namespace bsatnp
