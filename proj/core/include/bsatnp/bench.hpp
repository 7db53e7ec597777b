#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace bsatnp {

// Cross-attention of n_test queries over n_ctx keys, one head, with an RBF
// bias on 2D locations. The naive path materializes the full score and bias
// matrices and is skipped once n_ctx * n_test exceeds naive_max_pairs.
struct BenchConfig {
  std::vector<std::size_t> ctx_sizes{512, 4096};
  std::vector<std::size_t> test_sizes{1024};
  std::size_t head_dim = 32;
  std::size_t block = 64;
  std::size_t basis = 5;
  std::size_t naive_max_pairs = std::size_t{1} << 25;
  std::size_t repeats = 3;  // timed runs after one warmup; 0 times one cold run
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t n_ctx = 0;
  std::size_t n_test = 0;
  std::string path;  // "bsa" or "naive"
  std::size_t peak_bytes = 0;
  double points_per_sec = 0.0;
  double seconds = 0.0;       // mean over the timed runs
  double max_abs_diff = -1.0;  // bsa vs naive, -1 when naive did not run
};

std::vector<BenchRow> bench_attention(const BenchConfig& cfg);

// "size,path,peak_bytes,points_per_sec", then one line per row with size
// written as <n_ctx>x<n_test>.
std::string format_bench_report(const std::vector<BenchRow>& rows);

}  // namespace bsatnp
