#include "bsatnp/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "bsatnp/attention.hpp"
#include "bsatnp/bias.hpp"
#include "bsatnp/memory.hpp"
#include "bsatnp/tasks.hpp"

namespace bsatnp {

namespace {

struct Inputs {
  Tensor<float> q, k, v, qs, ks, a, b;
};

Tensor<float> uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<float> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (float& x : t.values()) x = static_cast<float>(u(rng));
  return t;
}

Inputs make_inputs(const BenchConfig& cfg, std::size_t nc, std::size_t nt) {
  Rng rng(derive_seed(cfg.seed, nc, nt));
  Inputs in;
  in.q = uniform({nt, cfg.head_dim}, rng, -1, 1);
  in.k = uniform({nc, cfg.head_dim}, rng, -1, 1);
  in.v = uniform({nc, cfg.head_dim}, rng, -1, 1);
  in.qs = uniform({nt, 2}, rng, -2, 2);
  in.ks = uniform({nc, 2}, rng, -2, 2);
  in.a = uniform({cfg.basis}, rng, 0, 0.5);
  in.b = uniform({cfg.basis}, rng, 0.5, 50);
  return in;
}

// One warmup then `repeats` timed runs; repeats == 0 times a single cold run.
template <typename F>
double mean_seconds(std::size_t repeats, F&& run) {
  if (repeats > 0) run();
  const std::size_t n = std::max<std::size_t>(repeats, 1);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return total / static_cast<double>(n);
}

}  // namespace

std::vector<BenchRow> bench_attention(const BenchConfig& cfg) {
  if (cfg.ctx_sizes.empty() || cfg.test_sizes.empty()) throw ConfigError("bench: no sizes given");
  if (cfg.head_dim == 0 || cfg.block == 0 || cfg.basis == 0) throw ConfigError("bench: head_dim, block, basis must be positive");
  AttentionConfig acfg;
  acfg.block_q = acfg.block_k = cfg.block;
  acfg.heads = 1;
  acfg.head_dim = acfg.value_dim = cfg.head_dim;

  std::vector<BenchRow> rows;
  for (std::size_t nt : cfg.test_sizes) {
    for (std::size_t nc : cfg.ctx_sizes) {
      if (nc == 0 || nt == 0) throw ConfigError("bench: sizes must be positive");
      const Inputs in = make_inputs(cfg, nc, nt);
      ScanProblem<float> p;
      p.q = in.q.data();
      p.k = in.k.data();
      p.v = in.v.data();
      p.nq = nt;
      p.nk = nc;
      p.bias.push_back(BiasTerm<float>{BiasKind::rbf, in.qs.data(), 2, in.ks.data(), 2, 2, in.a.data(), in.b.data(),
                                       cfg.basis});

      Tensor<float> out({nt, cfg.head_dim});
      BenchRow bsa{nc, nt, "bsa"};
      {
        PeakMemoryScope scope;
        bsa_forward_into(p, acfg, out.data(), static_cast<ScanStats<float>*>(nullptr));
        bsa.peak_bytes = scope.peak_bytes();
      }
      bsa.seconds = mean_seconds(cfg.repeats, [&] { bsa_forward_into(p, acfg, out.data(), static_cast<ScanStats<float>*>(nullptr)); });
      bsa.points_per_sec = static_cast<double>(nt) / bsa.seconds;

      if (nc * nt <= cfg.naive_max_pairs) {
        BenchRow naive{nc, nt, "naive"};
        Tensor<float> ref;
        auto run = [&] { ref = naive_biased_attention(in.q, in.k, in.v, rbf_bias_tile(in.qs, in.ks, in.a, in.b)); };
        {
          PeakMemoryScope scope;
          run();
          // the returned output is not scratch
          naive.peak_bytes = scope.peak_bytes() - std::min(scope.peak_bytes(), ref.size() * sizeof(float));
        }
        naive.seconds = mean_seconds(cfg.repeats, run);
        naive.points_per_sec = static_cast<double>(nt) / naive.seconds;
        double diff = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) diff = std::max(diff, std::abs(double(out[i]) - double(ref[i])));
        bsa.max_abs_diff = naive.max_abs_diff = diff;
        rows.push_back(bsa);
        rows.push_back(naive);
      } else {
        rows.push_back(bsa);
      }
    }
  }
  return rows;
}

std::string format_bench_report(const std::vector<BenchRow>& rows) {
  std::string s = "size,path,peak_bytes,points_per_sec\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zux%zu,%s,%zu,%.6g\n", r.n_ctx, r.n_test, r.path.c_str(), r.peak_bytes,
                  r.points_per_sec);
    s += buf;
  }
  return s;
}

}  // namespace bsatnp
