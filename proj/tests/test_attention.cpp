#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>

#include "bsatnp/attention.hpp"
#include "bsatnp/kernels.hpp"
#include "bsatnp/memory.hpp"
#include "support/test_support.hpp"

using namespace bsatnp;
using bsatnp::testing::random_tensor;

namespace {

// Direct softmax(QK^T/sqrt(d) + B) V with std::exp, long double sums.
Tensor<double> direct_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                                const Tensor<double>& bias) {
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
  Tensor<double> out({nq, dv});
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<long double> w(nk);
    long double total = 0;
    for (std::size_t j = 0; j < nk; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < d; ++p) s += static_cast<long double>(q(i, p)) * k(j, p);
      s = s / std::sqrt(static_cast<long double>(d)) + bias(i, j);
      w[j] = std::exp(s);
      total += w[j];
    }
    for (std::size_t c = 0; c < dv; ++c) {
      long double acc = 0;
      for (std::size_t j = 0; j < nk; ++j) acc += w[j] * v(j, c);
      out(i, c) = static_cast<double>(acc / total);
    }
  }
  return out;
}

struct Problem {
  Tensor<float> q, k, v, qs, ks, a, b;
  BiasKind kind = BiasKind::none;
  AttentionConfig cfg;

  ScanProblem<float> scan() const {
    ScanProblem<float> p{q.data(), k.data(), v.data(), q.rows(), k.rows(), {}, {}};
    if (kind != BiasKind::none) {
      p.bias.push_back(BiasTerm<float>{kind, qs.data(), qs.cols(), ks.data(), ks.cols(), qs.cols(), a.data(),
                                       b.data(), a.cols()});
    }
    return p;
  }

  Tensor<float> bias_tile() const {
    if (kind == BiasKind::none) return Tensor<float>({q.rows(), k.rows()});
    Tensor<float> a0({a.cols()}, std::span<const float>(a.data(), a.cols()));
    Tensor<float> b0({b.cols()}, std::span<const float>(b.data(), b.cols()));
    return kind == BiasKind::rbf ? rbf_bias_tile(qs, ks, a0, b0) : geodesic_bias_tile(qs, ks, a0, b0);
  }
};

Problem make_problem(std::size_t nq, std::size_t nk, std::size_t de, std::size_t dv, BiasKind kind,
                     std::mt19937_64& rng, double spread = 1.0) {
  Problem p;
  p.q = random_tensor<float>({nq, de}, rng, -spread, spread);
  p.k = random_tensor<float>({nk, de}, rng, -spread, spread);
  p.v = random_tensor<float>({nk, dv}, rng);
  p.kind = kind;
  if (kind == BiasKind::geodesic) {
    p.qs = random_tensor<float>({nq, 2}, rng, -60, 60);
    p.ks = random_tensor<float>({nk, 2}, rng, -60, 60);
  } else {
    p.qs = random_tensor<float>({nq, 2}, rng, -2, 2);
    p.ks = random_tensor<float>({nk, 2}, rng, -2, 2);
  }
  p.a = random_tensor<float>({1, 5}, rng, 0, 0.5);
  p.b = random_tensor<float>({1, 5}, rng, 0.5, 50);
  p.cfg = AttentionConfig{64, 64, 1, de, dv};
  return p;
}

}  // namespace

TEST(NaiveAttention, SingleKeyReturnsItsValue) {
  const Tensor<float> q({2, 3}, {1, 2, 3, -1, 0, 4});
  const Tensor<float> k({1, 3}, {0.5f, 0.5f, 0.5f});
  const Tensor<float> v({1, 2}, {7, -3});
  const auto out = naive_biased_attention(q, k, v, Tensor<float>({2, 1}));
  EXPECT_EQ(out, Tensor<float>({2, 2}, {7, -3, 7, -3}));
}

TEST(NaiveAttention, EqualScoresAverageValues) {
  const Tensor<float> q({1, 2}, {0, 0});
  const Tensor<float> k({2, 2}, {1, 2, 3, 4});
  const Tensor<float> v({2, 2}, {1, 10, 3, 20});
  const auto out = naive_biased_attention(q, k, v, Tensor<float>({1, 2}));
  EXPECT_FLOAT_EQ(out[0], 2.f);
  EXPECT_FLOAT_EQ(out[1], 15.f);
}

TEST(NaiveAttention, MatchesDirectFormula) {
  std::mt19937_64 rng(2);
  const auto q = random_tensor<double>({4, 4}, rng), k = random_tensor<double>({4, 4}, rng);
  const auto v = random_tensor<double>({4, 4}, rng), b = random_tensor<double>({4, 4}, rng);
  EXPECT_LE(max_abs_diff(naive_biased_attention(q, k, v, b), direct_attention(q, k, v, b)), 1e-12);
}

TEST(NaiveAttention, EmptyKeysRejected) {
  EXPECT_THROW(naive_biased_attention(Tensor<float>({1, 2}), Tensor<float>({0, 2}), Tensor<float>({0, 2}),
                                      Tensor<float>()),
               DimensionError);
}

TEST(ScanState, RescalesWhenMaximumGrows) {
  ScanState<double> st;
  st.reset(1, 1);
  double first[] = {0.5};
  const double v1[] = {2.0};
  scan_update(st, first, 1, 1, v1, 1);
  EXPECT_EQ(st.m[0], 0.5);
  EXPECT_DOUBLE_EQ(st.ell[0], 1.0);
  double second[] = {1.2};
  const double v2[] = {-1.0};
  scan_update(st, second, 1, 1, v2, 1);
  const double k = std::exp(0.5 - 1.2);
  EXPECT_EQ(st.m[0], 1.2);
  EXPECT_NEAR(st.ell[0], k * 1.0 + 1.0, 1e-15);
  EXPECT_NEAR(st.o_tilde[0], k * 2.0 - 1.0, 1e-15);
}

TEST(ScanState, MaximumNeverDecreases) {
  std::mt19937_64 rng(4);
  ScanState<float> st;
  st.reset(3, 2);
  const auto v = random_tensor<float>({4, 2}, rng);
  std::vector<float> last(3, -1e30f);
  for (int tile = 0; tile < 10; ++tile) {
    auto s = random_tensor<float>({3, 4}, rng, -5, 5);
    scan_update(st, s.data(), 4, 4, v.data(), 2);
    for (std::size_t r = 0; r < 3; ++r) {
      EXPECT_GE(st.m[r], last[r]);
      EXPECT_GT(st.ell[r], 0.f);
      last[r] = st.m[r];
    }
  }
}

TEST(BiasedScan, SingleTileIsBitIdenticalToNaive) {
  std::mt19937_64 rng(6);
  for (auto kind : {BiasKind::none, BiasKind::rbf, BiasKind::geodesic}) {
    auto p = make_problem(9, 13, 8, 5, kind, rng);
    p.cfg.block_q = 16;
    p.cfg.block_k = 13;
    EXPECT_EQ(bsa_forward(p.scan(), p.cfg), naive_biased_attention(p.q, p.k, p.v, p.bias_tile()))
        << to_string(kind);
  }
}

TEST(BiasedScan, RaggedFinalTile) {
  std::mt19937_64 rng(8);
  auto p = make_problem(4, 5, 8, 3, BiasKind::rbf, rng);
  p.cfg.block_k = 2;
  EXPECT_LE(max_abs_diff(bsa_forward(p.scan(), p.cfg), naive_biased_attention(p.q, p.k, p.v, p.bias_tile())), 1e-6f);
}

class BlockSweep : public ::testing::TestWithParam<std::size_t> {};

TEST_P(BlockSweep, MatchesNaiveForEveryBlockSize) {
  std::mt19937_64 rng(100 + GetParam());
  const std::size_t nk = 37;
  for (auto kind : {BiasKind::none, BiasKind::rbf, BiasKind::geodesic}) {
    auto p = make_problem(23, nk, 8, 6, kind, rng);
    const std::size_t bs = GetParam() == 0 ? nk : (GetParam() == 1000 ? nk + 5 : GetParam());
    p.cfg.block_q = bs;
    p.cfg.block_k = bs;
    EXPECT_LE(max_abs_diff(bsa_forward(p.scan(), p.cfg), naive_biased_attention(p.q, p.k, p.v, p.bias_tile())),
              1e-5f)
        << "block " << bs << " bias " << to_string(kind);
  }
}

// 0 stands for block = nk, 1000 for nk + 5.
INSTANTIATE_TEST_SUITE_P(Blocks, BlockSweep, ::testing::Values(1, 2, 3, 7, 16, 0, 1000));

TEST(BiasedScan, ScratchIndependentOfKeyCount) {
  std::mt19937_64 rng(10);
  auto scratch = [&](std::size_t nk) {
    auto p = make_problem(64, nk, 16, 16, BiasKind::rbf, rng);
    Tensor<float> out({64, 16});
    ScanStats<float> stats{Tensor<float>({1, 64}), Tensor<float>({1, 64})};
    PeakMemoryScope scope;
    bsa_forward_into(p.scan(), p.cfg, out.data(), &stats);
    return scope.peak_bytes();
  };
  const std::size_t small = scratch(512), large = scratch(4096);
  EXPECT_GT(small, 0u);
  EXPECT_EQ(small, large);
}

TEST(BiasedScan, LargeScoresStayFinite) {
  std::mt19937_64 rng(12);
  // |q.k| / sqrt(8) = 8 * 5.3^2 / sqrt(8) ~ 79.5 for every pair.
  auto p = make_problem(16, 40, 8, 4, BiasKind::rbf, rng);
  p.q.fill(5.3f);
  for (std::size_t j = 0; j < 40; ++j)
    for (std::size_t c = 0; c < 8; ++c) p.k(j, c) = (j % 3 == 0 ? -5.3f : 5.3f);
  p.cfg.block_k = 7;
  ScanStats<float> stats;
  const auto out = bsa_forward(p.scan(), p.cfg, &stats);
  EXPECT_TRUE(out.all_finite());
  // Reconstruct the weights exp(x - m) / ell from the saved statistics.
  const auto bias = p.bias_tile();
  for (std::size_t i = 0; i < 16; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 40; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < 8; ++c) s += static_cast<double>(p.q(i, c)) * p.k(j, c);
      s = s / std::sqrt(8.0) + bias(i, j);
      EXPECT_LE(std::abs(s), 82.0);
      total += std::exp(s - stats.m(0, i)) / stats.ell(0, i);
    }
    EXPECT_NEAR(total, 1.0, 1e-5);
  }
}

TEST(BiasedScan, NonFiniteScoreReportsTile) {
  std::mt19937_64 rng(14);
  auto p = make_problem(8, 8, 4, 2, BiasKind::none, rng);
  p.k(5, 1) = std::numeric_limits<float>::quiet_NaN();
  p.cfg.block_k = 4;
  try {
    bsa_forward(p.scan(), p.cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("key row 4"), std::string::npos) << e.what();
  }
}

TEST(BiasedScan, EmptyKeysRejected) {
  std::mt19937_64 rng(16);
  auto p = make_problem(3, 1, 4, 2, BiasKind::none, rng);
  auto s = p.scan();
  s.nk = 0;
  EXPECT_THROW(bsa_forward(s, p.cfg), DimensionError);
}

TEST(BiasedScan, SegmentsMatchSeparateCalls) {
  std::mt19937_64 rng(18);
  auto p = make_problem(10, 12, 4, 3, BiasKind::rbf, rng);
  p.cfg.block_q = 3;
  p.cfg.block_k = 4;
  auto s = p.scan();
  s.segments = {Segment{0, 4, 0, 5}, Segment{4, 6, 5, 7}};
  const auto batched = bsa_forward(s, p.cfg);
  for (const auto& seg : s.segments) {
    auto part = s;
    part.q = p.q.data() + seg.q_begin * 4;
    part.k = p.k.data() + seg.k_begin * 4;
    part.v = p.v.data() + seg.k_begin * 3;
    part.nq = seg.q_count;
    part.nk = seg.k_count;
    part.segments.clear();
    part.bias[0].q_feat = p.qs.data() + seg.q_begin * 2;
    part.bias[0].k_feat = p.ks.data() + seg.k_begin * 2;
    const auto single = bsa_forward(part, p.cfg);
    for (std::size_t i = 0; i < single.size(); ++i) EXPECT_EQ(single[i], batched[seg.q_begin * 3 + i]);
  }
}

TEST(BiasedScan, OverlappingSegmentsRejected) {
  std::mt19937_64 rng(20);
  auto p = make_problem(6, 6, 4, 2, BiasKind::none, rng);
  auto s = p.scan();
  s.segments = {Segment{0, 4, 0, 6}, Segment{3, 3, 0, 6}};
  EXPECT_THROW(bsa_forward(s, p.cfg), ContractError);
}

TEST(BiasedScanBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(22);
  auto p = make_problem(7, 9, 4, 3, BiasKind::rbf, rng);
  p.cfg.block_k = 4;
  ScanStats<float> stats;
  const auto out = bsa_forward(p.scan(), p.cfg, &stats);
  const auto g = bsa_backward(p.scan(), p.cfg, out, stats, Tensor<float>(out.shape()));
  for (const auto* t : {&g.q, &g.k, &g.v, &g.a[0], &g.b[0]}) EXPECT_EQ(*t, Tensor<float>(t->shape()));
}

TEST(BiasedScanBackward, MismatchedStatsRejected) {
  std::mt19937_64 rng(24);
  auto p = make_problem(7, 9, 4, 3, BiasKind::none, rng);
  ScanStats<float> stats;
  const auto out = bsa_forward(p.scan(), p.cfg, &stats);
  ScanStats<float> wrong{Tensor<float>({1, 3}), Tensor<float>({1, 3})};
  EXPECT_THROW(bsa_backward(p.scan(), p.cfg, out, wrong, out), ContractError);
}

namespace {

// Runs scan and naive tape paths on the same multi-head problem and returns
// the gradients of sum(out * w) for q, k, v, a, b_raw.
template <typename T>
std::vector<Tensor<T>> tape_gradients(AttentionImpl impl, const std::vector<Tensor<T>>& inputs,
                                      std::shared_ptr<const Tensor<T>> qf, std::shared_ptr<const Tensor<T>> kf,
                                      const std::vector<Segment>& segs, const AttentionConfig& cfg,
                                      const Tensor<T>& w, T* loss_out = nullptr) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  const AttentionBias<T> bias[] = {{BiasKind::rbf, qf, kf, vars[3], vars[4]}};
  const std::span<const AttentionBias<T>> b(bias);
  auto out = impl == AttentionImpl::scan ? scan_attention(vars[0], vars[1], vars[2], b, segs, cfg)
                                         : naive_attention(vars[0], vars[1], vars[2], b, segs, cfg);
  auto loss = sum(mul(out, tape.constant(w)));
  if (loss_out) *loss_out = loss.value().item();
  tape.backward(loss);
  std::vector<Tensor<T>> grads;
  for (auto v : vars) grads.push_back(tape.grad(v));
  return grads;
}

}  // namespace

TEST(BiasedScanBackward, MatchesNaiveTapeAcrossTiles) {
  std::mt19937_64 rng(26);
  const AttentionConfig cfg{3, 4, 2, 4, 3};
  const std::size_t nq = 11, nk = 9;
  const std::vector<Tensor<float>> inputs = {
      random_tensor<float>({nq, 8}, rng), random_tensor<float>({nk, 8}, rng), random_tensor<float>({nk, 6}, rng),
      random_tensor<float>({2, 5}, rng, 0, 0.5), random_tensor<float>({2, 5}, rng, -1, 2)};
  auto qf = std::make_shared<const Tensor<float>>(random_tensor<float>({nq, 2}, rng, -2, 2));
  auto kf = std::make_shared<const Tensor<float>>(random_tensor<float>({nk, 2}, rng, -2, 2));
  const std::vector<Segment> segs = {Segment{0, 5, 0, 4}, Segment{5, 6, 0, 9}};
  const auto w = random_tensor<float>({nq, 6}, rng);
  float l_scan = 0, l_naive = 0;
  const auto scan = tape_gradients(AttentionImpl::scan, inputs, qf, kf, segs, cfg, w, &l_scan);
  const auto naive = tape_gradients(AttentionImpl::naive, inputs, qf, kf, segs, cfg, w, &l_naive);
  EXPECT_NEAR(l_scan, l_naive, 1e-5);
  for (std::size_t i = 0; i < scan.size(); ++i) EXPECT_LE(max_abs_diff(scan[i], naive[i]), 1e-5f) << "input " << i;
}

TEST(BiasedScanBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(28);
  const AttentionConfig cfg{2, 3, 2, 3, 2};
  const std::size_t nq = 7, nk = 8;
  ParamStore<double> store;
  store.add("q", random_tensor<double>({nq, 6}, rng));
  store.add("k", random_tensor<double>({nk, 6}, rng));
  store.add("v", random_tensor<double>({nk, 4}, rng));
  store.add("a", random_tensor<double>({2, 3}, rng, 0, 0.5));
  store.add("b_raw", random_tensor<double>({2, 3}, rng, -1, 2));
  auto qf = std::make_shared<const Tensor<double>>(random_tensor<double>({nq, 2}, rng, -2, 2));
  auto kf = std::make_shared<const Tensor<double>>(random_tensor<double>({nk, 2}, rng, -2, 2));
  const auto w = random_tensor<double>({nq, 4}, rng);
  const auto report = bsatnp::testing::check_param_gradients(store, [&](Tape<double>& t, ParamStore<double>& s) {
    const AttentionBias<double> bias[] = {{BiasKind::rbf, qf, kf, t.param(s, "a"), t.param(s, "b_raw")}};
    auto out = scan_attention(t.param(s, "q"), t.param(s, "k"), t.param(s, "v"),
                              std::span<const AttentionBias<double>>(bias), {}, cfg);
    return sum(mul(out, t.constant(w)));
  });
  EXPECT_EQ(report.passed, report.coordinates) << "worst " << report.worst;
}

namespace {

AttentionParams<float> bind_params(Tape<float>& tape, ParamStore<float>& store) {
  return {tape.param(store, "wq"), tape.param(store, "bq"), tape.param(store, "wk"), tape.param(store, "bk"),
          tape.param(store, "wv"), tape.param(store, "bv"), tape.param(store, "wo"), tape.param(store, "bo")};
}

ParamStore<float> projection_store(std::size_t d_model, std::size_t width, std::mt19937_64& rng) {
  ParamStore<float> store;
  for (const char* n : {"wq", "wk", "wv"}) store.add(n, random_tensor<float>({d_model, width}, rng, -0.3, 0.3));
  for (const char* n : {"bq", "bk", "bv"}) store.add(n, random_tensor<float>({width}, rng, -0.1, 0.1));
  store.add("wo", random_tensor<float>({width, d_model}, rng, -0.3, 0.3));
  store.add("bo", random_tensor<float>({d_model}, rng, -0.1, 0.1));
  return store;
}

}  // namespace

TEST(MultiHeadAttention, SingleHeadIsOneScanPlusProjections) {
  std::mt19937_64 rng(30);
  auto store = projection_store(8, 8, rng);
  const auto eq = random_tensor<float>({5, 8}, rng), ekv = random_tensor<float>({6, 8}, rng);
  Tape<float> tape(GradMode::disabled);
  const AttentionConfig cfg{64, 64, 1, 8, 8};
  const auto out = multi_head_attention(tape.constant(eq), tape.constant(ekv), bind_params(tape, store),
                                        std::span<const AttentionBias<float>>{}, {}, cfg)
                       .value();
  auto proj = [&](const Tensor<float>& x, const char* w, const char* b) {
    return linear(tape.constant(x), tape.param(store, w), tape.param(store, b)).value();
  };
  const auto att = naive_biased_attention(proj(eq, "wq", "bq"), proj(ekv, "wk", "bk"), proj(ekv, "wv", "bv"),
                                          Tensor<float>({5, 6}));
  EXPECT_LE(max_abs_diff(out, proj(att, "wo", "bo")), 1e-6f);
}

TEST(MultiHeadAttention, OutputShapeAndHeadLoop) {
  std::mt19937_64 rng(32);
  auto store = projection_store(64, 128, rng);
  const AttentionConfig cfg{16, 16, 4, 32, 32};
  const auto eq = random_tensor<float>({20, 64}, rng), ekv = random_tensor<float>({30, 64}, rng);
  Tape<float> tape(GradMode::disabled);
  const auto full = multi_head_attention(tape.constant(eq), tape.constant(ekv), bind_params(tape, store),
                                         std::span<const AttentionBias<float>>{}, {}, cfg)
                        .value();
  ASSERT_EQ(full.shape(), (Shape{20, 64}));
  auto proj = [&](const Tensor<float>& x, const char* w, const char* b) {
    return linear(tape.constant(x), tape.param(store, w), tape.param(store, b)).value();
  };
  const auto q = proj(eq, "wq", "bq"), k = proj(ekv, "wk", "bk"), v = proj(ekv, "wv", "bv");
  Tensor<float> heads({20, 128});
  for (std::size_t h = 0; h < 4; ++h) {
    auto cols = [h](const Tensor<float>& x) {
      Tensor<float> out({x.rows(), 32});
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t c = 0; c < 32; ++c) out(i, c) = x(i, h * 32 + c);
      return out;
    };
    const auto o = naive_biased_attention(cols(q), cols(k), cols(v), Tensor<float>({20, 30}));
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t c = 0; c < 32; ++c) heads(i, h * 32 + c) = o(i, c);
  }
  EXPECT_LE(max_abs_diff(full, proj(heads, "wo", "bo")), 1e-6f);
}

TEST(MultiHeadAttention, ProjectionWidthMismatchIsConfigError) {
  std::mt19937_64 rng(34);
  auto store = projection_store(8, 12, rng);
  Tape<float> tape(GradMode::disabled);
  const auto e = tape.constant(random_tensor<float>({3, 8}, rng));
  EXPECT_THROW(multi_head_attention(e, e, bind_params(tape, store), std::span<const AttentionBias<float>>{}, {},
                                    AttentionConfig{64, 64, 4, 4, 4}),
               ConfigError);
}
