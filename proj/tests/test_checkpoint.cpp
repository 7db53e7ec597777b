#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "bsatnp/checkpoint.hpp"

using namespace bsatnp;

namespace {

std::string serialized(const ModelConfig& m, const ParamStore<float>& p) {
  std::ostringstream out;
  write_checkpoint(out, m, p);
  return out.str();
}

}  // namespace

TEST(Checkpoint, BitExactRoundTrip) {
  const ModelConfig m = ModelConfig::desk();
  auto p = init_params<float>(m, 11);
  // values whose bits a lossy text path would not survive
  p.value(0)[0] = std::nextafter(1.0f, 2.0f);
  p.value(0)[1] = -0.0f;
  p.value(0)[2] = 1e-40f;
  std::istringstream in(serialized(m, p));
  const auto ck = read_checkpoint(in);
  EXPECT_EQ(ck.model, m);
  ASSERT_EQ(ck.params.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(ck.params.name(i), p.name(i));
    ASSERT_EQ(ck.params.value(i).shape(), p.value(i).shape());
    EXPECT_EQ(std::memcmp(ck.params.value(i).data(), p.value(i).data(), p.value(i).size() * sizeof(float)), 0);
  }
  EXPECT_EQ(serialized(ck.model, ck.params), serialized(m, p));
}

TEST(Checkpoint, StartsWithMagic) {
  const ModelConfig m = ModelConfig::desk();
  EXPECT_EQ(serialized(m, init_params<float>(m, 1)).rfind("BSATNP1\n", 0), 0u);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const ModelConfig m = ModelConfig::desk();
  const std::string good = serialized(m, init_params<float>(m, 2));
  {
    std::string bad = good;
    bad[0] = 'X';
    std::istringstream in(bad);
    EXPECT_THROW(read_checkpoint(in), FormatError);
  }
  {
    std::istringstream in(good.substr(0, good.size() - 3));
    EXPECT_THROW(read_checkpoint(in), FormatError);
  }
  {
    std::istringstream in(std::string{});
    EXPECT_THROW(read_checkpoint(in), FormatError);
  }
}

TEST(Checkpoint, RejectsParametersThatDoNotMatchConfig) {
  const ModelConfig m = ModelConfig::desk();
  ModelConfig other = m;
  other.layers = 2;
  std::istringstream in(serialized(m, init_params<float>(other, 3)));
  EXPECT_THROW(read_checkpoint(in), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "bsatnp_ckpt_test.ckpt").string();
  const ModelConfig m = ModelConfig::desk();
  const auto p = init_params<float>(m, 4);
  save_checkpoint(path, m, p);
  const auto ck = load_checkpoint(path);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(ck.params.value(i), p.value(i));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), FormatError);
}
