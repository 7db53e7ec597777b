#include "bsatnp/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include "bsatnp/binary_io.hpp"
#include "bsatnp/config.hpp"

namespace bsatnp {

namespace {
const std::string kMagic = "BSATNP1\n";
constexpr std::uint8_t kF32 = 1;
}  // namespace

void write_checkpoint(std::ostream& out, const ModelConfig& model, const ParamStore<float>& params) {
  using namespace binio;
  out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  put_string(out, model_config_to_text(model));
  put_uint<std::uint64_t>(out, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_uint<std::uint8_t>(out, kF32);
    const auto& shape = params.value(i).shape();
    put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_uint<std::uint64_t>(out, d);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (float v : params.value(i).values()) put_f32(out, v);
  }
  if (!out) throw FormatError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  using namespace binio;
  expect_magic(in, kMagic, "checkpoint");
  Checkpoint ck;
  ck.model = parse_model_config(get_string(in, "model config"));
  ck.model.validate();
  const ParamStore<float> layout = init_params<float>(ck.model, 0);

  const auto count = get_uint<std::uint64_t>(in, "parameter count");
  if (count != layout.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, its config expects " +
                      std::to_string(layout.size()));
  }
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_uint<std::uint32_t>(in, "parameter name length");
    if (len > 4096) throw FormatError("implausible parameter name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated file reading parameter name");
    if (get_uint<std::uint8_t>(in, "dtype") != kF32) throw FormatError("parameter '" + name + "' is not float32");
    const auto rank = get_uint<std::uint32_t>(in, "rank");
    if (rank > 8) throw FormatError("implausible rank for parameter '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = get_uint<std::uint64_t>(in, "dimension");
    if (name != layout.name(i) || shape != layout.value(i).shape()) {
      throw FormatError("checkpoint parameter '" + name + "' " + shape_string(shape) + " does not match expected '" +
                        layout.name(i) + "' " + shape_string(layout.value(i).shape()));
    }
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : manifest) {
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = get_f32(in, "parameter payload");
    ck.params.add(name, std::move(t));
  }
  return ck;
}

void save_checkpoint(const std::string& path, const ModelConfig& model, const ParamStore<float>& params) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + tmp + "' for writing");
    write_checkpoint(f, model, params);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move checkpoint into '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(f);
}

}  // namespace bsatnp
