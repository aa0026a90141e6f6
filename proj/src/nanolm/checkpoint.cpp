#include "io/binary.hpp"
#include "msif/nanolm.hpp"

namespace msif::nanolm {

namespace {
constexpr std::string_view kMagic = "MSIFCKPT";
constexpr std::uint32_t kVersion = 1;
}  // namespace

// Layout (little-endian): magic, version, 9 × i32 config, u8 stage, u64 seed,
// u64 number of doubles, doubles in Parameters::tensors() order, u64 checksum.
void save_checkpoint(const Parameters& params, const std::filesystem::path& path) {
  const auto& c = params.config;
  io::BinaryWriter w;
  w.put_bytes(kMagic);
  w.put(kVersion);
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.head_dim, c.d_ff, c.max_seq_len,
                static_cast<int>(c.head_mode), c.n_classes}) {
    w.put(static_cast<std::int32_t>(v));
  }
  w.put(static_cast<std::uint8_t>(params.stage));
  w.put(params.seed);
  std::uint64_t n = 0;
  for (auto t : params.tensors()) n += t.size();
  w.put(n);
  for (auto t : params.tensors()) w.put_doubles(t);
  w.write_file(path);
}

Parameters load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  if (r.get_bytes(kMagic.size()) != kMagic) throw InputError("not a checkpoint file: " + path.string());
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(v) + " in " + path.string());
  }
  ModelConfig c;
  c.vocab_size = r.get<std::int32_t>();
  c.d_model = r.get<std::int32_t>();
  c.n_layers = r.get<std::int32_t>();
  c.n_heads = r.get<std::int32_t>();
  c.head_dim = r.get<std::int32_t>();
  c.d_ff = r.get<std::int32_t>();
  c.max_seq_len = r.get<std::int32_t>();
  c.head_mode = static_cast<HeadMode>(r.get<std::int32_t>());
  c.n_classes = r.get<std::int32_t>();
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw InputError(std::string("checkpoint holds an invalid config: ") + e.what());
  }
  Parameters p = Parameters::zeros(c);
  const auto stage = r.get<std::uint8_t>();
  if (stage > 1) throw InputError("checkpoint has an invalid stage tag");
  p.stage = static_cast<Stage>(stage);
  p.seed = r.get<std::uint64_t>();
  std::uint64_t expected = 0;
  for (auto t : p.tensors()) expected += t.size();
  if (r.get<std::uint64_t>() != expected) throw InputError("checkpoint parameter count does not match its config");
  for (auto t : p.tensors()) r.get_doubles(t);
  if (!r.at_end()) throw InputError("trailing bytes in checkpoint " + path.string());
  return p;
}

}  // namespace msif::nanolm
