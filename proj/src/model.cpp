#include "xrefine/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

// Weight file layout (all integers little-endian):
//   magic "XRFW" | version u32 | config block | tensor count u32 | tensors
// config block:
//   patch_size, embed_spatial, channels_mid, channels_out, attention_blocks,
//   heads, refine_mode (0 both / 1 second-only), each u32,
//   then softargmax_temperature and offset_scale as f64.
// per tensor:
//   name length u32 | name bytes | dtype u32 (0 = f32) | rank u32 |
//   dims u64 * rank | payload f32 * numel.

namespace xrefine {
namespace {

constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "weight file io assumes a little-endian host");

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw DataError("weight file truncated");
  return v;
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw DataError("weight file truncated");
  return v;
}

double read_f64(std::istream& is) {
  double v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw DataError("weight file truncated");
  return v;
}

}  // namespace

void save_weights(const ModelWeights<float>& weights, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open weight file for writing: " + path.string());
  os.write("XRFW", 4);
  write_u32(os, kVersion);
  const ModelConfig& c = weights.config;
  write_u32(os, static_cast<uint32_t>(c.patch_size));
  write_u32(os, static_cast<uint32_t>(c.embed_spatial));
  write_u32(os, static_cast<uint32_t>(c.channels_mid));
  write_u32(os, static_cast<uint32_t>(c.channels_out));
  write_u32(os, static_cast<uint32_t>(c.attention_blocks));
  write_u32(os, static_cast<uint32_t>(c.heads));
  write_u32(os, c.refine_mode == RefineMode::SecondOnly ? 1u : 0u);
  write_f64(os, c.softargmax_temperature);
  write_f64(os, c.offset_scale);

  uint32_t count = 0;
  weights.for_each_param([&count](const std::string&, const Tensor<float>&) { ++count; });
  write_u32(os, count);
  weights.for_each_param([&os](const std::string& name, const Tensor<float>& t) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, 0);  // dtype f32
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape) write_u64(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  });
  if (!os) throw DataError("failed writing weight file: " + path.string());
}

ModelWeights<float> load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open weight file: " + path.string());
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, "XRFW", 4) != 0)
    throw DataError("not a weight file (bad magic): " + path.string());
  const uint32_t version = read_u32(is);
  if (version != kVersion)
    throw DataError("unsupported weight file version " + std::to_string(version));

  ModelConfig c;
  c.patch_size = static_cast<int>(read_u32(is));
  c.embed_spatial = static_cast<int>(read_u32(is));
  c.channels_mid = static_cast<int>(read_u32(is));
  c.channels_out = static_cast<int>(read_u32(is));
  c.attention_blocks = static_cast<int>(read_u32(is));
  c.heads = static_cast<int>(read_u32(is));
  const uint32_t mode = read_u32(is);
  if (mode > 1) throw DataError("weight file has unknown refine mode");
  c.refine_mode = mode == 1 ? RefineMode::SecondOnly : RefineMode::Both;
  c.softargmax_temperature = read_f64(is);
  c.offset_scale = read_f64(is);
  c.validate();

  ModelWeights<float> w = ModelWeights<float>::zeros_like(c);
  const uint32_t count = read_u32(is);
  uint32_t expected = 0;
  w.for_each_param([&expected](const std::string&, const Tensor<float>&) { ++expected; });
  if (count != expected)
    throw DataError("weight file tensor count mismatch: have " + std::to_string(count) +
                    ", config needs " + std::to_string(expected));

  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_u32(is);
    if (name_len > 4096) throw DataError("weight file tensor name too long");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError("weight file truncated");
    const uint32_t dtype = read_u32(is);
    if (dtype != 0) throw DataError("weight tensor '" + name + "' has unsupported dtype");
    const uint32_t rank = read_u32(is);
    if (rank > 8) throw DataError("weight tensor '" + name + "' has implausible rank");
    std::vector<int> dims(rank);
    for (uint32_t d = 0; d < rank; ++d) dims[d] = static_cast<int>(read_u64(is));

    bool matched = false;
    w.for_each_param([&](const std::string& pname, Tensor<float>& t) {
      if (pname != name) return;
      matched = true;
      if (t.shape != dims)
        throw DataError("weight tensor '" + name + "' has unexpected shape");
      if (!is.read(reinterpret_cast<char*>(t.data.data()),
                   static_cast<std::streamsize>(t.data.size() * sizeof(float))))
        throw DataError("weight file truncated");
    });
    if (!matched) throw DataError("weight file has unknown tensor '" + name + "'");
  }
  return w;
}

ModelWeights<float> load_weights(const std::filesystem::path& path, const ModelConfig& expected) {
  ModelWeights<float> w = load_weights(path);
  if (!(w.config == expected))
    throw DataError("weight file config does not match the requested model: " + path.string());
  return w;
}

}  // namespace xrefine
