#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>

#include "xrefine/tensor.hpp"

// Little-endian binary primitives shared by the weight-file and training-state
// serializers.

namespace xrefine::detail {

static_assert(std::endian::native == std::endian::little,
              "binary file io assumes a little-endian host");

inline void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

inline uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw DataError("binary file truncated");
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw DataError("binary file truncated");
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw DataError("binary file truncated");
  return v;
}

inline void write_tensor_f32(std::ostream& os, const Tensor<float>& t) {
  write_u32(os, static_cast<uint32_t>(t.rank()));
  for (int d : t.shape) write_u64(os, static_cast<uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

inline Tensor<float> read_tensor_f32(std::istream& is) {
  const uint32_t rank = read_u32(is);
  if (rank < 1 || rank > 8) throw DataError("binary file has implausible tensor rank");
  std::vector<int> dims(rank);
  for (uint32_t d = 0; d < rank; ++d) dims[d] = static_cast<int>(read_u64(is));
  Tensor<float> t = Tensor<float>::zeros(dims);
  if (!is.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float))))
    throw DataError("binary file truncated");
  return t;
}

}  // namespace xrefine::detail
