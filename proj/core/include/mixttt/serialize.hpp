#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mixttt/tensor.hpp"

namespace mixttt {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Binary tensor container ("MTTT" files). Layout, all little-endian:
//   magic "MTTT" | version u16 | repeated tensor records until EOF
//   record: name-length u16 | name bytes | dim-count u32 | dims u32 each |
//           float64 payload, row-major.
inline constexpr std::uint16_t kTensorFormatVersion = 1;

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& is);

void save_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensor_file(const std::string& path);

// Serialized image of all tensors to an in-memory byte string (used by
// bit-exactness checks).
std::string tensors_to_bytes(const std::vector<NamedTensor>& tensors);

const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace mixttt
