#include "mixttt/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "mixttt/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor container writes native doubles and assumes little-endian");
static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559);

namespace mixttt {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'T', 'T'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(std::string("tensor file truncated while reading ") + what);
  return v;
}

}  // namespace

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kMagic, 4);
  write_pod<std::uint16_t>(os, kTensorFormatVersion);
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > 0xffff) throw InputError("tensor name too long: " + t.name);
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.value.data()),
             static_cast<std::streamsize>(t.value.numel() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing tensor stream");
}

std::vector<NamedTensor> read_tensors(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, not a MTTT tensor file");
  const auto version = read_pod<std::uint16_t>(is, "version");
  if (version != kTensorFormatVersion)
    throw FormatError("unsupported tensor format version " + std::to_string(version));

  std::vector<NamedTensor> out;
  while (true) {
    std::uint16_t name_len;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) throw FormatError("tensor file truncated while reading name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("tensor file truncated while reading name");
    const auto rank = read_pod<std::uint32_t>(is, "dim count");
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = read_pod<std::uint32_t>(is, "dims");
      numel *= shape[i];
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(numel * sizeof(double)));
    if (static_cast<std::size_t>(is.gcount()) != numel * sizeof(double))
      throw FormatError("tensor file truncated in payload of \"" + name + "\"");
    out.push_back(NamedTensor{std::move(name), std::move(t)});
  }
  return out;
}

void save_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  write_tensors(f, tensors);
  if (!f) throw IoError("write failed: " + path);
}

std::vector<NamedTensor> load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  return read_tensors(f);
}

std::string tensors_to_bytes(const std::vector<NamedTensor>& tensors) {
  std::ostringstream os(std::ios::binary);
  write_tensors(os, tensors);
  return os.str();
}

const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

}  // namespace mixttt
