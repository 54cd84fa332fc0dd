#include "ecd/ecdf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ecd {

namespace {

constexpr char kMagic[4] = {'E', 'C', 'D', 'F'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  static_assert(std::is_unsigned_v<T>);
  if (pos + sizeof(T) > in.size()) throw FormatError("ECDF: truncated file");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<T>(in[pos + i]) << (8 * i));
  }
  pos += sizeof(T);
  return value;
}

}  // namespace

std::size_t EcdfArray::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::uint8_t> encode_ecdf(const EcdfArray& array) {
  if (array.dims.size() > 255) throw FormatError("ECDF: too many dims");
  if (array.values.size() != array.element_count()) {
    throw FormatError(detail::concat("ECDF: ", array.values.size(),
                                     " values for ", array.element_count(),
                                     " elements"));
  }
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kEcdfVersion);
  out.push_back(static_cast<std::uint8_t>(array.dtype));
  out.push_back(static_cast<std::uint8_t>(array.dims.size()));
  for (auto d : array.dims) put_le<std::uint32_t>(out, d);
  const std::size_t width = array.dtype == DType::kF32 ? 4 : 8;
  out.reserve(out.size() + width * array.values.size());
  for (double v : array.values) {
    if (array.dtype == DType::kF32) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

EcdfArray decode_ecdf(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("ECDF: bad magic");
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kEcdfVersion) {
    throw FormatError(detail::concat("ECDF: unsupported version ", version));
  }
  EcdfArray a;
  const auto dtype = get_le<std::uint8_t>(bytes, pos);
  if (dtype > 1) throw FormatError(detail::concat("ECDF: unknown dtype ", int(dtype)));
  a.dtype = static_cast<DType>(dtype);
  const auto ndim = get_le<std::uint8_t>(bytes, pos);
  for (int i = 0; i < ndim; ++i) a.dims.push_back(get_le<std::uint32_t>(bytes, pos));
  const std::size_t n = a.element_count();
  const std::size_t width = a.dtype == DType::kF32 ? 4 : 8;
  if (bytes.size() - pos != n * width) {
    throw FormatError(detail::concat("ECDF: payload is ", bytes.size() - pos,
                                     " bytes, expected ", n * width));
  }
  a.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (a.dtype == DType::kF32) {
      a.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos));
    } else {
      a.values[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
    }
  }
  return a;
}

void write_ecdf(const std::filesystem::path& path, const EcdfArray& array) {
  const auto bytes = encode_ecdf(array);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

EcdfArray read_ecdf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_ecdf(bytes);
}

}  // namespace ecd
