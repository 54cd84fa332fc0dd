// ECDF: the little-endian binary container used for every dense array the
// tools write (feature maps, descriptors, parameter blocks, probabilities).
//
//   bytes 0..3   "ECDF"
//   u32          version (1)
//   u8           dtype   (0 = f32, 1 = f64)
//   u8           ndim
//   u32 * ndim   dims, outermost first
//   payload      prod(dims) values, little-endian
//
// Feature maps are stored as dims {d, H, W} with channel-major payload.
#pragma once

#include "ecd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ecd {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

inline constexpr std::uint32_t kEcdfVersion = 1;

struct EcdfArray {
  DType dtype = DType::kF32;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t element_count() const;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_ecdf(const EcdfArray& array);
EcdfArray decode_ecdf(const std::vector<std::uint8_t>& bytes);

void write_ecdf(const std::filesystem::path& path, const EcdfArray& array);
EcdfArray read_ecdf(const std::filesystem::path& path);

template <typename Scalar>
EcdfArray to_ecdf(const FeatureMap<Scalar>& f, DType dtype = DType::kF32) {
  EcdfArray a;
  a.dtype = dtype;
  a.dims = {static_cast<std::uint32_t>(f.channels()),
            static_cast<std::uint32_t>(f.height()),
            static_cast<std::uint32_t>(f.width())};
  a.values.assign(f.data(), f.data() + f.size());
  return a;
}

template <typename Scalar>
FeatureMap<Scalar> feature_map_from_ecdf(const EcdfArray& a) {
  if (a.dims.size() != 3) {
    throw FormatError(detail::concat("feature map needs 3 dims, file has ",
                                     a.dims.size()));
  }
  FeatureMap<Scalar> f(a.dims[0], a.dims[1], a.dims[2]);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    f.data()[i] = static_cast<Scalar>(a.values[i]);
  }
  return f;
}

// Matrices are written row-major as dims {rows, cols}; vectors as {n}.
template <typename Derived>
EcdfArray matrix_to_ecdf(const Eigen::MatrixBase<Derived>& m,
                         DType dtype = DType::kF32) {
  EcdfArray a;
  a.dtype = dtype;
  if (m.cols() == 1) {
    a.dims = {static_cast<std::uint32_t>(m.rows())};
  } else {
    a.dims = {static_cast<std::uint32_t>(m.rows()),
              static_cast<std::uint32_t>(m.cols())};
  }
  a.values.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      a.values.push_back(static_cast<double>(m(r, c)));
    }
  }
  return a;
}

template <typename Scalar>
Mat<Scalar> matrix_from_ecdf(const EcdfArray& a) {
  if (a.dims.empty() || a.dims.size() > 2) {
    throw FormatError("matrix block must have 1 or 2 dims");
  }
  const Index rows = a.dims[0];
  const Index cols = a.dims.size() == 2 ? a.dims[1] : 1;
  Mat<Scalar> m(rows, cols);
  std::size_t i = 0;
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      m(r, c) = static_cast<Scalar>(a.values[i++]);
    }
  }
  return m;
}

template <typename Scalar>
void save_feature_map(const std::filesystem::path& path,
                      const FeatureMap<Scalar>& f) {
  write_ecdf(path, to_ecdf(f));
}

template <typename Scalar>
FeatureMap<Scalar> load_feature_map(const std::filesystem::path& path) {
  return feature_map_from_ecdf<Scalar>(read_ecdf(path));
}

}  // namespace ecd
