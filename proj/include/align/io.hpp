#ifndef ALIGN_IO_HPP
#define ALIGN_IO_HPP

// Tensor files ("BTSR").
//
//   offset  size        field
//   0       4           magic "BTSR"
//   4       4           version, uint32 LE (= 1)
//   8       1           dtype, uint8 (1 = float32, 2 = float64)
//   9       1           ndim, uint8 in [1, 4]
//   10      8 * ndim    dims, uint64 LE each
//   ...     esize*prod  payload, row-major, LE
//
// Values are held as double in memory; float32 files are widened on read and
// narrowed on write.

#include "align/types.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace align {

class TensorError : public std::runtime_error {
public:
  enum class Kind { Io, BadMagic, Unsupported, Truncated, NonFinite, Shape };

  TensorError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

private:
  Kind kind_;
};

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

inline constexpr std::uint32_t kTensorVersion = 1;

struct TensorHeader {
  DType dtype = DType::Float64;
  std::vector<std::uint64_t> dims;

  std::uint64_t element_count() const noexcept;
  std::size_t element_size() const noexcept { return dtype == DType::Float32 ? 4 : 8; }
};

struct Tensor {
  DType dtype = DType::Float64;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
};

struct ReadOptions {
  /// Reject NaN and infinity in the payload.
  bool require_finite = true;
};

void write_tensor(const std::filesystem::path& path, DType dtype, const std::vector<std::uint64_t>& dims,
                  const std::vector<double>& values);
inline void write_tensor(const std::filesystem::path& path, const Tensor& t)
{
  write_tensor(path, t.dtype, t.dims, t.values);
}

Tensor read_tensor(const std::filesystem::path& path, ReadOptions options = {});
TensorHeader read_tensor_header(const std::filesystem::path& path);

/// Streams a matrix in row-major order without materializing a Tensor.
void write_matrix(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& m,
                  DType dtype = DType::Float64);
/// Reads a 2-D tensor straight into a matrix.
Eigen::MatrixXd read_matrix(const std::filesystem::path& path, ReadOptions options = {});

// Eigen conversions. 2-D tensors map to matrices with the file's row-major order.
Eigen::MatrixXd to_matrix(const Tensor& t);
Tensor from_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m, DType dtype = DType::Float64);
Eigen::VectorXd to_vector(const Tensor& t);
Tensor from_vector(const Eigen::Ref<const Eigen::VectorXd>& v, DType dtype = DType::Float64);

template <typename Scalar>
Tensor from_volume(const Volume<Scalar>& v)
{
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(v.dims.nx), static_cast<std::uint64_t>(v.dims.ny),
            static_cast<std::uint64_t>(v.dims.nz)};
  t.values.resize(static_cast<std::size_t>(v.data.size()));
  for (Eigen::Index i = 0; i < v.data.size(); ++i) t.values[static_cast<std::size_t>(i)] = static_cast<double>(v.data(i));
  return t;
}

MapVolume to_map_volume(const Tensor& t);
/// Atlas volumes store integer labels as floating-point values.
LabelVolume to_label_volume(const Tensor& t);

}  // namespace align

#endif  // ALIGN_IO_HPP
