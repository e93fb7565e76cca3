#include "align/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

namespace align {
namespace {

constexpr char kMagic[4] = {'B', 'T', 'S', 'R'};

template <typename UInt>
void put_le(std::vector<unsigned char>& out, UInt v)
{
  for (std::size_t i = 0; i < sizeof(UInt); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename UInt>
UInt get_le(const unsigned char* p)
{
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(p[i]) << (8 * i);
  return v;
}

std::uint64_t product(const std::vector<std::uint64_t>& dims)
{
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void check_dims(const std::vector<std::uint64_t>& dims)
{
  if (dims.empty() || dims.size() > 4) throw TensorError(TensorError::Kind::Shape, "tensor rank must be in [1, 4], got " + std::to_string(dims.size()));
  for (auto d : dims) {
    if (d == 0) throw TensorError(TensorError::Kind::Shape, "tensor dimensions must be positive");
  }
}

std::string describe(const std::filesystem::path& path) { return "'" + path.string() + "'"; }

struct ParsedHeader {
  TensorHeader header;
  std::size_t header_bytes = 0;
};

ParsedHeader parse_header(std::istream& in, const std::filesystem::path& path)
{
  unsigned char fixed[10];
  if (!in.read(reinterpret_cast<char*>(fixed), sizeof(fixed))) throw TensorError(TensorError::Kind::Truncated, "truncated header in " + describe(path));
  if (std::memcmp(fixed, kMagic, 4) != 0) throw TensorError(TensorError::Kind::BadMagic, "bad magic in " + describe(path));
  const auto version = get_le<std::uint32_t>(fixed + 4);
  if (version != kTensorVersion) throw TensorError(TensorError::Kind::Unsupported, "unsupported tensor version " + std::to_string(version) + " in " + describe(path));
  const unsigned dtype = fixed[8];
  if (dtype != 1 && dtype != 2) throw TensorError(TensorError::Kind::Unsupported, "unsupported dtype code " + std::to_string(dtype) + " in " + describe(path));
  const unsigned ndim = fixed[9];
  if (ndim < 1 || ndim > 4) throw TensorError(TensorError::Kind::Unsupported, "unsupported rank " + std::to_string(ndim) + " in " + describe(path));

  ParsedHeader parsed;
  parsed.header.dtype = static_cast<DType>(dtype);
  std::vector<unsigned char> raw(8 * ndim);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw TensorError(TensorError::Kind::Truncated, "truncated header in " + describe(path));
  for (unsigned i = 0; i < ndim; ++i) parsed.header.dims.push_back(get_le<std::uint64_t>(raw.data() + 8 * i));
  check_dims(parsed.header.dims);
  parsed.header_bytes = sizeof(fixed) + raw.size();
  return parsed;
}

void put_header(std::vector<unsigned char>& bytes, DType dtype, const std::vector<std::uint64_t>& dims)
{
  bytes.insert(bytes.end(), kMagic, kMagic + 4);
  put_le<std::uint32_t>(bytes, kTensorVersion);
  bytes.push_back(static_cast<unsigned char>(dtype));
  bytes.push_back(static_cast<unsigned char>(dims.size()));
  for (auto d : dims) put_le<std::uint64_t>(bytes, d);
}

void put_value(std::vector<unsigned char>& bytes, DType dtype, double v)
{
  if (dtype == DType::Float32) {
    put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  } else {
    put_le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(v));
  }
}

}  // namespace

std::uint64_t TensorHeader::element_count() const noexcept { return product(dims); }

void write_tensor(const std::filesystem::path& path, DType dtype, const std::vector<std::uint64_t>& dims,
                  const std::vector<double>& values)
{
  check_dims(dims);
  if (product(dims) != values.size())
    throw TensorError(TensorError::Kind::Shape, "value count " + std::to_string(values.size()) + " does not match dims product " +
                      std::to_string(product(dims)));

  std::vector<unsigned char> bytes;
  const std::size_t esize = dtype == DType::Float32 ? 4 : 8;
  bytes.reserve(10 + 8 * dims.size() + esize * values.size());
  put_header(bytes, dtype, dims);
  for (double v : values) put_value(bytes, dtype, v);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorError(TensorError::Kind::Io, "cannot open " + describe(path) + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorError(TensorError::Kind::Io, "write failed for " + describe(path));
}

TensorHeader read_tensor_header(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError(TensorError::Kind::Io, "cannot open " + describe(path));
  const TensorHeader h = parse_header(in, path).header;
  const std::uint64_t expected = 10 + 8 * h.dims.size() + h.element_count() * h.element_size();
  const std::uint64_t actual = std::filesystem::file_size(path);
  if (actual < expected)
    throw TensorError(TensorError::Kind::Truncated, "truncated payload in " + describe(path) + ": expected " +
                                                        std::to_string(expected) + " bytes, file has " + std::to_string(actual));
  if (actual > expected) throw TensorError(TensorError::Kind::Truncated, "trailing bytes after payload in " + describe(path));
  return h;
}

Tensor read_tensor(const std::filesystem::path& path, ReadOptions options)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError(TensorError::Kind::Io, "cannot open " + describe(path));
  const ParsedHeader parsed = parse_header(in, path);

  const std::uint64_t count = parsed.header.element_count();
  const std::size_t esize = parsed.header.element_size();
  std::vector<unsigned char> payload(count * esize);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size())
    throw TensorError(TensorError::Kind::Truncated, "truncated payload in " + describe(path) + ": expected " + std::to_string(payload.size()) +
                      " bytes, got " + std::to_string(in.gcount()));
  if (in.peek() != std::char_traits<char>::eof()) throw TensorError(TensorError::Kind::Truncated, "trailing bytes after payload in " + describe(path));

  Tensor t;
  t.dtype = parsed.header.dtype;
  t.dims = parsed.header.dims;
  t.values.resize(count);
  const unsigned char* p = payload.data();
  for (std::uint64_t i = 0; i < count; ++i, p += esize) {
    const double v = esize == 4 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                                : std::bit_cast<double>(get_le<std::uint64_t>(p));
    if (options.require_finite && !std::isfinite(v))
      throw TensorError(TensorError::Kind::NonFinite, "non-finite value at element " + std::to_string(i) + " in " + describe(path));
    t.values[i] = v;
  }
  return t;
}

void write_matrix(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& m, DType dtype)
{
  const std::vector<std::uint64_t> dims{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  check_dims(dims);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorError(TensorError::Kind::Io, "cannot open " + describe(path) + " for writing");
  std::vector<unsigned char> bytes;
  put_header(bytes, dtype, dims);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_value(bytes, dtype, m(i, j));
    if (bytes.size() >= (1U << 20) || i + 1 == m.rows()) {
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      bytes.clear();
    }
  }
  if (!out) throw TensorError(TensorError::Kind::Io, "write failed for " + describe(path));
}

Eigen::MatrixXd read_matrix(const std::filesystem::path& path, ReadOptions options)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError(TensorError::Kind::Io, "cannot open " + describe(path));
  const ParsedHeader parsed = parse_header(in, path);
  if (parsed.header.dims.size() != 2)
    throw TensorError(TensorError::Kind::Shape, "expected a 2-D tensor in " + describe(path) + ", got rank " +
                                                    std::to_string(parsed.header.dims.size()));
  const auto rows = static_cast<Eigen::Index>(parsed.header.dims[0]);
  const auto cols = static_cast<Eigen::Index>(parsed.header.dims[1]);
  const std::size_t esize = parsed.header.element_size();
  Eigen::MatrixXd m(rows, cols);
  std::vector<unsigned char> row(static_cast<std::size_t>(cols) * esize);
  for (Eigen::Index i = 0; i < rows; ++i) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (static_cast<std::size_t>(in.gcount()) != row.size())
      throw TensorError(TensorError::Kind::Truncated, "truncated payload in " + describe(path) + " at row " + std::to_string(i));
    const unsigned char* p = row.data();
    for (Eigen::Index j = 0; j < cols; ++j, p += esize) {
      const double v = esize == 4 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                                  : std::bit_cast<double>(get_le<std::uint64_t>(p));
      if (options.require_finite && !std::isfinite(v))
        throw TensorError(TensorError::Kind::NonFinite, "non-finite value at element " +
                                                            std::to_string(i * cols + j) + " in " + describe(path));
      m(i, j) = v;
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw TensorError(TensorError::Kind::Truncated, "trailing bytes after payload in " + describe(path));
  return m;
}

Eigen::MatrixXd to_matrix(const Tensor& t)
{
  if (t.dims.size() != 2) throw TensorError(TensorError::Kind::Shape, "expected a 2-D tensor, got rank " + std::to_string(t.dims.size()));
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMajor>(t.values.data(), static_cast<Eigen::Index>(t.dims[0]),
                                    static_cast<Eigen::Index>(t.dims[1]));
}

Tensor from_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m, DType dtype)
{
  Tensor t;
  t.dtype = dtype;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.values.resize(static_cast<std::size_t>(m.size()));
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<RowMajor>(t.values.data(), m.rows(), m.cols()) = m;
  return t;
}

Eigen::VectorXd to_vector(const Tensor& t)
{
  if (t.dims.size() != 1) throw TensorError(TensorError::Kind::Shape, "expected a 1-D tensor, got rank " + std::to_string(t.dims.size()));
  return Eigen::Map<const Eigen::VectorXd>(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
}

Tensor from_vector(const Eigen::Ref<const Eigen::VectorXd>& v, DType dtype)
{
  Tensor t;
  t.dtype = dtype;
  t.dims = {static_cast<std::uint64_t>(v.size())};
  t.values.assign(v.data(), v.data() + v.size());
  return t;
}

MapVolume to_map_volume(const Tensor& t)
{
  if (t.dims.size() != 3) throw TensorError(TensorError::Kind::Shape, "expected a 3-D volume, got rank " + std::to_string(t.dims.size()));
  MapVolume v;
  v.dims = {static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2])};
  v.data = Eigen::Map<const Eigen::VectorXd>(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
  return v;
}

LabelVolume to_label_volume(const Tensor& t)
{
  const MapVolume m = to_map_volume(t);
  LabelVolume v;
  v.dims = m.dims;
  v.data.resize(m.data.size());
  for (Eigen::Index i = 0; i < m.data.size(); ++i) {
    const double x = m.data(i);
    if (x != std::floor(x)) throw TensorError(TensorError::Kind::Shape, "atlas label " + std::to_string(x) + " is not an integer");
    v.data(i) = static_cast<int>(x);
  }
  return v;
}

}  // namespace align
