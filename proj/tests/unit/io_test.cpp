#include "align/io.hpp"

#include "doctest.h"
#include "reference.hpp"

#include <cstring>
#include <fstream>
#include <limits>

namespace fs = std::filesystem;
using align::DType;
using align::TensorError;

namespace {

TensorError::Kind error_kind(const fs::path& p, align::ReadOptions opts = {})
{
  try {
    align::read_tensor(p, opts);
  } catch (const TensorError& e) {
    return e.kind();
  }
  FAIL("read_tensor accepted " << p);
  return TensorError::Kind::Io;
}

}  // namespace

TEST_CASE("tensor round trip of a 2x2 matrix")
{
  const auto dir = ref::temp_dir("io");
  const auto path = dir / "m.btsr";
  align::write_tensor(path, DType::Float64, {2, 2}, {1, 2, 3, 4});
  const auto t = align::read_tensor(path);
  CHECK(t.dtype == DType::Float64);
  CHECK(t.dims == std::vector<std::uint64_t>{2, 2});
  CHECK(t.values == std::vector<double>{1, 2, 3, 4});
  const Eigen::MatrixXd m = align::to_matrix(t);
  CHECK(m(0, 1) == 2.0);
  CHECK(m(1, 0) == 3.0);
}

TEST_CASE("header layout is little-endian with the documented offsets")
{
  const auto dir = ref::temp_dir("io");
  const auto path = dir / "v.btsr";
  align::write_tensor(path, DType::Float32, {3}, {1.5, -2, 0.25});
  const std::string bytes = ref::slurp(path);
  REQUIRE(bytes.size() == 4 + 4 + 1 + 1 + 8 + 3 * 4);
  CHECK(bytes.substr(0, 4) == "BTSR");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 1);
  CHECK(bytes[9] == 1);
  CHECK(static_cast<unsigned char>(bytes[10]) == 3);
  float first = 0;
  std::memcpy(&first, bytes.data() + 18, 4);
  CHECK(first == 1.5f);
}

TEST_CASE("degenerate shapes are rejected on write")
{
  const auto dir = ref::temp_dir("io");
  CHECK_THROWS_AS(align::write_tensor(dir / "a.btsr", DType::Float64, {0}, {}), TensorError);
  CHECK_THROWS_AS(align::write_tensor(dir / "b.btsr", DType::Float64, {}, {}), TensorError);
  CHECK_THROWS_AS(align::write_tensor(dir / "c.btsr", DType::Float64, {1, 1, 1, 1, 1}, {1}), TensorError);
  CHECK_THROWS_AS(align::write_tensor(dir / "d.btsr", DType::Float64, {2, 3}, {1, 2, 3}), TensorError);
}

TEST_CASE("a million random doubles survive a round trip byte for byte")
{
  const auto dir = ref::temp_dir("io");
  const auto path = dir / "big.btsr";
  align::Rng rng(7);
  std::vector<double> values(1'000'000);
  for (auto& v : values) {
    const std::uint64_t bits = rng();
    std::memcpy(&v, &bits, sizeof bits);
    if (!std::isfinite(v)) v = rng.normal();
  }
  align::write_tensor(path, DType::Float64, {1000, 1000}, values);
  const auto t = align::read_tensor(path);
  REQUIRE(t.values.size() == values.size());
  CHECK(std::memcmp(t.values.data(), values.data(), values.size() * sizeof(double)) == 0);

  const auto copy = dir / "copy.btsr";
  align::write_tensor(copy, t);
  CHECK(ref::slurp(copy) == ref::slurp(path));

  const Eigen::MatrixXd m = align::read_matrix(path);
  CHECK(m(3, 7) == values[3 * 1000 + 7]);
}

TEST_CASE("float32 narrows on write and widens on read")
{
  const auto dir = ref::temp_dir("io");
  const auto path = dir / "f.btsr";
  align::write_tensor(path, DType::Float32, {2}, {0.1, 3.0});
  const auto t = align::read_tensor(path);
  CHECK(t.dtype == DType::Float32);
  CHECK(t.values[0] == static_cast<double>(0.1f));
  CHECK(t.values[1] == 3.0);
}

TEST_CASE("non-finite payloads are rejected unless allowed")
{
  const auto dir = ref::temp_dir("io");
  const auto path = dir / "nan.btsr";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  align::write_tensor(path, DType::Float64, {3}, {1, nan, std::numeric_limits<double>::infinity()});
  CHECK(error_kind(path) == TensorError::Kind::NonFinite);
  CHECK_THROWS_AS(align::read_matrix(path), TensorError);
  const auto t = align::read_tensor(path, {.require_finite = false});
  CHECK(std::isnan(t.values[1]));
  CHECK(std::isinf(t.values[2]));
}

TEST_CASE("malformed files name the failure")
{
  const auto dir = ref::temp_dir("io");
  const auto good = dir / "good.btsr";
  align::write_tensor(good, DType::Float64, {4}, {1, 2, 3, 4});
  const std::string bytes = ref::slurp(good);
  auto write_bytes = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };

  std::string magic = bytes;
  magic.replace(0, 4, "XXXX");
  CHECK(error_kind(write_bytes("magic.btsr", magic)) == TensorError::Kind::BadMagic);

  CHECK(error_kind(write_bytes("trunc.btsr", bytes.substr(0, bytes.size() - 1))) == TensorError::Kind::Truncated);
  CHECK(error_kind(write_bytes("header.btsr", bytes.substr(0, 7))) == TensorError::Kind::Truncated);
  CHECK(error_kind(write_bytes("trailing.btsr", bytes + "x")) == TensorError::Kind::Truncated);
  // Header-only reads still check the file length.
  CHECK_THROWS_AS(align::read_tensor_header(dir / "trunc.btsr"), TensorError);
  CHECK_THROWS_AS(align::read_tensor_header(dir / "trailing.btsr"), TensorError);
  CHECK(align::read_tensor_header(good).dims == std::vector<std::uint64_t>{4});

  std::string version = bytes;
  version[4] = 2;
  CHECK(error_kind(write_bytes("version.btsr", version)) == TensorError::Kind::Unsupported);

  std::string dtype = bytes;
  dtype[8] = 3;
  CHECK(error_kind(write_bytes("dtype.btsr", dtype)) == TensorError::Kind::Unsupported);

  CHECK(error_kind(dir / "missing.btsr") == TensorError::Kind::Io);
}

TEST_CASE("random tensors of every rank round trip")
{
  const auto dir = ref::temp_dir("io");
  align::Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const auto ndim = 1 + rng.below(4);
    std::vector<std::uint64_t> dims;
    std::size_t count = 1;
    for (std::uint64_t k = 0; k < ndim; ++k) {
      dims.push_back(1 + rng.below(6));
      count *= dims.back();
    }
    const DType dtype = rng.below(2) ? DType::Float32 : DType::Float64;
    std::vector<double> values(count);
    for (auto& v : values) v = dtype == DType::Float32 ? static_cast<float>(rng.normal()) : rng.normal();
    const auto path = dir / ("t" + std::to_string(trial) + ".btsr");
    align::write_tensor(path, dtype, dims, values);
    const auto header = align::read_tensor_header(path);
    CHECK(header.dims == dims);
    CHECK(header.element_count() == count);
    const auto t = align::read_tensor(path);
    CHECK(t.dims == dims);
    CHECK(t.values == values);
  }
}

TEST_CASE("volumes keep row-major grid order")
{
  align::MapVolume v(align::GridDims{2, 3, 4}, 0.0);
  v(1, 2, 3) = 5.0;
  v(0, 1, 0) = 2.0;
  CHECK(v.dims.index(1, 2, 3) == (1 * 3 + 2) * 4 + 3);
  CHECK(v.dims.coords(v.dims.index(1, 2, 3)) == std::array<int, 3>{1, 2, 3});
  const auto dir = ref::temp_dir("io");
  align::write_tensor(dir / "vol.btsr", align::from_volume(v));
  const auto back = align::to_map_volume(align::read_tensor(dir / "vol.btsr"));
  CHECK(back.dims == v.dims);
  CHECK(back(1, 2, 3) == 5.0);
  CHECK(back(0, 1, 0) == 2.0);

  align::write_tensor(dir / "frac.btsr", DType::Float64, {1, 1, 2}, {1.0, 2.5});
  CHECK_THROWS_AS(align::to_label_volume(align::read_tensor(dir / "frac.btsr")), TensorError);
}
