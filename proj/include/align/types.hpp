#ifndef ALIGN_TYPES_HPP
#define ALIGN_TYPES_HPP

#include <Eigen/Dense>

#include <array>
#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace align {

inline constexpr int kConceptCount = 180;
inline constexpr int kMaxRepetitions = 6;
inline constexpr int kMinRepetitions = 4;
inline constexpr int kAreaCount = 360;

/// Stimulus presentation format.
enum class Paradigm : std::uint8_t { Sentence = 0, Picture = 1, WordCloud = 2 };

inline constexpr std::array<Paradigm, 3> kParadigms{Paradigm::Sentence, Paradigm::Picture, Paradigm::WordCloud};

constexpr int index_of(Paradigm p) noexcept { return static_cast<int>(p); }

constexpr std::string_view code(Paradigm p) noexcept
{
  switch (p) {
    case Paradigm::Sentence: return "S";
    case Paradigm::Picture: return "P";
    case Paradigm::WordCloud: return "WC";
  }
  return "?";
}

/// Accepts "S", "P", "WC" in either case.
inline Paradigm parse_paradigm(std::string_view s)
{
  std::string u(s);
  for (auto& ch : u) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (u == "S") return Paradigm::Sentence;
  if (u == "P") return Paradigm::Picture;
  if (u == "WC") return Paradigm::WordCloud;
  throw std::invalid_argument("unknown paradigm '" + std::string(s) + "'");
}

struct Stimulus {
  int id = 0;
  int concept_id = 0;
  Paradigm paradigm = Paradigm::Sentence;
  int repetition = 0;
};

/// Voxel grid extent. Flat indices are row-major over (x, y, z), matching the
/// payload order of a 3-D tensor file.
struct GridDims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  constexpr std::int64_t size() const noexcept { return std::int64_t{nx} * ny * nz; }
  constexpr bool contains(int x, int y, int z) const noexcept
  {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  constexpr std::int64_t index(int x, int y, int z) const noexcept
  {
    return (std::int64_t{x} * ny + y) * nz + z;
  }
  constexpr std::array<int, 3> coords(std::int64_t i) const noexcept
  {
    const auto z = static_cast<int>(i % nz);
    const auto y = static_cast<int>((i / nz) % ny);
    const auto x = static_cast<int>(i / (std::int64_t{ny} * nz));
    return {x, y, z};
  }
  friend constexpr bool operator==(const GridDims&, const GridDims&) = default;
};

/// Dense scalar field on a voxel grid.
template <typename Scalar>
struct Volume {
  GridDims dims;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> data;

  Volume() = default;
  Volume(GridDims d, Scalar fill) : dims(d), data(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Constant(d.size(), fill)) {}

  Scalar& operator()(int x, int y, int z) { return data(dims.index(x, y, z)); }
  Scalar operator()(int x, int y, int z) const { return data(dims.index(x, y, z)); }
};

using MapVolume = Volume<double>;
using MaskVolume = Volume<std::uint8_t>;
using LabelVolume = Volume<int>;

}  // namespace align

#endif  // ALIGN_TYPES_HPP
