#ifndef ALIGN_TESTS_FIXTURES_HPP
#define ALIGN_TESTS_FIXTURES_HPP

#include "align/synth.hpp"
#include "align/types.hpp"

#include "reference.hpp"

#include <filesystem>
#include <vector>

namespace fixture {

/// Every (concept, paradigm, repetition) once, ids in that nested order.
inline std::vector<align::Stimulus> full_design(int concepts, int repetitions)
{
  std::vector<align::Stimulus> rows;
  for (int c = 0; c < concepts; ++c)
    for (align::Paradigm p : align::kParadigms)
      for (int r = 0; r < repetitions; ++r)
        rows.push_back({static_cast<int>(rows.size()), c, p, r});
  return rows;
}

/// A null dataset on a 4x4x2 grid with two participants, written to disk.
inline std::filesystem::path tiny_dataset(const std::string& name, std::uint64_t seed = 3)
{
  const auto dir = ref::temp_dir(name);
  align::SynthConfig c = align::null_synth_config({4, 4, 2}, 2, seed);
  align::generate(c, dir);
  return dir;
}

}  // namespace fixture

#endif  // ALIGN_TESTS_FIXTURES_HPP
