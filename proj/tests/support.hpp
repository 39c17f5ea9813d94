#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "vmaseg/volume.hpp"

namespace testing {

using namespace vmaseg;

inline GridGeometry cube_grid(int n, double spacing = 1.0) {
  return {{n, n, n}, {spacing, spacing, spacing}, {0.0, 0.0, 0.0}};
}

inline ScalarVolume random_volume(const GridGeometry& g, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ScalarVolume v(g);
  for (auto& x : v.data()) x = u(rng);
  return v;
}

inline LabelVolume random_labels(const GridGeometry& g, std::uint64_t seed, int max_label) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, max_label);
  LabelVolume v(g);
  for (auto& x : v.data()) x = static_cast<Label>(u(rng));
  return v;
}

// Axis-aligned inclusive block of `value`.
inline void fill_block(LabelVolume& v, Index3 lo, Index3 hi, Label value) {
  for (int k = lo[2]; k <= hi[2]; ++k)
    for (int j = lo[1]; j <= hi[1]; ++j)
      for (int i = lo[0]; i <= hi[0]; ++i) v(i, j, k) = value;
}

inline std::size_t count_nonzero(const LabelVolume& v) {
  std::size_t n = 0;
  for (Label l : v.data()) n += l != 0;
  return n;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("vmaseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
