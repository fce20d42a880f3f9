#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace stagescope {

// Fisher-Yates over mt19937_64, whose output sequence is fixed by the
// standard, so shuffles reproduce across standard libraries.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace stagescope
