#pragma once

#include <span>
#include <vector>

namespace stagescope {

// Probability vector over the vocabulary: non-negative, sums to 1 within
// 1e-6.
struct TokenDistribution {
  std::vector<double> probs;

  static TokenDistribution from_logits(std::span<const float> logits);
  // Throws ValidationError when the invariants do not hold.
  void validate() const;
  std::size_t size() const { return probs.size(); }
};

}  // namespace stagescope
