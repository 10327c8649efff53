#pragma once

#include <vector>

#include "gmmcv/dataset.hpp"

namespace gmmcv {

/// r contiguous folds over T ordered observations and the C(r,k) training
/// subsets of size r-k. Indices are zero-based: fold j (0 ≤ j < r) holds
/// [⌊T·j/r⌋, ⌊T·(j+1)/r⌋).
struct SplitPlan {
  Index T = 0;
  int r = 0;
  int k = 0;
  std::vector<Index> fold_begin;  // r+1 boundaries
  /// Fold ids of each training subset, lexicographic order.
  std::vector<std::vector<int>> training_subsets;

  std::size_t subset_count() const noexcept { return training_subsets.size(); }
  std::vector<Index> fold(int j) const;
  std::vector<Index> training_rows(std::size_t s) const;
  std::vector<Index> validation_rows(std::size_t s) const;
};

SplitPlan make_splits(Index T, int r, int k);

/// C(n, m) as a double (exact for the sizes used here).
double binomial(int n, int m);

}  // namespace gmmcv
