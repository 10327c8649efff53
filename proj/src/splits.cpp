#include "gmmcv/splits.hpp"

#include <string>

#include "gmmcv/errors.hpp"

namespace gmmcv {

double binomial(int n, int m) {
  if (m < 0 || m > n) return 0.0;
  double out = 1.0;
  for (int i = 1; i <= m; ++i) out = out * (n - m + i) / i;
  return out;
}

SplitPlan make_splits(Index T, int r, int k) {
  if (r < 2) throw ConfigurationError("r must be at least 2 (got " + std::to_string(r) + ")");
  if (r > T)
    throw ConfigurationError("r=" + std::to_string(r) + " exceeds the sample size T=" +
                             std::to_string(T));
  if (k < 1 || k >= r)
    throw ConfigurationError("k must satisfy 1 <= k < r (got k=" + std::to_string(k) + ")");
  if (binomial(r, k) > 1e6) throw ConfigurationError("C(r,k) exceeds one million subsets");

  SplitPlan plan;
  plan.T = T;
  plan.r = r;
  plan.k = k;
  for (int j = 0; j <= r; ++j) plan.fold_begin.push_back(T * j / r);

  const int m = r - k;
  std::vector<int> combo(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) combo[static_cast<std::size_t>(i)] = i;
  for (;;) {
    plan.training_subsets.push_back(combo);
    int i = m - 1;
    while (i >= 0 && combo[static_cast<std::size_t>(i)] == r - m + i) --i;
    if (i < 0) break;
    ++combo[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < m; ++j)
      combo[static_cast<std::size_t>(j)] = combo[static_cast<std::size_t>(j - 1)] + 1;
  }
  return plan;
}

std::vector<Index> SplitPlan::fold(int j) const {
  std::vector<Index> out;
  for (Index t = fold_begin[static_cast<std::size_t>(j)];
       t < fold_begin[static_cast<std::size_t>(j) + 1]; ++t)
    out.push_back(t);
  return out;
}

std::vector<Index> SplitPlan::training_rows(std::size_t s) const {
  std::vector<Index> out;
  for (int j : training_subsets.at(s)) {
    const auto f = fold(j);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

std::vector<Index> SplitPlan::validation_rows(std::size_t s) const {
  std::vector<bool> in_training(static_cast<std::size_t>(r), false);
  for (int j : training_subsets.at(s)) in_training[static_cast<std::size_t>(j)] = true;
  std::vector<Index> out;
  for (int j = 0; j < r; ++j) {
    if (in_training[static_cast<std::size_t>(j)]) continue;
    const auto f = fold(j);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

}  // namespace gmmcv
