#include "gmmcv/dataset.hpp"

#include <numeric>
#include <string>

#include "gmmcv/errors.hpp"
#include "gmmcv/rng.hpp"

namespace gmmcv {

Dataset::Dataset(RowMatrix rows) : rows_(std::move(rows)) {
  if (rows_.rows() < 1) throw ConfigurationError("dataset needs at least one observation");
  if (rows_.cols() < 1) throw ConfigurationError("observation dimension must be at least 1");
}

Dataset Dataset::subset(const std::vector<Index>& indices) const {
  RowMatrix out(static_cast<Index>(indices.size()), rows_.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index t = indices[i];
    if (t < 0 || t >= size())
      throw ConfigurationError("subset index " + std::to_string(t) + " out of range");
    out.row(static_cast<Index>(i)) = rows_.row(t);
  }
  return Dataset(std::move(out));
}

Dataset Dataset::shuffled(std::uint64_t seed, std::vector<Index>* permutation) const {
  std::vector<Index> perm(static_cast<std::size_t>(size()));
  std::iota(perm.begin(), perm.end(), Index{0});
  RandomStream rng(seed, 0x5348554646ull);
  // Fisher-Yates with our own stream so the order is platform independent.
  for (std::size_t i = perm.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  if (permutation) *permutation = perm;
  return subset(perm);
}

}  // namespace gmmcv
