#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace gmmcv {

using Index = Eigen::Index;
using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ObsRef = Eigen::Map<const Eigen::VectorXd>;

/// Ordered collection of T observations, each a real vector of dimension d.
/// Order matters: fold assignment is by index.
class Dataset {
 public:
  explicit Dataset(RowMatrix rows);

  Index size() const noexcept { return rows_.rows(); }
  Index dim() const noexcept { return rows_.cols(); }

  ObsRef row(Index t) const noexcept {
    return ObsRef(rows_.data() + t * rows_.cols(), rows_.cols());
  }
  const RowMatrix& matrix() const noexcept { return rows_; }

  /// Rows at the given indices, in the given order.
  Dataset subset(const std::vector<Index>& indices) const;

  /// Uniformly random permutation of the rows; `permutation` receives the
  /// original index of every new row when non-null.
  Dataset shuffled(std::uint64_t seed,
                   std::vector<Index>* permutation = nullptr) const;

 private:
  RowMatrix rows_;
};

}  // namespace gmmcv
