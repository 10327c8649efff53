#pragma once

#include <functional>
#include <string>
#include <vector>
#include <variant>

#include <Eigen/Dense>

#include "gmmcv/dataset.hpp"

namespace gmmcv {

using VecRef = Eigen::Ref<Eigen::VectorXd>;
using MatRef = Eigen::Ref<Eigen::MatrixXd>;

/// f(v, θ) written into a preallocated q-vector.
using MomentFn =
    std::function<void(const ObsRef& v, const Eigen::VectorXd& theta, VecRef out)>;
/// ∂f/∂θ (q×p) at one observation.
using MomentJacobianFn =
    std::function<void(const ObsRef& v, const Eigen::VectorXd& theta, MatRef out)>;
/// Instrument rows contributed by one observation (rows × cols).
using InstrumentFn = std::function<void(const ObsRef& v, MatRef out)>;

struct ParamBox {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  Index size() const noexcept { return lower.size(); }
  bool bounded() const noexcept;
  bool contains(const Eigen::VectorXd& x) const noexcept;
  Eigen::VectorXd center() const;
  Eigen::VectorXd project(const Eigen::VectorXd& x) const;

  static ParamBox uniform(Index p, double lo, double hi);
};

/// Instrument metadata used to build W = (Z'Z/N)^{-1}. A model with
/// `equations` stacked equations sharing one instrument set has
/// q = equations · cols and receives the block-diagonal kron(I, (Z'Z/N)^{-1}).
struct InstrumentSpec {
  InstrumentFn fn;
  Index rows = 1;
  Index cols = 0;
  Index equations = 1;

  bool available() const noexcept { return static_cast<bool>(fn) && cols > 0; }
};

/// A candidate model: moment function, parameter box and dimensions.
struct MomentModel {
  std::string name;
  Index p = 0;
  Index q = 0;
  /// |c| in the information criteria.
  Index instrument_count = 0;
  /// Metadata only; q < p is rejected unless set.
  bool under_identified = false;
  ParamBox box;
  MomentFn moment;
  /// Optional. Finite differences are used when absent.
  MomentJacobianFn jacobian;
  InstrumentSpec instruments;
  /// Optional, empty or length p: parameters entering the moments affinely.
  std::vector<bool> affine;
};

/// Throws ConfigurationError when dimensions or callbacks are inconsistent.
void validate_model(const MomentModel& model);

namespace weighting {
struct Identity {};
struct InverseInstrumentGram {
  /// When Z'Z is numerically singular, add 1e-10·trace(Z'Z/N)/c to the
  /// diagonal instead of failing.
  bool allow_ridge = true;
};
struct Fixed {
  Eigen::MatrixXd matrix;
};
}  // namespace weighting

using WeightingSpec = std::variant<weighting::Identity,
                                   weighting::InverseInstrumentGram,
                                   weighting::Fixed>;

struct ResolvedWeighting {
  Eigen::MatrixXd matrix;
  bool ridged = false;
};

std::string weighting_name(const WeightingSpec& spec);

/// Materializes W for a model with q moments on the given data.
ResolvedWeighting resolve_weighting(const WeightingSpec& spec, Index q,
                                    const InstrumentSpec& instruments,
                                    const Dataset& data);

inline ResolvedWeighting resolve_weighting(const WeightingSpec& spec,
                                           const MomentModel& model,
                                           const Dataset& data) {
  return resolve_weighting(spec, model.q, model.instruments, data);
}

/// Checks that W is q×q, symmetric and PSD up to a relative 1e-10.
void check_weight_matrix(const Eigen::MatrixXd& w, Index q);

/// Square-root factor L' with W = L L', returned as the (rank × q) matrix
/// applied to ḡ when forming least-squares residuals.
Eigen::MatrixXd weight_root(const Eigen::MatrixXd& w);

}  // namespace gmmcv
