#include "gmmcv/selection.hpp"

#include <cmath>
#include <limits>

#include "gmmcv/errors.hpp"
#include "gmmcv/parallel.hpp"

namespace gmmcv {

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::CV: return "cv";
    case Criterion::GMM: return "gmm";
    case Criterion::GMM_AIC: return "gmm_aic";
    case Criterion::GMM_BIC: return "gmm_bic";
  }
  return "?";
}

Criterion parse_criterion(const std::string& name) {
  if (name == "cv") return Criterion::CV;
  if (name == "gmm") return Criterion::GMM;
  if (name == "gmm_aic") return Criterion::GMM_AIC;
  if (name == "gmm_bic") return Criterion::GMM_BIC;
  throw ConfigurationError("unknown criterion '" + name + "' (expected cv, gmm, gmm_aic, gmm_bic)");
}

Index select_minimum(const std::vector<double>& scores, const std::vector<bool>& failed) {
  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if ((i < failed.size() && failed[i]) || !std::isfinite(scores[i])) continue;
    any = true;
    best = std::min(best, scores[i]);
  }
  if (!any) return -1;
  const double cutoff = best + 1e-12 * std::max(1.0, std::abs(best));
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if ((i < failed.size() && failed[i]) || !std::isfinite(scores[i])) continue;
    if (scores[i] <= cutoff) return static_cast<Index>(i);
  }
  return -1;
}

SubsetFit train_on_subset(const MomentModel& model, const Dataset& data, const SplitPlan& plan,
                          std::size_t s, const WeightingSpec& w, const OptimizerConfig& opt) {
  if (s >= plan.subset_count()) throw ConfigurationError("training subset index out of range");
  if (data.size() != plan.T) throw ConfigurationError("split plan and data disagree on T");
  const Dataset train = data.subset(plan.training_rows(s));
  const ResolvedWeighting ws = resolve_weighting(w, model, train);
  GmmEstimate est = estimate(model, train, ws, opt);
  return SubsetFit{std::move(est.theta), est.objective, ws.matrix, ws.ridged};
}

double validate_on_complement(const MomentModel& model, const Eigen::VectorXd& theta,
                              const Dataset& data, const SplitPlan& plan, std::size_t s,
                              const Eigen::MatrixXd& w_s) {
  const auto rows = plan.validation_rows(s);
  if (rows.empty()) throw ConfigurationError("empty validation set");
  return evaluate_objective(model, data.subset(rows), theta, w_s);
}

CvReport cross_validate(const std::vector<MomentModel>& models, const Dataset& input, int r,
                        int k, const WeightingSpec& w, const OptimizerConfig& opt,
                        const CvOptions& options) {
  if (models.empty()) throw ConfigurationError("cross_validate needs at least one model");
  for (const auto& m : models) validate_model(m);
  validate_optimizer_config(opt);

  CvReport report;
  std::optional<Dataset> shuffled;
  if (options.shuffle_seed) shuffled = input.shuffled(*options.shuffle_seed, &report.permutation);
  const Dataset& data = shuffled ? *shuffled : input;
  report.plan = make_splits(data.size(), r, k);
  const std::size_t n_sub = report.plan.subset_count();

  struct Task {
    SubsetFit fit;
    double score = 0.0;
    std::string error;
  };
  std::vector<Task> tasks(models.size() * n_sub);
  parallel_for(tasks.size(), options.parallelism, [&](std::size_t i) {
    const auto& model = models[i / n_sub];
    const std::size_t s = i % n_sub;
    Task& task = tasks[i];
    try {
      task.fit = train_on_subset(model, data, report.plan, s, w, opt);
      task.score = validate_on_complement(model, task.fit.theta, data, report.plan, s,
                                          task.fit.weight);
      if (!std::isfinite(task.score)) task.error = "non-finite validation score";
    } catch (const std::exception& e) {
      task.error = e.what();
    }
  });

  for (std::size_t m = 0; m < models.size(); ++m) {
    ModelCv out;
    out.name = models[m].name;
    double sum = 0.0;
    for (std::size_t s = 0; s < n_sub; ++s) {
      Task& task = tasks[m * n_sub + s];
      if (!task.error.empty() && !out.failed) {
        out.failed = true;
        out.failure = "subset " + std::to_string(s) + ": " + task.error;
      }
      out.scores.push_back(task.error.empty() ? task.score
                                              : std::numeric_limits<double>::infinity());
      out.train_scores.push_back(task.fit.train_score);
      out.thetas.push_back(std::move(task.fit.theta));
      out.weights.push_back(std::move(task.fit.weight));
      sum += out.scores.back();
    }
    out.mean = sum / static_cast<double>(n_sub);
    report.models.push_back(std::move(out));
  }

  const CriterionResult crit = cv_criterion(report);
  report.selected = crit.selected;
  if (report.selected < 0) throw SelectionError("every model failed during cross-validation");
  return report;
}

CriterionResult cv_criterion(const CvReport& report) {
  CriterionResult out;
  out.criterion = Criterion::CV;
  for (const auto& m : report.models) {
    out.scores.push_back(m.mean);
    out.failed.push_back(m.failed);
  }
  out.selected = select_minimum(out.scores, out.failed);
  return out;
}

CriterionResult select_by_gmm_minimand(const std::vector<MomentModel>& models,
                                       const Dataset& data, const WeightingSpec& w,
                                       const OptimizerConfig& opt, int parallelism) {
  if (models.empty()) throw ConfigurationError("selection needs at least one model");
  CriterionResult out;
  out.criterion = Criterion::GMM;
  out.scores.assign(models.size(), std::numeric_limits<double>::infinity());
  out.failed.assign(models.size(), false);
  out.thetas.resize(models.size());
  std::vector<char> failed(models.size(), 0);
  parallel_for(models.size(), parallelism, [&](std::size_t i) {
    try {
      GmmEstimate est = estimate(models[i], data, w, opt);
      out.scores[i] = est.objective;
      out.thetas[i] = std::move(est.theta);
    } catch (const std::exception&) {
      failed[i] = 1;
    }
  });
  for (std::size_t i = 0; i < models.size(); ++i) out.failed[i] = failed[i] != 0;
  out.minimands = out.scores;
  out.selected = select_minimum(out.scores, out.failed);
  if (out.selected < 0) throw SelectionError("every model failed full-sample estimation");
  return out;
}

double gmm_aic(double q, Index T, Index c, Index p) {
  return static_cast<double>(T) * q - 2.0 * static_cast<double>(c - p);
}

double gmm_bic(double q, Index T, Index c, Index p) {
  return static_cast<double>(T) * q -
         static_cast<double>(c - p) * std::log(static_cast<double>(T));
}

CriterionResult information_criterion(const CriterionResult& minimand,
                                      const std::vector<MomentModel>& models, Index T,
                                      Criterion which) {
  if (which != Criterion::GMM_AIC && which != Criterion::GMM_BIC)
    throw ConfigurationError("information_criterion expects gmm_aic or gmm_bic");
  if (minimand.minimands.size() != models.size())
    throw ConfigurationError("minimand result does not match the model list");
  CriterionResult out = minimand;
  out.criterion = which;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const double q = minimand.minimands[i];
    out.scores[i] = which == Criterion::GMM_AIC
                        ? gmm_aic(q, T, models[i].instrument_count, models[i].p)
                        : gmm_bic(q, T, models[i].instrument_count, models[i].p);
  }
  out.selected = select_minimum(out.scores, out.failed);
  return out;
}

}  // namespace gmmcv
