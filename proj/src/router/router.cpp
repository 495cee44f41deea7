#include "iap/router.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include "iap/errors.hpp"
#include "iap/prompt.hpp"

namespace iap {

namespace {
const double kLog2Pi = std::log(2.0 * std::numbers::pi);
}

GaussianStats GaussianStats::fit(const FeatureMatrix& features, double reg) {
  const auto n = features.rows();
  if (n == 0) throw ArgumentError("fit: no feature rows");
  Eigen::VectorXd mu = features.colwise().mean().transpose();
  FeatureMatrix centered = features.rowwise() - mu.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  cov = 0.5 * (cov + cov.transpose());
  return from_moments(std::move(mu), std::move(cov), reg);
}

GaussianStats GaussianStats::from_moments(Eigen::VectorXd mean, Eigen::MatrixXd covariance, double reg) {
  if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
    throw DimensionError("gaussian: covariance does not match mean dimension");
  }
  GaussianStats g;
  g.mean_ = std::move(mean);
  g.covariance_ = std::move(covariance);
  g.reg_ = reg;
  g.factorize();
  return g;
}

void GaussianStats::factorize() {
  Eigen::MatrixXd m = covariance_;
  m.diagonal().array() += reg_;
  factor_.compute(m);
  bool ok = factor_.info() == Eigen::Success;
  if (ok) {
    const auto diag = factor_.matrixLLT().diagonal();
    ok = (diag.array() > 0).all() && diag.allFinite();
  }
  if (!ok) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
    std::ostringstream msg;
    msg << "covariance + " << reg_ << " * I is not positive definite (eigenvalues in ["
        << eig.eigenvalues().minCoeff() << ", " << eig.eigenvalues().maxCoeff() << "])";
    throw NumericError(msg.str());
  }
  log_det_ = 2.0 * factor_.matrixLLT().diagonal().array().log().sum();
}

double GaussianStats::log_pdf(std::span<const double> x) const {
  if (static_cast<Eigen::Index>(x.size()) != mean_.size()) {
    throw DimensionError("log_pdf: feature dim " + std::to_string(x.size()) + ", distribution dim " +
                         std::to_string(mean_.size()));
  }
  Eigen::VectorXd diff = Eigen::Map<const Eigen::VectorXd>(x.data(), mean_.size()) - mean_;
  factor_.matrixL().solveInPlace(diff);
  const double maha = diff.squaredNorm();
  return -0.5 * (maha + static_cast<double>(mean_.size()) * kLog2Pi + log_det_);
}

void RoutingConfig::validate() const {
  if (!(lower >= 0 && lower < upper && upper <= 1)) {
    throw ConfigError("routing bounds must satisfy 0 <= lower < upper <= 1");
  }
  if (top_k < 1) throw ConfigError("routing.top_k must be >= 1");
  if (!(task_reg >= 0) || !(class_reg >= 0)) throw ConfigError("routing regularizers must be >= 0");
  if (!std::isfinite(score_offset)) throw ConfigError("routing.score_offset must be finite");
}

const char* to_string(RouteStage stage) {
  switch (stage) {
    case RouteStage::short_circuit_off: return "short_circuit_off";
    case RouteStage::short_circuit_on: return "short_circuit_on";
    case RouteStage::stage_two: return "stage_two";
    case RouteStage::unbounded: return "unbounded";
  }
  return "?";
}

TaskDistribution fit_task_stats(const FeatureMatrix& features, int task_id, double reg) {
  return TaskDistribution{task_id, GaussianStats::fit(features, reg)};
}

double log_pdf(std::span<const double> x, const GaussianStats& dist) { return dist.log_pdf(x); }

void DistributionLibrary::add_task(int task_id, const FeatureMatrix& features, std::span<const int> labels,
                                   const RoutingConfig& config) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
    throw DimensionError("add_task: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(features.rows()) + " feature rows");
  }
  auto task = fit_task_stats(features, task_id, config.task_reg);
  std::map<int, std::vector<Eigen::Index>> rows_by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) rows_by_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
  std::vector<ClassDistribution> classes;
  for (const auto& [cls, rows] : rows_by_class) {
    FeatureMatrix sub(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
    classes.push_back(ClassDistribution{task_id, cls, GaussianStats::fit(sub, config.class_reg)});
  }
  add_task(std::move(task), std::move(classes));
}

void DistributionLibrary::add_task(TaskDistribution task, std::vector<ClassDistribution> classes) {
  for (const auto& t : tasks_) {
    if (t.task_id == task.task_id) throw StateError("distribution for task " + std::to_string(task.task_id) + " already fitted");
  }
  classes_[task.task_id] = std::move(classes);
  tasks_.push_back(std::move(task));
}

const std::vector<ClassDistribution>& DistributionLibrary::classes(int task_id) const {
  auto it = classes_.find(task_id);
  if (it == classes_.end() || it->second.empty()) {
    throw StateError("no class distributions for task " + std::to_string(task_id));
  }
  return it->second;
}

RoutingDecision stage_one(std::span<const double> x, const std::vector<TaskDistribution>& tasks,
                          const RoutingConfig& config) {
  if (tasks.empty()) throw StateError("routing: no fitted tasks");
  RoutingDecision d;
  d.scores.reserve(tasks.size());
  std::size_t best = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    d.scores.push_back(tasks[i].stats.log_pdf(x));
    if (i == 0) continue;
    const bool better = d.scores[i] > d.scores[best] ||
                        (d.scores[i] == d.scores[best] && tasks[i].task_id < tasks[best].task_id);
    if (better) best = i;
  }
  d.task = tasks[best].task_id;
  d.e_max = sigmoid(d.scores[best] + config.score_offset);
  if (!config.two_stage) {
    d.stage = RouteStage::unbounded;
    d.weight = d.e_max;
  } else if (d.e_max <= config.lower) {
    d.stage = RouteStage::short_circuit_off;
    d.weight = 0.0;
  } else if (d.e_max >= config.upper) {
    d.stage = RouteStage::short_circuit_on;
    d.weight = 1.0;
  } else {
    d.stage = RouteStage::stage_two;
    d.weight = -1.0;
  }
  return d;
}

double stage_two(std::span<const double> x, const std::vector<ClassDistribution>& classes,
                 const RoutingConfig& config) {
  if (classes.empty()) throw StateError("stage_two: no class distributions");
  std::vector<double> scores;
  scores.reserve(classes.size());
  for (const auto& c : classes) scores.push_back(c.stats.log_pdf(x));
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(config.top_k), scores.size());
  std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k), scores.end(),
                    std::greater<>());
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) total += sigmoid(scores[i] + config.score_offset);
  // sigmoid rounds to exactly 0 or 1 in double for |score| > ~37; the stage-two
  // weight is kept strictly inside (0, 1).
  return std::clamp(total / static_cast<double>(k), std::numeric_limits<double>::denorm_min(),
                    std::nextafter(1.0, 0.0));
}

RoutingDecision route_instance(std::span<const double> x, const DistributionLibrary& library,
                               const RoutingConfig& config) {
  auto d = stage_one(x, library.tasks(), config);
  if (d.pending()) d.weight = stage_two(x, library.classes(d.task), config);
  return d;
}

}  // namespace iap
