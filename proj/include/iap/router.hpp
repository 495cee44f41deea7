#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace iap {

/// Feature rows used for fitting, [N x dim], double precision.
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Multivariate Gaussian fitted to frozen-backbone features. `covariance` is
/// the unregularized sample covariance (divided by N); the cached Cholesky
/// factor is of covariance + reg * I.
class GaussianStats {
 public:
  GaussianStats() = default;

  /// Throws ArgumentError on N = 0, NumericError if the regularized matrix is
  /// not positive definite.
  static GaussianStats fit(const FeatureMatrix& features, double reg);
  static GaussianStats from_moments(Eigen::VectorXd mean, Eigen::MatrixXd covariance, double reg);

  /// -1/2 [ (x-mu)^T (S + reg I)^{-1} (x-mu) + d log 2pi + log|S + reg I| ]
  double log_pdf(std::span<const double> x) const;

  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& covariance() const { return covariance_; }
  Eigen::MatrixXd regularized_covariance() const {
    return covariance_ + reg_ * Eigen::MatrixXd::Identity(covariance_.rows(), covariance_.cols());
  }
  double reg() const { return reg_; }
  double log_det() const { return log_det_; }
  int dim() const { return static_cast<int>(mean_.size()); }

 private:
  void factorize();

  Eigen::VectorXd mean_;
  Eigen::MatrixXd covariance_;
  double reg_ = 0;
  Eigen::LLT<Eigen::MatrixXd> factor_;
  double log_det_ = 0;
};

struct TaskDistribution {
  int task_id = 0;
  GaussianStats stats;
};

struct ClassDistribution {
  int task_id = 0;
  int class_id = 0;
  GaussianStats stats;
};

struct RoutingConfig {
  double lower = 0.2;
  double upper = 0.8;
  int top_k = 5;
  double task_reg = 1e-7;
  double class_reg = 1e-3;
  /// Added to every log-likelihood before the sigmoid (0 keeps raw scores).
  double score_offset = 0.0;
  /// false: weight = sigmoid(best task score) with no bounds and no class stage.
  bool two_stage = true;

  void validate() const;
};

enum class RouteStage { short_circuit_off, short_circuit_on, stage_two, unbounded };

const char* to_string(RouteStage stage);

struct RoutingDecision {
  int task = 0;
  RouteStage stage = RouteStage::short_circuit_off;
  double weight = 0.0;
  double e_max = 0.0;               // sigmoid(best score + offset)
  std::vector<double> scores;       // raw per-task log-likelihoods
  bool pending() const { return stage == RouteStage::stage_two && weight < 0; }
};

TaskDistribution fit_task_stats(const FeatureMatrix& features, int task_id, double reg);
double log_pdf(std::span<const double> x, const GaussianStats& dist);

/// Task and class Gaussians of every seen task.
class DistributionLibrary {
 public:
  /// Fits the task Gaussian and one Gaussian per class label present.
  void add_task(int task_id, const FeatureMatrix& features, std::span<const int> labels,
                const RoutingConfig& config);
  void add_task(TaskDistribution task, std::vector<ClassDistribution> classes);

  const std::vector<TaskDistribution>& tasks() const { return tasks_; }
  const std::vector<ClassDistribution>& classes(int task_id) const;
  bool empty() const { return tasks_.empty(); }

 private:
  std::vector<TaskDistribution> tasks_;
  std::map<int, std::vector<ClassDistribution>> classes_;
};

/// Scores every task, picks the argmax (ties to the lowest id) and applies the
/// bounds. A pending decision has stage stage_two and weight -1.
RoutingDecision stage_one(std::span<const double> x, const std::vector<TaskDistribution>& tasks,
                          const RoutingConfig& config);

/// Mean sigmoid of the top-K class log-likelihoods (K clamped to class count).
double stage_two(std::span<const double> x, const std::vector<ClassDistribution>& classes,
                 const RoutingConfig& config);

RoutingDecision route_instance(std::span<const double> x, const DistributionLibrary& library,
                               const RoutingConfig& config);

}  // namespace iap
