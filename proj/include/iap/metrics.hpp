#pragma once

#include <optional>
#include <string>
#include <vector>

namespace iap {

/// A[s][j]: accuracy on task j after session s. Unfilled entries are nullopt.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(int tasks = 0);
  static AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows);

  int tasks() const { return tasks_; }
  void set(int session, int task, double accuracy);
  void set_row(int session, const std::vector<double>& row);
  double at(int session, int task) const;
  bool complete() const;

 private:
  int tasks_;
  std::vector<std::optional<double>> cells_;
};

struct MetricsReport {
  std::vector<std::optional<double>> transfer;  // nullopt for task 0
  std::vector<double> average;
  std::vector<double> last;
  std::vector<double> zero_shot;
  std::vector<double> mean_open_layers;
  std::optional<double> transfer_mean;
  double average_mean = 0;
  double last_mean = 0;
  double zero_shot_mean = 0;
};

/// Throws StateError on an incomplete matrix; zero_shot may be empty.
MetricsReport compute_metrics(const AccuracyMatrix& a, const std::vector<double>& zero_shot);

}  // namespace iap
