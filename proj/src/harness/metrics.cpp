#include "iap/metrics.hpp"

#include <numeric>

#include "iap/errors.hpp"

namespace iap {

AccuracyMatrix::AccuracyMatrix(int tasks) : tasks_(tasks) {
  if (tasks < 0) throw ArgumentError("accuracy matrix: negative size");
  cells_.resize(static_cast<std::size_t>(tasks) * static_cast<std::size_t>(tasks));
}

AccuracyMatrix AccuracyMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  AccuracyMatrix a(static_cast<int>(rows.size()));
  for (std::size_t s = 0; s < rows.size(); ++s) a.set_row(static_cast<int>(s), rows[s]);
  return a;
}

void AccuracyMatrix::set(int session, int task, double accuracy) {
  if (session < 0 || session >= tasks_ || task < 0 || task >= tasks_) {
    throw IndexError("accuracy matrix index (" + std::to_string(session) + ", " + std::to_string(task) +
                     ") outside " + std::to_string(tasks_) + "x" + std::to_string(tasks_));
  }
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ArgumentError("accuracy outside [0, 1]");
  cells_[static_cast<std::size_t>(session * tasks_ + task)] = accuracy;
}

void AccuracyMatrix::set_row(int session, const std::vector<double>& row) {
  if (static_cast<int>(row.size()) != tasks_) {
    throw DimensionError("accuracy row has " + std::to_string(row.size()) + " entries, expected " +
                         std::to_string(tasks_));
  }
  for (int j = 0; j < tasks_; ++j) set(session, j, row[static_cast<std::size_t>(j)]);
}

double AccuracyMatrix::at(int session, int task) const {
  if (session < 0 || session >= tasks_ || task < 0 || task >= tasks_) throw IndexError("accuracy matrix index");
  const auto& c = cells_[static_cast<std::size_t>(session * tasks_ + task)];
  if (!c) throw StateError("accuracy matrix entry (" + std::to_string(session) + ", " + std::to_string(task) +
                           ") not filled");
  return *c;
}

bool AccuracyMatrix::complete() const {
  for (const auto& c : cells_)
    if (!c) return false;
  return tasks_ > 0;
}

MetricsReport compute_metrics(const AccuracyMatrix& a, const std::vector<double>& zero_shot) {
  if (!a.complete()) throw StateError("compute_metrics: accuracy matrix incomplete");
  const int t = a.tasks();
  if (!zero_shot.empty() && static_cast<int>(zero_shot.size()) != t) {
    throw DimensionError("zero-shot row length does not match task count");
  }
  MetricsReport r;
  r.zero_shot = zero_shot;
  double transfer_total = 0;
  int transfer_count = 0;
  for (int j = 0; j < t; ++j) {
    if (j == 0) {
      r.transfer.push_back(std::nullopt);
    } else {
      double s = 0;
      for (int i = 0; i < j; ++i) s += a.at(i, j);
      r.transfer.push_back(s / j);
      transfer_total += s / j;
      ++transfer_count;
    }
    double avg = 0;
    for (int i = 0; i < t; ++i) avg += a.at(i, j);
    r.average.push_back(avg / t);
    r.last.push_back(a.at(t - 1, j));
  }
  if (transfer_count > 0) r.transfer_mean = transfer_total / transfer_count;
  r.average_mean = std::accumulate(r.average.begin(), r.average.end(), 0.0) / t;
  r.last_mean = std::accumulate(r.last.begin(), r.last.end(), 0.0) / t;
  if (!zero_shot.empty()) r.zero_shot_mean = std::accumulate(zero_shot.begin(), zero_shot.end(), 0.0) / t;
  return r;
}

}  // namespace iap
