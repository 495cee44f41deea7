#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iap/harness.hpp"
#include "iap/io.hpp"

namespace iap {

/// Everything learned in a run: backbone, prompt pools, gates and the task and
/// class Gaussians (stats/<task>/{mu,sigma}, stats/<task>/<class>/{mu,sigma}).
Checkpoint state_checkpoint(const ModelState& state, const RunConfig& config);

std::string accuracy_matrix_csv(const AccuracyMatrix& a, const std::vector<std::string>& names);
std::string metrics_csv(const MetricsReport& m, const std::vector<std::string>& names);
std::string gate_usage_csv(const std::vector<double>& open_layers, const std::vector<std::string>& names);
std::string routing_telemetry_csv(const std::vector<RoutingRecord>& records);
std::string training_log_csv(const std::vector<SessionLog>& sessions);

/// Writes config.json, model.ckpt and the CSVs into `dir`.
void write_run_directory(const std::string& dir, const RunConfig& config, const RunResult& result,
                         const ModelState& state);

/// What `report` needs from a finished run directory.
struct RunSummary {
  RunConfig config;
  std::vector<std::string> task_names;
  AccuracyMatrix accuracy;
  std::vector<double> zero_shot;
  std::vector<double> open_layers;
};

/// Throws StateError naming the first missing file.
RunSummary read_run_directory(const std::string& dir);

/// Table of Transfer / Average / Last per task plus headline means.
std::string format_report(const RunSummary& summary);

/// Gate usage per task as plot-ready columns: index, name, mean open layers.
std::string gate_usage_bars(const RunSummary& summary);

}  // namespace iap
