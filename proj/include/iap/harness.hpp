#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "iap/config.hpp"
#include "iap/encoder.hpp"
#include "iap/gate.hpp"
#include "iap/metrics.hpp"
#include "iap/prompt.hpp"
#include "iap/router.hpp"
#include "iap/world.hpp"

namespace iap {

struct TaskStream {
  std::vector<DomainSpec> domains;
  std::string order;
};

TaskStream make_stream(const SyntheticWorld& world, const StreamConfig& config);

/// Frozen backbone plus everything learned per task.
struct ModelState {
  DualEncoder<float> backbone;
  PromptLibrary<float> prompts;
  std::vector<GateParams<float>> gates;
  DistributionLibrary distributions;
  std::vector<std::string> task_names;

  ModelState(DualEncoder<float> backbone, const PromptConfig& prompt);

  int tasks() const { return prompts.task_count(); }
};

/// Pre-trains a backbone on world classes and styles that never appear in the
/// stream. Loads from config.cache_path when that file exists.
DualEncoder<float> pretrain_backbone(const SyntheticWorld& world, const RunConfig& config,
                                     std::vector<double>* losses = nullptr);

/// Unit-norm frozen image embeddings [N x width], computed in eval batches.
FeatureMatrix frozen_features(const DualEncoder<float>& backbone, const ImageSet& images, int batch,
                              const EncoderConfig& enc);

struct SessionLog {
  int task = 0;
  double initial_loss = 0.0;  // mean loss before the first update
  std::vector<double> epoch_loss;
};

/// One MTIL session: creates the task's pools and gates, trains them with SGD
/// on the class-sentence contrastive loss, then fits the task and class
/// Gaussians on frozen features of the train split. `task` must be the next
/// unused task id.
SessionLog train_session(ModelState& state, int task, const DomainSpec& spec, const DomainData& data,
                         const RunConfig& config, std::uint64_t seed);

struct RoutingRecord {
  int task = 0;             // true task of the instance
  std::size_t instance = 0; // index in that task's test split
  int task_chosen = -1;     // -1 when nothing is fitted yet
  RouteStage stage = RouteStage::short_circuit_off;
  double e_max = 0.0;
  double weight = 0.0;
  int open_layers = 0;
  int predicted = -1;
  bool correct = false;
};

/// A task's test split together with its (fixed) frozen features.
struct EvalTask {
  const DomainData* data = nullptr;
  FeatureMatrix features;
};

struct EvalResult {
  std::vector<double> accuracy;
  std::vector<double> mean_open_layers;
  std::vector<RoutingRecord> telemetry;
};

/// Classifies every task's test split against its own class sentences without
/// a task identifier. Instances routed to weight 0 use the frozen backbone.
EvalResult evaluate_all(const ModelState& state, const std::vector<EvalTask>& tasks, const RunConfig& config);

/// Frozen-backbone accuracy of every task.
std::vector<double> zero_shot_row(const DualEncoder<float>& backbone, const std::vector<EvalTask>& tasks,
                                  const RunConfig& config);

/// Checksums of everything a task owns: pools, gates, statistics.
struct TaskChecksums {
  std::uint64_t prompts = 0;
  std::uint64_t gates = 0;
  std::uint64_t stats = 0;
  bool operator==(const TaskChecksums&) const = default;
};

TaskChecksums task_checksums(const ModelState& state, int task);
std::uint64_t backbone_checksum(const ModelState& state);

struct RunResult {
  AccuracyMatrix accuracy;
  std::vector<double> zero_shot;
  MetricsReport metrics;
  std::vector<SessionLog> sessions;
  std::vector<std::string> task_names;
  std::vector<RoutingRecord> telemetry;                   // final evaluation
  std::vector<std::vector<TaskChecksums>> checksums;      // [session][task <= session]
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Full stream: zero-shot row, then train_session + evaluate_all per session.
/// `state_out`, when given, receives the final model.
RunResult run_experiment(const RunConfig& config, const ProgressFn& progress = {},
                         std::unique_ptr<ModelState>* state_out = nullptr);

}  // namespace iap
