#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "iap/encoder.hpp"
#include "iap/gate.hpp"
#include "iap/router.hpp"
#include "iap/world.hpp"

namespace iap {

struct PromptConfig {
  int length = 8;
  int max_text_layers = 8;

  void validate() const;
};

/// Task order: "order-1" is domain index order, "order-2" the reverse.
struct StreamConfig {
  int domains = 4;
  std::string order = "order-1";
  std::optional<int> few_shot;

  void validate() const;
};

struct OptimizerConfig {
  double lr = 5.0;
  int epochs = 10;
  int batch = 32;
  int eval_batch = 64;

  void validate() const;
};

/// Backbone pre-training on word pairs and styles disjoint from the stream.
struct PretrainConfig {
  int classes = 160;
  int steps = 600;
  int batch = 32;
  double lr = 2e-3;
  int styles = 8;
  double style_strength = 0.3;
  double style_offset = 0.5;
  /// Reused when the file exists; written after pre-training otherwise.
  std::string cache_path;

  void validate() const;
};

struct RunConfig {
  EncoderConfig encoder;
  WorldConfig world;
  PromptConfig prompt;
  GateConfig gate;
  RoutingConfig routing;
  StreamConfig stream;
  OptimizerConfig optimizer;
  PretrainConfig pretrain;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  void validate() const;
};

}  // namespace iap
