#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "iap/diffcore/ops.hpp"
#include "iap/rng.hpp"

namespace iap {

using diff::ParameterSet;
using diff::Tensor;

/// hard: straight-through one-hot Gumbel gate. soft: the relaxed ON
/// probability is used as the weight. random: each layer opens with p = 0.5.
/// always_on: every layer prompted (plain residual prompting).
enum class GateMode { hard, soft, random, always_on };

const char* to_string(GateMode mode);
GateMode gate_mode_from_string(const std::string& s);

struct GateConfig {
  GateMode mode = GateMode::hard;
  double temperature = 3.0;
  double noise_clamp = 1e-6;

  void validate() const;
};

/// Index 0 of every 2-vector is ON (prompt), index 1 is OFF.
struct GateDecision {
  std::array<double, 2> soft{0.5, 0.5};
  std::array<double, 2> hard{0.0, 1.0};
  bool open = false;
};

/// g = -log(-log(U)), U clamped to [eps, 1 - eps].
double gumbel_from_uniform(double u, double eps);
double gumbel_noise(Rng& rng, double eps);

/// G = softmax((logits + noise) / tau); hard = one-hot(argmax G), ties to OFF.
GateDecision gate_decide(std::array<double, 2> logits, std::array<double, 2> noise, double tau);

/// One linear map features -> 2 logits per vision layer, for one task.
template <typename T>
class GateParams {
 public:
  GateParams() = default;
  GateParams(int task, int layers, int feature_dim, std::uint64_t seed);

  int layers() const { return static_cast<int>(weights_.size()); }
  int feature_dim() const { return feature_dim_; }
  const Tensor<T>& weight(int layer) const { return weights_.at(layer); }
  const Tensor<T>& bias(int layer) const { return biases_.at(layer); }

  /// Named gate/<task>/<layer>/{W,b}.
  const ParameterSet<T>& parameters() const { return params_; }
  void set_trainable(bool on) { params_.set_trainable(on); }

  /// Logits of every layer for one feature vector.
  std::array<double, 2> logits(int layer, std::span<const T> features) const;

 private:
  int feature_dim_ = 0;
  std::vector<Tensor<T>> weights_;  // [feature_dim, 2]
  std::vector<Tensor<T>> biases_;   // [2]
  ParameterSet<T> params_;
};

/// Single-instance gate evaluation. Training draws fresh Gumbel noise from
/// `rng` (random mode also draws from it); inference is noise-free.
template <typename T>
GateDecision gate_forward(std::span<const T> features, const GateParams<T>& params, int layer,
                          const GateConfig& config, Rng& rng, bool training);

/// Batched gate for one layer: per-item weights [batch] ready for
/// make_prompt_hooks plus the decisions. In hard training mode the weight is
/// the straight-through one-hot ON component (gradient flows through the soft
/// probability); soft mode uses the probability itself.
template <typename T>
struct GateOutput {
  Tensor<T> weight;
  std::vector<GateDecision> decisions;
};

template <typename T>
GateOutput<T> gate_layer(const Tensor<T>& features, const GateParams<T>& params, int layer,
                         const GateConfig& config, Rng& rng, bool training);

/// Inference-time layer output: O_ori + open * weight * O_r (training uses
/// weight 1). A closed gate returns O_ori itself.
template <typename T>
Tensor<T> gated_residual(const Tensor<T>& original, const Tensor<T>& prompt_out,
                         const GateDecision& decision, double weight, bool training);

/// Mean number of open layers per instance; open_flags[i] lists the layers of
/// instance i.
double gate_usage_stats(const std::vector<std::vector<bool>>& open_flags);

}  // namespace iap
