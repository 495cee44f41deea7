#pragma once

#include <map>
#include <span>
#include <tuple>
#include <vector>

#include "iap/encoder.hpp"

namespace iap {

enum class EncoderSide { vision, text };

const char* to_string(EncoderSide side);

template <typename T>
struct PromptPool {
  Tensor<T> keys;    // [length, width]
  Tensor<T> values;  // [length, width]
  int layer = 0;
};

/// Per-task prompt pools for both encoders. Vision pools cover every vision
/// layer, text pools the first min(max_text_layers, text_depth) layers. Only
/// the task whose session is open is trainable.
template <typename T>
class PromptLibrary {
 public:
  PromptLibrary(const EncoderConfig& config, int prompt_length = 8, int max_text_layers = 8);

  /// Creates the pools of a new task: keys ~ N(0, 0.02^2), values zero, so a
  /// fresh task leaves the backbone output unchanged. Tasks are numbered 0..n-1
  /// in creation order.
  int add_task(std::uint64_t seed);

  /// Makes `task` the only trainable task; -1 freezes everything.
  void open_session(int task);

  bool has_pool(int task, EncoderSide side, int layer) const;
  const PromptPool<T>& pool(int task, EncoderSide side, int layer) const;

  int task_count() const { return task_count_; }
  int prompt_length() const { return prompt_length_; }
  const std::vector<int>& layers(EncoderSide side) const {
    return side == EncoderSide::vision ? vision_layers_ : text_layers_;
  }

  /// Named as prompt/<task>/<encoder>/<layer>/{K,V}.
  ParameterSet<T> task_parameters(int task) const;
  ParameterSet<T> all_parameters() const;

 private:
  EncoderConfig config_;
  int prompt_length_;
  int task_count_ = 0;
  std::vector<int> vision_layers_;
  std::vector<int> text_layers_;
  std::map<std::tuple<int, EncoderSide, int>, PromptPool<T>> pools_;
};

/// softmax(Q K^T / sqrt(dh)) V computed per head (dh = width / heads);
/// heads = 1 is the single-head form with sqrt(width). Q: [L, width].
template <typename T>
Tensor<T> iki_attention(const Tensor<T>& queries, const PromptPool<T>& pool, int heads = 1);

/// Batched form used inside encoder hooks: queries [batch*heads, L, dh].
template <typename T>
Tensor<T> iki_attention_heads(const Tensor<T>& queries, const PromptPool<T>& pool,
                              std::size_t batch, std::size_t heads);

/// O_ori + weight * O_r with weight in [0,1]; weight 0 returns O_ori itself.
template <typename T>
Tensor<T> iki_residual(const Tensor<T>& original, const Tensor<T>& prompt_out, double weight);

/// Argmax over per-task confidence scores, ties to the lowest task id.
int select_pool(std::span<const double> scores);

/// Batch-wise text prompt weight: mean of sigmoid(score) over the batch.
double text_prompt_weight(std::span<const double> batch_scores);

double sigmoid(double x);

/// Hooks that add pool(task, side, layer) attention scaled per instance:
/// weights[layer] holds one weight per batch item ([batch]). A layer without a
/// pool or without a weight tensor is left untouched.
template <typename T>
HookList<T> make_prompt_hooks(const PromptLibrary<T>& library, int task, EncoderSide side, int depth,
                              std::vector<Tensor<T>> weights);

}  // namespace iap
