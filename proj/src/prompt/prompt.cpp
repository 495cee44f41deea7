#include "iap/prompt.hpp"

#include <algorithm>
#include <cmath>

#include "iap/rng.hpp"

namespace iap {

using namespace iap::diff;

const char* to_string(EncoderSide side) { return side == EncoderSide::vision ? "vision" : "text"; }

template <typename T>
PromptLibrary<T>::PromptLibrary(const EncoderConfig& config, int prompt_length, int max_text_layers)
    : config_(config), prompt_length_(prompt_length) {
  if (prompt_length <= 0) throw ConfigError("prompt length must be positive");
  if (max_text_layers < 0) throw ConfigError("text prompt layer count must be >= 0");
  for (int i = 0; i < config.vision_depth; ++i) vision_layers_.push_back(i);
  for (int i = 0; i < std::min(max_text_layers, config.text_depth); ++i) text_layers_.push_back(i);
}

template <typename T>
int PromptLibrary<T>::add_task(std::uint64_t seed) {
  const int task = task_count_++;
  const auto l = static_cast<std::size_t>(prompt_length_);
  const auto d = static_cast<std::size_t>(config_.width);
  for (auto side : {EncoderSide::vision, EncoderSide::text}) {
    for (int layer : layers(side)) {
      Rng rng(derive_seed(seed, to_string(side), static_cast<std::uint64_t>(layer)));
      PromptPool<T> p;
      p.keys = Tensor<T>::parameter({l, d}, cast_vector<T>(normal_vector(rng, l * d, 0.02)));
      p.values = Tensor<T>::parameter({l, d}, std::vector<T>(l * d, T(0)));
      p.layer = layer;
      pools_.emplace(std::tuple{task, side, layer}, std::move(p));
    }
  }
  open_session(-1);
  return task;
}

template <typename T>
void PromptLibrary<T>::open_session(int task) {
  if (task >= task_count_) throw StateError("open_session: unknown task " + std::to_string(task));
  for (auto& [key, p] : pools_) {
    const bool on = std::get<0>(key) == task;
    p.keys.set_trainable(on);
    p.values.set_trainable(on);
  }
}

template <typename T>
bool PromptLibrary<T>::has_pool(int task, EncoderSide side, int layer) const {
  return pools_.count(std::tuple{task, side, layer}) > 0;
}

template <typename T>
const PromptPool<T>& PromptLibrary<T>::pool(int task, EncoderSide side, int layer) const {
  auto it = pools_.find(std::tuple{task, side, layer});
  if (it == pools_.end()) {
    throw IndexError("no prompt pool for task " + std::to_string(task) + ", " + to_string(side) +
                     " layer " + std::to_string(layer));
  }
  return it->second;
}

template <typename T>
ParameterSet<T> PromptLibrary<T>::task_parameters(int task) const {
  ParameterSet<T> out;
  for (auto side : {EncoderSide::vision, EncoderSide::text}) {
    for (int layer : layers(side)) {
      const auto& p = pool(task, side, layer);
      const std::string base = "prompt/" + std::to_string(task) + "/" + to_string(side) + "/" +
                               std::to_string(layer) + "/";
      out.add(base + "K", p.keys);
      out.add(base + "V", p.values);
    }
  }
  return out;
}

template <typename T>
ParameterSet<T> PromptLibrary<T>::all_parameters() const {
  ParameterSet<T> out;
  for (int t = 0; t < task_count_; ++t) out.extend(task_parameters(t));
  return out;
}

template <typename T>
Tensor<T> iki_attention_heads(const Tensor<T>& queries, const PromptPool<T>& pool, std::size_t batch,
                              std::size_t heads) {
  const std::size_t l = pool.keys.dim(0);
  const std::size_t width = pool.keys.dim(1);
  if (queries.rank() != 3 || queries.dim(0) != batch * heads || queries.dim(2) * heads != width) {
    throw DimensionError("iki_attention: queries " + shape_str(queries.shape()) + " vs pool width " +
                         std::to_string(width) + " with " + std::to_string(heads) + " heads");
  }
  const T inv = T(1) / std::sqrt(static_cast<T>(width / heads));
  auto k = repeat_groups(split_heads(pool.keys, 1, l, heads), batch);
  auto v = repeat_groups(split_heads(pool.values, 1, l, heads), batch);
  return bmm(softmax(scale(bmm(queries, k, true), inv)), v);
}

template <typename T>
Tensor<T> iki_attention(const Tensor<T>& queries, const PromptPool<T>& pool, int heads) {
  if (queries.rank() != 2 || pool.keys.rank() != 2 || queries.dim(1) != pool.keys.dim(1)) {
    throw DimensionError("iki_attention: query " + shape_str(queries.shape()) + " vs pool " +
                         shape_str(pool.keys.shape()));
  }
  if (heads <= 0 || queries.dim(1) % static_cast<std::size_t>(heads) != 0) {
    throw DimensionError("iki_attention: width not divisible by head count");
  }
  const auto h = static_cast<std::size_t>(heads);
  const std::size_t len = queries.dim(0);
  auto q = split_heads(queries, 1, len, h);
  return merge_heads(iki_attention_heads(q, pool, 1, h), 1, h);
}

template <typename T>
Tensor<T> iki_residual(const Tensor<T>& original, const Tensor<T>& prompt_out, double weight) {
  if (!(weight >= 0.0 && weight <= 1.0)) {
    throw ArgumentError("prompt weight " + std::to_string(weight) + " outside [0, 1]");
  }
  if (original.shape() != prompt_out.shape()) {
    throw DimensionError("iki_residual: " + shape_str(original.shape()) + " vs " +
                         shape_str(prompt_out.shape()));
  }
  if (weight == 0.0) return original;
  if (weight == 1.0) return add(original, prompt_out);
  return add(original, scale(prompt_out, static_cast<T>(weight)));
}

int select_pool(std::span<const double> scores) {
  if (scores.empty()) throw StateError("select_pool: no seen tasks");
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double text_prompt_weight(std::span<const double> batch_scores) {
  if (batch_scores.empty()) throw ArgumentError("text_prompt_weight: empty batch");
  double total = 0;
  for (double s : batch_scores) total += sigmoid(s);
  return total / static_cast<double>(batch_scores.size());
}

template <typename T>
HookList<T> make_prompt_hooks(const PromptLibrary<T>& library, int task, EncoderSide side, int depth,
                              std::vector<Tensor<T>> weights) {
  if (weights.size() != static_cast<std::size_t>(depth)) {
    throw DimensionError("make_prompt_hooks: " + std::to_string(weights.size()) + " weight tensors for " +
                         std::to_string(depth) + " layers");
  }
  HookList<T> hooks(static_cast<std::size_t>(depth));
  for (int layer = 0; layer < depth; ++layer) {
    if (!library.has_pool(task, side, layer) || !weights[layer].defined()) continue;
    const PromptPool<T>* pool = &library.pool(task, side, layer);
    Tensor<T> w = weights[layer];
    hooks[layer] = [pool, w](const AttentionSite<T>& site) {
      if (w.numel() != site.batch) {
        throw DimensionError("prompt hook: " + std::to_string(w.numel()) + " weights for batch " +
                             std::to_string(site.batch));
      }
      auto prompt_out = iki_attention_heads(site.queries, *pool, site.batch, site.heads);
      return add_scaled_groups(site.output, prompt_out, w);
    };
  }
  return hooks;
}

template class PromptLibrary<float>;
template class PromptLibrary<double>;

#define IAP_INSTANTIATE_PROMPT(T)                                                                    \
  template Tensor<T> iki_attention(const Tensor<T>&, const PromptPool<T>&, int);                     \
  template Tensor<T> iki_attention_heads(const Tensor<T>&, const PromptPool<T>&, std::size_t,        \
                                         std::size_t);                                               \
  template Tensor<T> iki_residual(const Tensor<T>&, const Tensor<T>&, double);                       \
  template HookList<T> make_prompt_hooks(const PromptLibrary<T>&, int, EncoderSide, int,             \
                                         std::vector<Tensor<T>>);

IAP_INSTANTIATE_PROMPT(float)
IAP_INSTANTIATE_PROMPT(double)

}  // namespace iap
