#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "iap/diffcore/ops.hpp"
#include "iap/diffcore/tensor.hpp"

namespace iap {

using diff::ParameterSet;
using diff::Tensor;

struct EncoderConfig {
  int vision_depth = 4;
  int text_depth = 4;
  int width = 64;
  int heads = 4;
  int patch_grid = 4;
  int patch_dim = 16;
  int vocab_size = 512;
  int max_text_len = 16;
  int mlp_ratio = 4;
  double contrastive_temperature = 0.07;

  void validate() const;
  int patches() const { return patch_grid * patch_grid; }
  int image_tokens() const { return patches() + 1; }
  int head_dim() const { return width / heads; }
};

/// Class-name tokenizer: "<sot> a photo of" followed by hashed character
/// trigrams of every word, padded with 0 to max_text_len.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kReserved = 8;

  Tokenizer(int vocab_size, int max_len);

  std::vector<int> encode(const std::string& class_name) const;
  int vocab_size() const { return vocab_size_; }
  int max_len() const { return max_len_; }

 private:
  int vocab_size_;
  int max_len_;
};

/// One row of token ids per class sentence, row-major [rows x len].
struct TextBatch {
  std::vector<int> token_ids;
  std::size_t rows = 0;
  std::size_t len = 0;

  static TextBatch from_names(const Tokenizer& tok, const std::vector<std::string>& names);
};

/// What a per-layer hook sees: per-head queries and the layer's own attention
/// output, both [batch*heads, len, head_dim].
template <typename T>
struct AttentionSite {
  std::size_t layer;
  std::size_t batch;
  std::size_t len;
  std::size_t heads;
  const Tensor<T>& queries;
  const Tensor<T>& output;
};

/// Returns the (possibly modified) attention output for a layer.
template <typename T>
using AttentionHook = std::function<Tensor<T>(const AttentionSite<T>&)>;

/// Either empty (all layers untouched) or exactly one entry per layer; an
/// empty std::function is a no-op for its layer.
template <typename T>
using HookList = std::vector<AttentionHook<T>>;

template <typename T>
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(const std::string& prefix, int depth, int width, int heads, int mlp_ratio,
                   std::uint64_t seed, ParameterSet<T>& registry);

  /// x: [batch*len, width]; key_mask (optional) additive [batch*heads, len, len].
  Tensor<T> forward(Tensor<T> x, std::size_t batch, std::size_t len, const HookList<T>& hooks,
                    const Tensor<T>* key_mask) const;

  int depth() const { return static_cast<int>(layers_.size()); }

 private:
  struct Layer {
    Tensor<T> ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::vector<Layer> layers_;
  int width_ = 0;
  int heads_ = 0;
};

/// Tiny CLIP-style dual encoder: patch-grid ViT plus token transformer, both
/// producing unit-norm embeddings of size `width`.
template <typename T>
class DualEncoder {
 public:
  DualEncoder(const EncoderConfig& config, std::uint64_t seed);

  /// pixels: [batch, patches, patch_dim].
  Tensor<T> encode_image(const Tensor<T>& pixels, const HookList<T>& hooks = {}) const;
  Tensor<T> encode_text(const TextBatch& text, const HookList<T>& hooks = {}) const;

  const EncoderConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

 private:
  Tensor<T> finish(const Tensor<T>& x, std::size_t batch, std::size_t len, const Tensor<T>& ln_g,
                   const Tensor<T>& ln_b, const Tensor<T>& proj) const;

  EncoderConfig config_;
  ParameterSet<T> params_;
  TransformerStack<T> vision_;
  TransformerStack<T> text_;
  Tensor<T> patch_w_, patch_b_, cls_, vision_pos_, vision_ln_g_, vision_ln_b_, vision_proj_;
  Tensor<T> token_emb_, text_pos_, text_ln_g_, text_ln_b_, text_proj_;
};

/// -sum_i log softmax_j(sim(v_i, t_j) / tau)[i]; row i of txt is the match of
/// row i of img. Rows are re-normalized so arbitrary inputs give cosine sims.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& img, const Tensor<T>& txt, T temperature);

/// Same objective with the text side restricted to the distinct class
/// sentences: mean over images of -log softmax_c(sim(v_i, t_c) / tau)[y_i].
template <typename T>
Tensor<T> class_contrastive_loss(const Tensor<T>& img, const Tensor<T>& class_txt,
                                 std::span<const int> labels, T temperature);

/// Argmax cosine similarity per image row; ties go to the lowest class index.
template <typename T>
std::vector<int> classify(const Tensor<T>& img, const Tensor<T>& class_txt);

}  // namespace iap
