#include "iap/encoder.hpp"

#include <cmath>
#include <sstream>

#include "iap/rng.hpp"

namespace iap {

using namespace iap::diff;

void EncoderConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("encoder.") + name + " must be positive");
  };
  positive(vision_depth, "vision_depth");
  positive(text_depth, "text_depth");
  positive(width, "width");
  positive(heads, "heads");
  positive(patch_grid, "patch_grid");
  positive(patch_dim, "patch_dim");
  positive(vocab_size, "vocab_size");
  positive(max_text_len, "max_text_len");
  positive(mlp_ratio, "mlp_ratio");
  if (width % heads != 0) throw ConfigError("encoder.width must be divisible by encoder.heads");
  if (!(contrastive_temperature > 0)) throw ConfigError("encoder.contrastive_temperature must be > 0");
  if (vocab_size <= Tokenizer::kReserved) throw ConfigError("encoder.vocab_size too small for reserved ids");
  if (max_text_len < 5) throw ConfigError("encoder.max_text_len must hold the template prefix");
}

Tokenizer::Tokenizer(int vocab_size, int max_len) : vocab_size_(vocab_size), max_len_(max_len) {
  if (vocab_size <= kReserved) throw ConfigError("tokenizer vocab too small");
}

std::vector<int> Tokenizer::encode(const std::string& class_name) const {
  // ids 2..4 spell the fixed template "a photo of".
  std::vector<int> ids{kStart, 2, 3, 4};
  std::istringstream words(class_name);
  std::string word;
  const auto buckets = static_cast<std::uint64_t>(vocab_size_ - kReserved);
  while (words >> word) {
    const std::string padded = "^" + word + "$";
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
      std::uint64_t h = 14695981039346656037ULL;
      for (std::size_t j = i; j < i + 3; ++j) {
        h ^= static_cast<unsigned char>(padded[j]);
        h *= 1099511628211ULL;
      }
      ids.push_back(kReserved + static_cast<int>(h % buckets));
    }
  }
  ids.resize(static_cast<std::size_t>(max_len_), kPad);
  return ids;
}

TextBatch TextBatch::from_names(const Tokenizer& tok, const std::vector<std::string>& names) {
  TextBatch batch;
  batch.rows = names.size();
  batch.len = static_cast<std::size_t>(tok.max_len());
  for (const auto& n : names) {
    auto ids = tok.encode(n);
    batch.token_ids.insert(batch.token_ids.end(), ids.begin(), ids.end());
  }
  return batch;
}

namespace {

template <typename T>
Tensor<T> init_param(ParameterSet<T>& registry, const std::string& name, Shape shape, Rng& rng,
                     double stddev) {
  auto t = Tensor<T>::parameter(shape, cast_vector<T>(normal_vector(rng, shape_numel(shape), stddev)));
  registry.add(name, t);
  return t;
}

template <typename T>
Tensor<T> const_param(ParameterSet<T>& registry, const std::string& name, Shape shape, double value) {
  auto t = Tensor<T>::parameter(shape, std::vector<T>(shape_numel(shape), static_cast<T>(value)));
  registry.add(name, t);
  return t;
}

}  // namespace

template <typename T>
TransformerStack<T>::TransformerStack(const std::string& prefix, int depth, int width, int heads,
                                      int mlp_ratio, std::uint64_t seed, ParameterSet<T>& registry)
    : width_(width), heads_(heads) {
  const auto d = static_cast<std::size_t>(width);
  const auto hidden = d * static_cast<std::size_t>(mlp_ratio);
  for (int i = 0; i < depth; ++i) {
    Rng rng(derive_seed(seed, prefix, static_cast<std::uint64_t>(i)));
    const std::string p = prefix + "/layer" + std::to_string(i) + "/";
    Layer l;
    l.ln1_g = const_param<T>(registry, p + "ln1_g", {d}, 1.0);
    l.ln1_b = const_param<T>(registry, p + "ln1_b", {d}, 0.0);
    l.qkv_w = init_param<T>(registry, p + "qkv_w", {d, 3 * d}, rng, 1.0 / std::sqrt(double(d)));
    l.qkv_b = const_param<T>(registry, p + "qkv_b", {3 * d}, 0.0);
    l.out_w = init_param<T>(registry, p + "out_w", {d, d}, rng, 1.0 / std::sqrt(double(d) * 2 * depth));
    l.out_b = const_param<T>(registry, p + "out_b", {d}, 0.0);
    l.ln2_g = const_param<T>(registry, p + "ln2_g", {d}, 1.0);
    l.ln2_b = const_param<T>(registry, p + "ln2_b", {d}, 0.0);
    l.fc1_w = init_param<T>(registry, p + "fc1_w", {d, hidden}, rng, 1.0 / std::sqrt(double(d)));
    l.fc1_b = const_param<T>(registry, p + "fc1_b", {hidden}, 0.0);
    l.fc2_w = init_param<T>(registry, p + "fc2_w", {hidden, d}, rng,
                            1.0 / std::sqrt(double(hidden) * 2 * depth));
    l.fc2_b = const_param<T>(registry, p + "fc2_b", {d}, 0.0);
    layers_.push_back(std::move(l));
  }
}

template <typename T>
Tensor<T> TransformerStack<T>::forward(Tensor<T> x, std::size_t batch, std::size_t len,
                                       const HookList<T>& hooks, const Tensor<T>* key_mask) const {
  if (!hooks.empty() && hooks.size() != layers_.size()) {
    throw DimensionError("expected " + std::to_string(layers_.size()) + " layer hooks, got " +
                         std::to_string(hooks.size()));
  }
  const auto d = static_cast<std::size_t>(width_);
  const auto h = static_cast<std::size_t>(heads_);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(d / h));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    auto hn = layernorm(x, l.ln1_g, l.ln1_b);
    auto qkv = add_tiled(matmul(hn, l.qkv_w), l.qkv_b);
    auto q = split_heads(slice_cols(qkv, 0, d), batch, len, h);
    auto k = split_heads(slice_cols(qkv, d, d), batch, len, h);
    auto v = split_heads(slice_cols(qkv, 2 * d, d), batch, len, h);
    auto scores = scale(bmm(q, k, true), inv_sqrt_dh);
    if (key_mask) scores = add(scores, *key_mask);
    auto att = bmm(softmax(scores), v);
    if (!hooks.empty() && hooks[i]) {
      att = hooks[i](AttentionSite<T>{i, batch, len, h, q, att});
    }
    x = add(x, add_tiled(matmul(merge_heads(att, batch, h), l.out_w), l.out_b));
    auto h2 = layernorm(x, l.ln2_g, l.ln2_b);
    auto mlp = add_tiled(matmul(gelu(add_tiled(matmul(h2, l.fc1_w), l.fc1_b)), l.fc2_w), l.fc2_b);
    x = add(x, mlp);
  }
  return x;
}

template <typename T>
DualEncoder<T>::DualEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.width);
  const auto pd = static_cast<std::size_t>(config_.patch_dim);
  const auto tokens = static_cast<std::size_t>(config_.image_tokens());
  const auto tlen = static_cast<std::size_t>(config_.max_text_len);
  Rng rng(derive_seed(seed, "backbone/embeddings"));

  patch_w_ = init_param<T>(params_, "backbone/vision/patch_w", {pd, d}, rng, 1.0 / std::sqrt(double(pd)));
  patch_b_ = const_param<T>(params_, "backbone/vision/patch_b", {d}, 0.0);
  cls_ = init_param<T>(params_, "backbone/vision/cls", {d}, rng, 0.1);
  vision_pos_ = init_param<T>(params_, "backbone/vision/pos", {tokens, d}, rng, 0.1);
  vision_ = TransformerStack<T>("backbone/vision", config_.vision_depth, config_.width, config_.heads,
                                config_.mlp_ratio, derive_seed(seed, "vision"), params_);
  vision_ln_g_ = const_param<T>(params_, "backbone/vision/ln_g", {d}, 1.0);
  vision_ln_b_ = const_param<T>(params_, "backbone/vision/ln_b", {d}, 0.0);
  vision_proj_ = init_param<T>(params_, "backbone/vision/proj", {d, d}, rng, 1.0 / std::sqrt(double(d)));

  token_emb_ = init_param<T>(params_, "backbone/text/token_emb",
                             {static_cast<std::size_t>(config_.vocab_size), d}, rng, 0.1);
  text_pos_ = init_param<T>(params_, "backbone/text/pos", {tlen, d}, rng, 0.1);
  text_ = TransformerStack<T>("backbone/text", config_.text_depth, config_.width, config_.heads,
                              config_.mlp_ratio, derive_seed(seed, "text"), params_);
  text_ln_g_ = const_param<T>(params_, "backbone/text/ln_g", {d}, 1.0);
  text_ln_b_ = const_param<T>(params_, "backbone/text/ln_b", {d}, 0.0);
  text_proj_ = init_param<T>(params_, "backbone/text/proj", {d, d}, rng, 1.0 / std::sqrt(double(d)));
}

template <typename T>
Tensor<T> DualEncoder<T>::finish(const Tensor<T>& x, std::size_t batch, std::size_t len,
                                 const Tensor<T>& ln_g, const Tensor<T>& ln_b,
                                 const Tensor<T>& proj) const {
  const auto d = static_cast<std::size_t>(config_.width);
  auto pooled = select_token(reshape(x, {batch, len, d}), 0);
  return l2_normalize(matmul(layernorm(pooled, ln_g, ln_b), proj));
}

template <typename T>
Tensor<T> DualEncoder<T>::encode_image(const Tensor<T>& pixels, const HookList<T>& hooks) const {
  const auto p = static_cast<std::size_t>(config_.patches());
  const auto pd = static_cast<std::size_t>(config_.patch_dim);
  const auto d = static_cast<std::size_t>(config_.width);
  if (pixels.rank() != 3 || pixels.dim(1) != p || pixels.dim(2) != pd) {
    throw DimensionError("encode_image: expected [batch x " + std::to_string(p) + " x " +
                         std::to_string(pd) + "], got " + shape_str(pixels.shape()));
  }
  const std::size_t batch = pixels.dim(0);
  const std::size_t len = p + 1;
  auto emb = add_tiled(matmul(reshape(pixels, {batch * p, pd}), patch_w_), patch_b_);
  auto seq = add_tiled(prepend_token(reshape(emb, {batch, p, d}), cls_), vision_pos_);
  auto x = vision_.forward(reshape(seq, {batch * len, d}), batch, len, hooks, nullptr);
  return finish(x, batch, len, vision_ln_g_, vision_ln_b_, vision_proj_);
}

template <typename T>
Tensor<T> DualEncoder<T>::encode_text(const TextBatch& text, const HookList<T>& hooks) const {
  const auto d = static_cast<std::size_t>(config_.width);
  const auto len = static_cast<std::size_t>(config_.max_text_len);
  if (text.rows == 0 || text.len != len || text.token_ids.size() != text.rows * len) {
    throw DimensionError("encode_text: expected rows x " + std::to_string(len) + " token ids");
  }
  const std::size_t batch = text.rows;
  const auto h = static_cast<std::size_t>(config_.heads);
  auto x = add_tiled(reshape(embedding_lookup(token_emb_, text.token_ids), {batch, len, d}), text_pos_);

  // Padding keys are masked out for every query of the sentence.
  std::vector<T> mask(batch * h * len * len, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < len; ++k) {
      if (text.token_ids[b * len + k] != Tokenizer::kPad) continue;
      for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t qi = 0; qi < len; ++qi) mask[((b * h + hh) * len + qi) * len + k] = T(-1e9);
    }
  }
  auto key_mask = Tensor<T>::constant({batch * h, len, len}, std::move(mask));
  auto out = text_.forward(reshape(x, {batch * len, d}), batch, len, hooks, &key_mask);
  return finish(out, batch, len, text_ln_g_, text_ln_b_, text_proj_);
}

template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& img, const Tensor<T>& txt, T temperature) {
  if (img.rank() != 2 || txt.rank() != 2 || img.dim(0) != txt.dim(0) || img.dim(1) != txt.dim(1)) {
    throw DimensionError("contrastive_loss: image " + shape_str(img.shape()) + " vs text " +
                         shape_str(txt.shape()));
  }
  const std::size_t n = img.dim(0);
  auto logits = scale(matmul(l2_normalize(img), l2_normalize(txt), true), T(1) / temperature);
  std::vector<int> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = static_cast<int>(i);
  return scale(sum(pick(log_softmax(logits), diag)), T(-1));
}

template <typename T>
Tensor<T> class_contrastive_loss(const Tensor<T>& img, const Tensor<T>& class_txt,
                                 std::span<const int> labels, T temperature) {
  if (img.rank() != 2 || class_txt.rank() != 2 || img.dim(1) != class_txt.dim(1) ||
      labels.size() != img.dim(0)) {
    throw DimensionError("class_contrastive_loss: image " + shape_str(img.shape()) + ", classes " +
                         shape_str(class_txt.shape()) + ", " + std::to_string(labels.size()) +
                         " labels");
  }
  auto logits = scale(matmul(l2_normalize(img), l2_normalize(class_txt), true), T(1) / temperature);
  return scale(mean(pick(log_softmax(logits), labels)), T(-1));
}

template <typename T>
std::vector<int> classify(const Tensor<T>& img, const Tensor<T>& class_txt) {
  if (img.rank() != 2 || class_txt.rank() != 2 || img.dim(1) != class_txt.dim(1)) {
    throw DimensionError("classify: image " + shape_str(img.shape()) + " vs classes " +
                         shape_str(class_txt.shape()));
  }
  const std::size_t n = img.dim(0), m = class_txt.dim(0), d = img.dim(1);
  auto iv = img.values();
  auto tv = class_txt.values();
  std::vector<double> tnorm(m);
  for (std::size_t c = 0; c < m; ++c) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += double(tv[c * d + j]) * double(tv[c * d + j]);
    tnorm[c] = std::sqrt(ss);
  }
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += double(iv[i * d + j]) * double(tv[c * d + j]);
      // Image norm is a positive per-row constant and does not move the argmax.
      const double sim = tnorm[c] > 0 ? dot / tnorm[c] : 0.0;
      if (sim > best) {
        best = sim;
        out[i] = static_cast<int>(c);
      }
    }
  }
  return out;
}

template class TransformerStack<float>;
template class TransformerStack<double>;
template class DualEncoder<float>;
template class DualEncoder<double>;
template Tensor<float> contrastive_loss(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> contrastive_loss(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> class_contrastive_loss(const Tensor<float>&, const Tensor<float>&,
                                              std::span<const int>, float);
template Tensor<double> class_contrastive_loss(const Tensor<double>&, const Tensor<double>&,
                                               std::span<const int>, double);
template std::vector<int> classify(const Tensor<float>&, const Tensor<float>&);
template std::vector<int> classify(const Tensor<double>&, const Tensor<double>&);

}  // namespace iap
