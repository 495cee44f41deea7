#include "iap/world.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <set>

#include "iap/rng.hpp"

namespace iap {

void WorldConfig::validate() const {
  if (words < 4) throw ConfigError("world.words must be >= 4");
  if (word_length < 2) throw ConfigError("world.word_length must be >= 2");
  if (!(noise >= 0)) throw ConfigError("world.noise must be >= 0");
  if (!(style_strength >= 0)) throw ConfigError("world.style_strength must be >= 0");
  if (!(style_offset >= 0)) throw ConfigError("world.style_offset must be >= 0");
  if (classes_per_domain < 2) throw ConfigError("world.classes_per_domain must be >= 2");
  if (train_per_class < 1 || test_per_class < 1) throw ConfigError("world sample counts must be >= 1");
}

StyleTransform StyleTransform::identity(int patch_dim) {
  return {Eigen::MatrixXd::Identity(patch_dim, patch_dim), Eigen::VectorXd::Zero(patch_dim)};
}

StyleTransform StyleTransform::random(int patch_dim, double strength, double offset_norm, std::uint64_t seed) {
  Rng rng(seed);
  const auto pd = static_cast<std::size_t>(patch_dim);
  for (int attempt = 0;; ++attempt) {
    auto r = normal_vector(rng, pd * pd, 1.0 / std::sqrt(double(patch_dim)));
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(patch_dim, patch_dim) +
                        strength * Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                            Eigen::RowMajor>>(r.data(), patch_dim, patch_dim);
    // Keep the map comfortably invertible.
    Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
    if (lu.rank() == patch_dim && std::abs(lu.determinant()) > 1e-3) {
      auto o = normal_vector(rng, pd);
      Eigen::VectorXd off = Eigen::Map<Eigen::VectorXd>(o.data(), patch_dim);
      off *= offset_norm / std::max(off.norm(), 1e-12);
      return {m, off};
    }
    if (attempt > 100) throw NumericError("could not draw an invertible style transform");
  }
}

void DomainSpec::validate(const EncoderConfig& enc) const {
  if (class_names.empty()) throw ConfigError("domain " + name + ": no classes");
  if (archetypes.size() < class_names.size()) {
    throw ConfigError("domain " + name + ": " + std::to_string(archetypes.size()) + " archetypes for " +
                      std::to_string(class_names.size()) + " classes");
  }
  const auto size = static_cast<std::size_t>(enc.patches() * enc.patch_dim);
  for (const auto& a : archetypes) {
    if (a.size() != size) throw ConfigError("domain " + name + ": archetype size mismatch");
  }
  if (style.matrix.rows() != enc.patch_dim || style.matrix.cols() != enc.patch_dim ||
      style.offset.size() != enc.patch_dim) {
    throw ConfigError("domain " + name + ": style transform does not match patch_dim");
  }
  if (train_per_class < 1 || test_per_class < 1) throw ConfigError("domain " + name + ": empty split");
  if (few_shot && *few_shot < 1) throw ConfigError("domain " + name + ": few_shot must be >= 1");
  std::set<std::string> unique(class_names.begin(), class_names.end());
  if (unique.size() != class_names.size()) throw ConfigError("domain " + name + ": duplicate class names");
}

Tensor<float> ImageSet::batch(std::span<const std::size_t> indices, std::size_t patches,
                              std::size_t patch_dim) const {
  std::vector<float> out(indices.size() * image_size);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= count) throw IndexError("image index out of range");
    std::copy_n(pixels.data() + indices[i] * image_size, image_size, out.data() + i * image_size);
  }
  return Tensor<float>::constant({indices.size(), patches, patch_dim}, std::move(out));
}

SyntheticWorld::SyntheticWorld(const EncoderConfig& enc, const WorldConfig& config, std::uint64_t seed)
    : enc_(enc), config_(config), seed_(seed) {
  enc_.validate();
  config_.validate();
  Rng rng(derive_seed(seed, "world/words"));
  const std::string consonants = "bdfgklmnprstvz";
  const std::string vowels = "aeiou";
  std::set<std::string> used;
  while (static_cast<int>(words_.size()) < config_.words) {
    std::string w;
    for (int i = 0; i < config_.word_length; ++i) {
      const auto& pool = (i % 2 == 0) ? consonants : vowels;
      w += pool[rng() % pool.size()];
    }
    if (used.insert(w).second) words_.push_back(w);
  }
  const auto size = static_cast<std::size_t>(enc_.patches() * enc_.patch_dim);
  Rng prng(derive_seed(seed, "world/patterns"));
  for (std::size_t i = 0; i < words_.size(); ++i) word_patterns_.push_back(normal_vector(prng, size));

  for (std::size_t i = 0; i < words_.size(); ++i)
    for (std::size_t j = i + 1; j < words_.size(); ++j) class_pool_.push_back(words_[i] + " " + words_[j]);
  Rng srng(derive_seed(seed, "world/class_pool"));
  std::shuffle(class_pool_.begin(), class_pool_.end(), srng);

  // Distinct class names must stay distinct after tokenization.
  Tokenizer tok(enc_.vocab_size, enc_.max_text_len);
  std::set<std::vector<int>> seqs;
  for (const auto& c : class_pool_) {
    if (!seqs.insert(tok.encode(c)).second) {
      throw ConfigError("tokenizer collision for class '" + c + "'; raise encoder.vocab_size");
    }
  }
}

std::vector<double> SyntheticWorld::archetype(const std::string& class_name) const {
  const auto space = class_name.find(' ');
  if (space == std::string::npos) throw ArgumentError("class name must be two words: " + class_name);
  const auto a = std::find(words_.begin(), words_.end(), class_name.substr(0, space));
  const auto b = std::find(words_.begin(), words_.end(), class_name.substr(space + 1));
  if (a == words_.end() || b == words_.end()) throw ArgumentError("unknown words in class " + class_name);
  const auto& pa = word_patterns_[static_cast<std::size_t>(a - words_.begin())];
  const auto& pb = word_patterns_[static_cast<std::size_t>(b - words_.begin())];
  std::vector<double> out(pa.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (pa[i] + pb[i]) / std::sqrt(2.0);
  return out;
}

DomainSpec SyntheticWorld::mtil_domain(int index, std::optional<int> few_shot) const {
  const int m = config_.classes_per_domain;
  const auto end = static_cast<long>(class_pool_.size()) - static_cast<long>(index) * m;
  if (index < 0 || end - m < 0) throw ConfigError("not enough word pairs for domain " + std::to_string(index));
  DomainSpec spec;
  spec.domain_id = index;
  spec.name = "domain" + std::to_string(index);
  for (long i = end - m; i < end; ++i) {
    spec.class_names.push_back(class_pool_[static_cast<std::size_t>(i)]);
    spec.archetypes.push_back(archetype(spec.class_names.back()));
  }
  spec.noise = config_.noise;
  spec.style = StyleTransform::random(enc_.patch_dim, config_.style_strength, config_.style_offset,
                                      derive_seed(seed_, "world/style", static_cast<std::uint64_t>(index)));
  spec.train_per_class = config_.train_per_class;
  spec.test_per_class = config_.test_per_class;
  spec.few_shot = few_shot;
  return spec;
}

void render_images(const DomainSpec& spec, int class_index, int count, const EncoderConfig& enc, Rng& rng,
                   std::vector<float>& out) {
  const int patches = enc.patches();
  const int pd = enc.patch_dim;
  const auto& arch = spec.archetypes.at(static_cast<std::size_t>(class_index));
  std::normal_distribution<double> noise(0.0, 1.0);
  Eigen::VectorXd patch(pd);
  for (int n = 0; n < count; ++n) {
    for (int p = 0; p < patches; ++p) {
      for (int j = 0; j < pd; ++j) patch[j] = arch[static_cast<std::size_t>(p * pd + j)] + spec.noise * noise(rng);
      Eigen::VectorXd styled = spec.style.matrix * patch + spec.style.offset;
      for (int j = 0; j < pd; ++j) out.push_back(static_cast<float>(styled[j]));
    }
  }
}

DomainData generate_domain(const DomainSpec& spec, const EncoderConfig& enc, std::uint64_t seed) {
  spec.validate(enc);
  DomainData data;
  const auto image_size = static_cast<std::size_t>(enc.patches() * enc.patch_dim);
  const int train_n = spec.few_shot ? std::min(*spec.few_shot, spec.train_per_class) : spec.train_per_class;
  Rng train_rng(derive_seed(seed, "train"));
  Rng test_rng(derive_seed(seed, "test"));
  for (std::size_t c = 0; c < spec.class_names.size(); ++c) {
    render_images(spec, static_cast<int>(c), train_n, enc, train_rng, data.train.pixels);
    render_images(spec, static_cast<int>(c), spec.test_per_class, enc, test_rng, data.test.pixels);
    data.train.labels.insert(data.train.labels.end(), static_cast<std::size_t>(train_n), static_cast<int>(c));
    data.test.labels.insert(data.test.labels.end(), static_cast<std::size_t>(spec.test_per_class),
                            static_cast<int>(c));
  }
  data.train.count = data.train.labels.size();
  data.test.count = data.test.labels.size();
  data.train.image_size = data.test.image_size = image_size;
  data.class_text = TextBatch::from_names(Tokenizer(enc.vocab_size, enc.max_text_len), spec.class_names);
  return data;
}

}  // namespace iap
