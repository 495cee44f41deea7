#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "iap/encoder.hpp"
#include "iap/rng.hpp"

namespace iap {

/// Parameters of the synthetic image world. Every class name is a pair of
/// words; a word owns a fixed random pattern over the whole patch grid and a
/// class archetype is the normalized sum of its two word patterns. Images are
/// archetype + Gaussian noise, passed through the domain's per-patch affine
/// style map.
struct WorldConfig {
  int words = 24;
  int word_length = 5;
  double noise = 0.8;
  /// MTIL domains: strength of the random mixing matrix and offset norm.
  double style_strength = 0.9;
  double style_offset = 2.0;
  int classes_per_domain = 8;
  int train_per_class = 64;
  int test_per_class = 32;

  void validate() const;
};

/// x -> A x + b applied to every patch vector.
struct StyleTransform {
  Eigen::MatrixXd matrix;
  Eigen::VectorXd offset;

  static StyleTransform identity(int patch_dim);
  static StyleTransform random(int patch_dim, double strength, double offset_norm, std::uint64_t seed);
};

struct DomainSpec {
  int domain_id = 0;
  std::string name;
  std::vector<std::string> class_names;
  std::vector<std::vector<double>> archetypes;  // one per class, patches*patch_dim
  double noise = 0.8;
  StyleTransform style;
  int train_per_class = 64;
  int test_per_class = 32;
  std::optional<int> few_shot;

  void validate(const EncoderConfig& enc) const;
};

/// Images stored flat as [count, patches, patch_dim] floats.
struct ImageSet {
  std::vector<float> pixels;
  std::vector<int> labels;
  std::size_t count = 0;
  std::size_t image_size = 0;

  Tensor<float> batch(std::span<const std::size_t> indices, std::size_t patches,
                      std::size_t patch_dim) const;
};

struct DomainData {
  ImageSet train;
  ImageSet test;
  TextBatch class_text;
};

class SyntheticWorld {
 public:
  SyntheticWorld(const EncoderConfig& enc, const WorldConfig& config, std::uint64_t seed);

  const std::vector<std::string>& vocabulary() const { return words_; }

  /// All unordered word pairs, shuffled once by the world seed. Pretraining
  /// takes a prefix, MTIL domains take disjoint slices from the end.
  const std::vector<std::string>& class_pool() const { return class_pool_; }

  std::vector<double> archetype(const std::string& class_name) const;

  /// Domain `index` of the MTIL pool (0-based); index k uses the k-th slice of
  /// classes counted from the end of class_pool() and its own random style.
  DomainSpec mtil_domain(int index, std::optional<int> few_shot = std::nullopt) const;

  const EncoderConfig& encoder() const { return enc_; }
  const WorldConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

 private:
  EncoderConfig enc_;
  WorldConfig config_;
  std::uint64_t seed_;
  std::vector<std::string> words_;
  std::vector<std::vector<double>> word_patterns_;
  std::vector<std::string> class_pool_;
};

/// Deterministic in (spec, seed); train and test are independent draws.
DomainData generate_domain(const DomainSpec& spec, const EncoderConfig& enc, std::uint64_t seed);

/// Renders `count` noisy, styled images of one class.
void render_images(const DomainSpec& spec, int class_index, int count, const EncoderConfig& enc, Rng& rng,
                   std::vector<float>& out);

}  // namespace iap
