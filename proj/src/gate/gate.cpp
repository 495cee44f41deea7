#include "iap/gate.hpp"

#include <cmath>

namespace iap {

using namespace iap::diff;

const char* to_string(GateMode mode) {
  switch (mode) {
    case GateMode::hard: return "hard";
    case GateMode::soft: return "soft";
    case GateMode::random: return "random";
    case GateMode::always_on: return "always_on";
  }
  return "?";
}

GateMode gate_mode_from_string(const std::string& s) {
  if (s == "hard") return GateMode::hard;
  if (s == "soft") return GateMode::soft;
  if (s == "random") return GateMode::random;
  if (s == "always_on") return GateMode::always_on;
  throw ConfigError("gate.mode: unknown value '" + s + "' (hard, soft, random, always_on)");
}

void GateConfig::validate() const {
  if (!(temperature > 0)) throw ConfigError("gate.temperature must be > 0");
  if (!(noise_clamp > 0 && noise_clamp < 0.5)) throw ConfigError("gate.noise_clamp must lie in (0, 0.5)");
}

double gumbel_from_uniform(double u, double eps) {
  u = std::clamp(u, eps, 1.0 - eps);
  return -std::log(-std::log(u));
}

double gumbel_noise(Rng& rng, double eps) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return gumbel_from_uniform(dist(rng), eps);
}

GateDecision gate_decide(std::array<double, 2> logits, std::array<double, 2> noise, double tau) {
  const double a = (logits[0] + noise[0]) / tau;
  const double b = (logits[1] + noise[1]) / tau;
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  GateDecision d;
  d.soft = {ea / (ea + eb), eb / (ea + eb)};
  d.open = d.soft[0] > d.soft[1];
  d.hard = d.open ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
  return d;
}

template <typename T>
GateParams<T>::GateParams(int task, int layers, int feature_dim, std::uint64_t seed)
    : feature_dim_(feature_dim) {
  const auto df = static_cast<std::size_t>(feature_dim);
  for (int i = 0; i < layers; ++i) {
    Rng rng(derive_seed(seed, "gate", static_cast<std::uint64_t>(i)));
    auto w = Tensor<T>::parameter({df, 2}, cast_vector<T>(normal_vector(rng, df * 2, 0.02)));
    auto b = Tensor<T>::parameter({2}, std::vector<T>(2, T(0)));
    const std::string base = "gate/" + std::to_string(task) + "/" + std::to_string(i) + "/";
    params_.add(base + "W", w);
    params_.add(base + "b", b);
    weights_.push_back(w);
    biases_.push_back(b);
  }
}

template <typename T>
std::array<double, 2> GateParams<T>::logits(int layer, std::span<const T> features) const {
  if (features.size() != static_cast<std::size_t>(feature_dim_)) {
    throw DimensionError("gate: feature dim " + std::to_string(features.size()) + ", expected " +
                         std::to_string(feature_dim_));
  }
  auto w = weights_.at(layer).values();
  auto b = biases_.at(layer).values();
  std::array<double, 2> z{double(b[0]), double(b[1])};
  for (std::size_t j = 0; j < features.size(); ++j) {
    z[0] += double(features[j]) * double(w[j * 2]);
    z[1] += double(features[j]) * double(w[j * 2 + 1]);
  }
  return z;
}

template <typename T>
GateDecision gate_forward(std::span<const T> features, const GateParams<T>& params, int layer,
                          const GateConfig& config, Rng& rng, bool training) {
  auto z = params.logits(layer, features);
  switch (config.mode) {
    case GateMode::always_on: {
      GateDecision d;
      d.soft = {1.0, 0.0};
      d.hard = {1.0, 0.0};
      d.open = true;
      return d;
    }
    case GateMode::random: {
      std::bernoulli_distribution coin(0.5);
      GateDecision d;
      d.open = coin(rng);
      d.hard = d.open ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
      return d;
    }
    case GateMode::hard:
    case GateMode::soft:
      break;
  }
  std::array<double, 2> noise{0.0, 0.0};
  if (training) {
    noise[0] = gumbel_noise(rng, config.noise_clamp);
    noise[1] = gumbel_noise(rng, config.noise_clamp);
  }
  return gate_decide(z, noise, config.temperature);
}

template <typename T>
GateOutput<T> gate_layer(const Tensor<T>& features, const GateParams<T>& params, int layer,
                         const GateConfig& config, Rng& rng, bool training) {
  if (features.rank() != 2 || features.dim(1) != static_cast<std::size_t>(params.feature_dim())) {
    throw DimensionError("gate_layer: features " + shape_str(features.shape()) + ", expected [batch x " +
                         std::to_string(params.feature_dim()) + "]");
  }
  const std::size_t batch = features.dim(0);
  GateOutput<T> out;
  out.decisions.resize(batch);

  if (config.mode == GateMode::always_on || config.mode == GateMode::random) {
    std::vector<T> w(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      auto row = features.values().subspan(i * features.dim(1), features.dim(1));
      out.decisions[i] = gate_forward<T>(row, params, layer, config, rng, training);
      w[i] = out.decisions[i].open ? T(1) : T(0);
    }
    out.weight = Tensor<T>::constant({batch}, std::move(w));
    return out;
  }

  auto z = add_tiled(matmul(features, params.weight(layer)), params.bias(layer));
  if (training) {
    std::vector<T> noise(batch * 2);
    for (auto& g : noise) g = static_cast<T>(gumbel_noise(rng, config.noise_clamp));
    z = add(z, Tensor<T>::constant({batch, 2}, std::move(noise)));
  }
  auto probs = softmax(scale(z, static_cast<T>(1.0 / config.temperature)));
  const std::vector<int> on_column(batch, 0);
  auto soft_on = pick(probs, on_column);

  std::vector<T> hard_on(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    auto& d = out.decisions[i];
    d.soft = {double(probs.values()[i * 2]), double(probs.values()[i * 2 + 1])};
    d.open = probs.values()[i * 2] > probs.values()[i * 2 + 1];
    d.hard = d.open ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
    hard_on[i] = d.open ? T(1) : T(0);
  }

  if (config.mode == GateMode::soft) {
    out.weight = training ? soft_on : soft_on.detach();
  } else {
    out.weight = training ? straight_through<T>(hard_on, soft_on)
                          : Tensor<T>::constant({batch}, std::move(hard_on));
  }
  return out;
}

template <typename T>
Tensor<T> gated_residual(const Tensor<T>& original, const Tensor<T>& prompt_out,
                         const GateDecision& decision, double weight, bool training) {
  if (!(weight >= 0.0 && weight <= 1.0)) {
    throw ArgumentError("prompt weight " + std::to_string(weight) + " outside [0, 1]");
  }
  if (original.shape() != prompt_out.shape()) {
    throw DimensionError("gated_residual: " + shape_str(original.shape()) + " vs " +
                         shape_str(prompt_out.shape()));
  }
  const double factor = decision.hard[0] * (training ? 1.0 : weight);
  if (factor == 0.0) return original;
  if (factor == 1.0) return add(original, prompt_out);
  return add(original, scale(prompt_out, static_cast<T>(factor)));
}

double gate_usage_stats(const std::vector<std::vector<bool>>& open_flags) {
  if (open_flags.empty()) throw ArgumentError("gate_usage_stats: empty decision stream");
  double total = 0;
  for (const auto& inst : open_flags) {
    for (bool o : inst) total += o ? 1.0 : 0.0;
  }
  return total / static_cast<double>(open_flags.size());
}

template class GateParams<float>;
template class GateParams<double>;

#define IAP_INSTANTIATE_GATE(T)                                                                   \
  template GateDecision gate_forward(std::span<const T>, const GateParams<T>&, int,               \
                                     const GateConfig&, Rng&, bool);                              \
  template GateOutput<T> gate_layer(const Tensor<T>&, const GateParams<T>&, int, const GateConfig&, \
                                    Rng&, bool);                                                  \
  template Tensor<T> gated_residual(const Tensor<T>&, const Tensor<T>&, const GateDecision&, double, \
                                    bool);

IAP_INSTANTIATE_GATE(float)
IAP_INSTANTIATE_GATE(double)

}  // namespace iap
