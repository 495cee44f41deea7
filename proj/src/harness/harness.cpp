#include "iap/harness.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>

#include "iap/errors.hpp"
#include "iap/io.hpp"

namespace iap {

using namespace iap::diff;

TaskStream make_stream(const SyntheticWorld& world, const StreamConfig& config) {
  config.validate();
  TaskStream s;
  s.order = config.order;
  for (int i = 0; i < config.domains; ++i) s.domains.push_back(world.mtil_domain(i, config.few_shot));
  if (config.order == "order-2") std::reverse(s.domains.begin(), s.domains.end());
  return s;
}

ModelState::ModelState(DualEncoder<float> bb, const PromptConfig& prompt)
    : backbone(std::move(bb)), prompts(backbone.config(), prompt.length, prompt.max_text_layers) {
  backbone.parameters().set_trainable(false);
}

namespace {

std::uint64_t backbone_seed(const RunConfig& c) { return derive_seed(c.seed, "backbone"); }

std::string backbone_fingerprint(const RunConfig& c) {
  auto j = config_to_json(c);
  json f;
  f["seed"] = j["seed"];
  f["encoder"] = j["encoder"];
  f["world"] = j["world"];
  f["pretrain"] = j["pretrain"];
  f["pretrain"].erase("cache_path");
  return f.dump();
}

Tensor<float> feature_rows(const FeatureMatrix& f, std::span<const std::size_t> rows) {
  const auto d = static_cast<std::size_t>(f.cols());
  std::vector<float> out;
  out.reserve(rows.size() * d);
  for (auto r : rows)
    for (std::size_t j = 0; j < d; ++j) out.push_back(static_cast<float>(f(static_cast<Eigen::Index>(r), j)));
  return Tensor<float>::constant({rows.size(), d}, std::move(out));
}

std::vector<int> pick_labels(const std::vector<int>& labels, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels[r]);
  return out;
}

}  // namespace

DualEncoder<float> pretrain_backbone(const SyntheticWorld& world, const RunConfig& config,
                                     std::vector<double>* losses) {
  const auto& enc = config.encoder;
  const auto& pc = config.pretrain;
  DualEncoder<float> model(enc, backbone_seed(config));
  const std::string fingerprint = backbone_fingerprint(config);

  if (!pc.cache_path.empty() && std::filesystem::exists(pc.cache_path)) {
    auto ckpt = load_checkpoint(pc.cache_path);
    if (ckpt.metadata.value("fingerprint", std::string()) == fingerprint) {
      restore_parameters(ckpt, model.parameters());
      model.parameters().set_trainable(false);
      return model;
    }
  }

  const int stream_classes = config.stream.domains * config.world.classes_per_domain;
  const int pool = static_cast<int>(world.class_pool().size());
  if (pc.classes + stream_classes > pool) {
    throw ConfigError("pretrain.classes (" + std::to_string(pc.classes) + ") + stream classes (" +
                      std::to_string(stream_classes) + ") exceed the " + std::to_string(pool) +
                      " available word pairs; raise world.words");
  }

  std::vector<DomainSpec> styles;
  for (int s = 0; s < pc.styles; ++s) {
    DomainSpec spec;
    spec.name = "pretrain" + std::to_string(s);
    spec.noise = config.world.noise;
    spec.style = s == 0 ? StyleTransform::identity(enc.patch_dim)
                        : StyleTransform::random(enc.patch_dim, pc.style_strength, pc.style_offset,
                                                 derive_seed(world.seed(), "pretrain/style", static_cast<std::uint64_t>(s)));
    styles.push_back(std::move(spec));
  }
  std::vector<std::string> names(world.class_pool().begin(), world.class_pool().begin() + pc.classes);
  for (auto& spec : styles) {
    spec.class_names = names;
    for (const auto& n : names) spec.archetypes.push_back(world.archetype(n));
  }
  const Tokenizer tok(enc.vocab_size, enc.max_text_len);
  std::vector<std::vector<int>> tokens;
  for (const auto& n : names) tokens.push_back(tok.encode(n));

  Adam<float> opt(static_cast<float>(pc.lr));
  Rng rng(derive_seed(config.seed, "pretrain"));
  std::vector<int> order(names.size());
  std::iota(order.begin(), order.end(), 0);
  const auto tau = static_cast<float>(enc.contrastive_temperature);
  for (int step = 0; step < pc.steps; ++step) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<float> pixels;
    TextBatch text;
    text.rows = static_cast<std::size_t>(pc.batch);
    text.len = static_cast<std::size_t>(enc.max_text_len);
    for (int i = 0; i < pc.batch; ++i) {
      const int c = order[static_cast<std::size_t>(i)];
      const auto& style = styles[rng() % styles.size()];
      render_images(style, c, 1, enc, rng, pixels);
      const auto& t = tokens[static_cast<std::size_t>(c)];
      text.token_ids.insert(text.token_ids.end(), t.begin(), t.end());
    }
    auto img = model.encode_image(Tensor<float>::constant(
        {static_cast<std::size_t>(pc.batch), static_cast<std::size_t>(enc.patches()),
         static_cast<std::size_t>(enc.patch_dim)},
        std::move(pixels)));
    auto txt = model.encode_text(text);
    auto loss = scale(add(contrastive_loss(img, txt, tau), contrastive_loss(txt, img, tau)),
                      0.5f / static_cast<float>(pc.batch));
    loss.backward();
    opt.step(model.parameters());
    if (losses) losses->push_back(loss.item());
  }
  model.parameters().set_trainable(false);

  if (!pc.cache_path.empty()) {
    Checkpoint ckpt;
    ckpt.metadata["fingerprint"] = fingerprint;
    append_parameters(ckpt, model.parameters());
    save_checkpoint(ckpt, pc.cache_path);
  }
  return model;
}

FeatureMatrix frozen_features(const DualEncoder<float>& backbone, const ImageSet& images, int batch,
                              const EncoderConfig& enc) {
  FeatureMatrix out(static_cast<Eigen::Index>(images.count), enc.width);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < images.count; start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(images.count, start + static_cast<std::size_t>(batch));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto emb = backbone.encode_image(
        images.batch(idx, static_cast<std::size_t>(enc.patches()), static_cast<std::size_t>(enc.patch_dim)));
    auto v = emb.values();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < enc.width; ++j)
        out(static_cast<Eigen::Index>(start + i), j) = v[i * static_cast<std::size_t>(enc.width) + static_cast<std::size_t>(j)];
  }
  return out;
}

SessionLog train_session(ModelState& state, int task, const DomainSpec& spec, const DomainData& data,
                         const RunConfig& config, std::uint64_t seed) {
  if (task != state.tasks()) {
    throw StateError("session for task " + std::to_string(task) + " but the next task id is " +
                     std::to_string(state.tasks()));
  }
  const auto& enc = state.backbone.config();
  const auto before = checksum(state.backbone.parameters());

  const int t = state.prompts.add_task(derive_seed(seed, "prompts"));
  state.gates.emplace_back(t, enc.vision_depth, enc.width, derive_seed(seed, "gate"));
  state.task_names.push_back(spec.name);
  const bool gates_learn = config.gate.mode == GateMode::hard || config.gate.mode == GateMode::soft;
  for (auto& g : state.gates) g.set_trainable(false);
  state.gates[static_cast<std::size_t>(t)].set_trainable(gates_learn);
  state.prompts.open_session(t);

  ParameterSet<float> trainable = state.prompts.task_parameters(t);
  if (gates_learn) trainable.extend(state.gates[static_cast<std::size_t>(t)].parameters());

  const FeatureMatrix features = frozen_features(state.backbone, data.train, config.optimizer.eval_batch, enc);
  const auto& gates = state.gates[static_cast<std::size_t>(t)];
  const std::size_t n = data.train.count;
  const std::size_t m = data.class_text.rows;
  const auto tau = static_cast<float>(enc.contrastive_temperature);
  const auto lr = static_cast<float>(config.optimizer.lr);

  auto batch_loss = [&](std::span<const std::size_t> idx, Rng& rng) {
    auto pixels = data.train.batch(idx, static_cast<std::size_t>(enc.patches()), static_cast<std::size_t>(enc.patch_dim));
    auto feats = feature_rows(features, idx);
    std::vector<Tensor<float>> vision_w;
    for (int l = 0; l < enc.vision_depth; ++l) {
      vision_w.push_back(gate_layer(feats, gates, l, config.gate, rng, true).weight);
    }
    auto img = state.backbone.encode_image(
        pixels, make_prompt_hooks(state.prompts, t, EncoderSide::vision, enc.vision_depth, vision_w));
    std::vector<Tensor<float>> text_w(static_cast<std::size_t>(enc.text_depth),
                                      Tensor<float>::constant({m}, std::vector<float>(m, 1.0f)));
    auto txt = state.backbone.encode_text(
        data.class_text, make_prompt_hooks(state.prompts, t, EncoderSide::text, enc.text_depth, text_w));
    return class_contrastive_loss(img, txt, pick_labels(data.train.labels, idx), tau);
  };
  const auto batch = static_cast<std::size_t>(config.optimizer.batch);

  SessionLog log;
  log.task = t;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  {
    Rng probe(derive_seed(seed, "initial"));
    double total = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::span<const std::size_t> idx(perm.data() + start, std::min(n, start + batch) - start);
      total += double(batch_loss(idx, probe).item()) * static_cast<double>(idx.size());
    }
    log.initial_loss = total / static_cast<double>(n);
  }
  Rng rng(derive_seed(seed, "train"));
  for (int epoch = 0; epoch < config.optimizer.epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::span<const std::size_t> idx(perm.data() + start, std::min(n, start + batch) - start);
      auto loss = batch_loss(idx, rng);
      loss.backward();
      sgd_step(trainable, lr);
      total += double(loss.item()) * static_cast<double>(idx.size());
    }
    log.epoch_loss.push_back(total / static_cast<double>(n));
  }

  state.prompts.open_session(-1);
  state.gates[static_cast<std::size_t>(t)].set_trainable(false);
  state.distributions.add_task(t, features, data.train.labels, config.routing);
  if (checksum(state.backbone.parameters()) != before) throw StateError("backbone changed during a session");
  return log;
}

namespace {

std::vector<int> classify_frozen(const DualEncoder<float>& backbone, const Tensor<float>& pixels,
                                 const Tensor<float>& frozen_text) {
  return classify(backbone.encode_image(pixels), frozen_text);
}

}  // namespace

std::vector<double> zero_shot_row(const DualEncoder<float>& backbone, const std::vector<EvalTask>& tasks,
                                  const RunConfig& config) {
  const auto& enc = backbone.config();
  std::vector<double> row;
  for (const auto& task : tasks) {
    const auto& test = task.data->test;
    auto text = backbone.encode_text(task.data->class_text);
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < test.count; start += static_cast<std::size_t>(config.optimizer.eval_batch)) {
      const std::size_t end = std::min(test.count, start + static_cast<std::size_t>(config.optimizer.eval_batch));
      idx.resize(end - start);
      std::iota(idx.begin(), idx.end(), start);
      auto pred = classify_frozen(
          backbone, test.batch(idx, static_cast<std::size_t>(enc.patches()), static_cast<std::size_t>(enc.patch_dim)),
          text);
      for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == test.labels[idx[i]];
    }
    row.push_back(static_cast<double>(correct) / static_cast<double>(test.count));
  }
  return row;
}

EvalResult evaluate_all(const ModelState& state, const std::vector<EvalTask>& tasks, const RunConfig& config) {
  const auto& enc = state.backbone.config();
  const auto patches = static_cast<std::size_t>(enc.patches());
  const auto pd = static_cast<std::size_t>(enc.patch_dim);
  EvalResult result;
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    const auto& test = tasks[j].data->test;
    const auto& class_text = tasks[j].data->class_text;
    const std::size_t m = class_text.rows;
    const auto frozen_text = state.backbone.encode_text(class_text);
    Rng rng(derive_seed(config.seed, "eval", j));
    std::size_t correct = 0;
    double open_total = 0;
    std::vector<RoutingRecord> records(test.count);

    for (std::size_t start = 0; start < test.count; start += static_cast<std::size_t>(config.optimizer.eval_batch)) {
      const std::size_t end = std::min(test.count, start + static_cast<std::size_t>(config.optimizer.eval_batch));
      std::vector<std::size_t> off;
      std::map<int, std::vector<std::size_t>> groups;
      std::map<std::size_t, double> best_score;
      for (std::size_t i = start; i < end; ++i) {
        auto& rec = records[i];
        rec.task = static_cast<int>(j);
        rec.instance = i;
        if (state.distributions.empty()) {
          off.push_back(i);
          continue;
        }
        const auto row = tasks[j].features.row(static_cast<Eigen::Index>(i));
        const std::vector<double> x(row.data(), row.data() + row.size());
        const auto d = route_instance(x, state.distributions, config.routing);
        rec.task_chosen = d.task;
        rec.stage = d.stage;
        rec.e_max = d.e_max;
        rec.weight = d.weight;
        best_score[i] = *std::max_element(d.scores.begin(), d.scores.end()) + config.routing.score_offset;
        if (d.weight == 0.0) {
          off.push_back(i);
        } else {
          groups[d.task].push_back(i);
        }
      }

      if (!off.empty()) {
        auto pred = classify_frozen(state.backbone, test.batch(off, patches, pd), frozen_text);
        for (std::size_t k = 0; k < off.size(); ++k) {
          records[off[k]].predicted = pred[k];
          records[off[k]].correct = pred[k] == test.labels[off[k]];
        }
      }

      for (const auto& [r, members] : groups) {
        const auto& gates = state.gates.at(static_cast<std::size_t>(r));
        const auto feats = feature_rows(tasks[j].features, members);
        std::vector<Tensor<float>> vision_w;
        std::vector<int> open(members.size(), 0);
        for (int l = 0; l < enc.vision_depth; ++l) {
          auto g = gate_layer(feats, gates, l, config.gate, rng, false);
          std::vector<float> w(members.size());
          for (std::size_t k = 0; k < members.size(); ++k) {
            w[k] = g.weight.values()[k] * static_cast<float>(records[members[k]].weight);
            open[k] += g.decisions[k].open ? 1 : 0;
          }
          vision_w.push_back(Tensor<float>::constant({members.size()}, std::move(w)));
        }
        auto img = state.backbone.encode_image(
            test.batch(members, patches, pd),
            make_prompt_hooks(state.prompts, r, EncoderSide::vision, enc.vision_depth, vision_w));

        std::vector<double> scores;
        for (auto i : members) scores.push_back(best_score[i]);
        const auto e_txt = static_cast<float>(text_prompt_weight(scores));
        std::vector<Tensor<float>> text_w(static_cast<std::size_t>(enc.text_depth),
                                          Tensor<float>::constant({m}, std::vector<float>(m, e_txt)));
        auto txt = state.backbone.encode_text(
            class_text, make_prompt_hooks(state.prompts, r, EncoderSide::text, enc.text_depth, text_w));
        auto pred = classify(img, txt);
        for (std::size_t k = 0; k < members.size(); ++k) {
          records[members[k]].predicted = pred[k];
          records[members[k]].correct = pred[k] == test.labels[members[k]];
          records[members[k]].open_layers = open[k];
        }
      }
    }
    for (const auto& rec : records) {
      correct += rec.correct;
      open_total += rec.open_layers;
    }
    result.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(test.count));
    result.mean_open_layers.push_back(open_total / static_cast<double>(test.count));
    result.telemetry.insert(result.telemetry.end(), records.begin(), records.end());
  }
  return result;
}

namespace {

std::uint64_t hash_matrix(const Eigen::MatrixXd& m, std::uint64_t h) {
  return fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
}

std::uint64_t hash_stats(const GaussianStats& s, std::uint64_t h) {
  h = fnv1a(s.mean().data(), static_cast<std::size_t>(s.mean().size()) * sizeof(double), h);
  return hash_matrix(s.covariance(), h);
}

}  // namespace

TaskChecksums task_checksums(const ModelState& state, int task) {
  TaskChecksums c;
  c.prompts = checksum(state.prompts.task_parameters(task));
  c.gates = checksum(state.gates.at(static_cast<std::size_t>(task)).parameters());
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& t : state.distributions.tasks())
    if (t.task_id == task) h = hash_stats(t.stats, h);
  for (const auto& cd : state.distributions.classes(task)) h = hash_stats(cd.stats, h);
  c.stats = h;
  return c;
}

std::uint64_t backbone_checksum(const ModelState& state) { return checksum(state.backbone.parameters()); }

RunResult run_experiment(const RunConfig& config, const ProgressFn& progress, std::unique_ptr<ModelState>* state_out) {
  config.validate();
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  const SyntheticWorld world(config.encoder, config.world, derive_seed(config.seed, "world"));
  const auto stream = make_stream(world, config.stream);
  const int tcount = static_cast<int>(stream.domains.size());

  std::vector<DomainData> data;
  for (const auto& spec : stream.domains) {
    data.push_back(generate_domain(spec, config.encoder,
                                   derive_seed(config.seed, "domain", static_cast<std::uint64_t>(spec.domain_id))));
  }

  say("pretraining backbone");
  auto state = std::make_unique<ModelState>(pretrain_backbone(world, config), config.prompt);

  std::vector<EvalTask> eval;
  for (const auto& d : data) {
    eval.push_back({&d, frozen_features(state->backbone, d.test, config.optimizer.eval_batch, config.encoder)});
  }

  RunResult result;
  result.accuracy = AccuracyMatrix(tcount);
  for (const auto& spec : stream.domains) result.task_names.push_back(spec.name);
  result.zero_shot = zero_shot_row(state->backbone, eval, config);
  result.backbone_before = backbone_checksum(*state);

  std::vector<double> open_layers;
  for (int s = 0; s < tcount; ++s) {
    say("session " + std::to_string(s) + ": " + stream.domains[static_cast<std::size_t>(s)].name);
    result.sessions.push_back(train_session(*state, s, stream.domains[static_cast<std::size_t>(s)],
                                            data[static_cast<std::size_t>(s)], config,
                                            derive_seed(config.seed, "session", static_cast<std::uint64_t>(s))));
    auto ev = evaluate_all(*state, eval, config);
    result.accuracy.set_row(s, ev.accuracy);
    std::vector<TaskChecksums> sums;
    for (int t = 0; t <= s; ++t) sums.push_back(task_checksums(*state, t));
    result.checksums.push_back(std::move(sums));
    if (s == tcount - 1) {
      result.telemetry = std::move(ev.telemetry);
      open_layers = ev.mean_open_layers;
    }
  }
  result.backbone_after = backbone_checksum(*state);
  result.metrics = compute_metrics(result.accuracy, result.zero_shot);
  result.metrics.mean_open_layers = open_layers;
  if (state_out) *state_out = std::move(state);
  return result;
}

}  // namespace iap
