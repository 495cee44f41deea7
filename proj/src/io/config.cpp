#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "iap/errors.hpp"
#include "iap/io.hpp"

namespace iap {

void PromptConfig::validate() const {
  if (length < 1) throw ConfigError("prompt.length must be >= 1");
  if (max_text_layers < 0) throw ConfigError("prompt.max_text_layers must be >= 0");
}

void StreamConfig::validate() const {
  if (domains < 1) throw ConfigError("stream.domains must be >= 1");
  if (order != "order-1" && order != "order-2") {
    throw ConfigError("stream.order: unknown value '" + order + "' (order-1, order-2)");
  }
  if (few_shot && *few_shot < 1) throw ConfigError("stream.few_shot must be >= 1 or null");
}

void OptimizerConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("optimizer.lr must be > 0");
  if (epochs < 1) throw ConfigError("optimizer.epochs must be >= 1");
  if (batch < 1) throw ConfigError("optimizer.batch must be >= 1");
  if (eval_batch < 1) throw ConfigError("optimizer.eval_batch must be >= 1");
}

void PretrainConfig::validate() const {
  if (classes < 2) throw ConfigError("pretrain.classes must be >= 2");
  if (steps < 0) throw ConfigError("pretrain.steps must be >= 0");
  if (batch < 2) throw ConfigError("pretrain.batch must be >= 2");
  if (batch > classes) throw ConfigError("pretrain.batch must not exceed pretrain.classes");
  if (!(lr > 0)) throw ConfigError("pretrain.lr must be > 0");
  if (styles < 1) throw ConfigError("pretrain.styles must be >= 1");
  if (!(style_strength >= 0) || !(style_offset >= 0)) throw ConfigError("pretrain style parameters must be >= 0");
}

void RunConfig::validate() const {
  try {
    encoder.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("encoder: ") + e.what());
  }
  world.validate();
  prompt.validate();
  gate.validate();
  routing.validate();
  stream.validate();
  optimizer.validate();
  pretrain.validate();
}

namespace {

/// Reads the keys of one JSON object into typed fields and rejects leftovers.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename V>
  void field(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string name = path_.empty() ? key : path_ + "." + key;
    try {
      read(*it, out, name);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("unknown key '" + (path_.empty() ? it.key() : path_ + "." + it.key()) + "'");
      }
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  static void read(const json& v, int& out, const std::string& name) {
    if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer");
    out = v.get<int>();
  }
  static void read(const json& v, double& out, const std::string& name) {
    if (!v.is_number()) throw ConfigError(name + ": expected a number");
    out = v.get<double>();
  }
  static void read(const json& v, bool& out, const std::string& name) {
    if (!v.is_boolean()) throw ConfigError(name + ": expected true or false");
    out = v.get<bool>();
  }
  static void read(const json& v, std::string& out, const std::string& name) {
    if (!v.is_string()) throw ConfigError(name + ": expected a string");
    out = v.get<std::string>();
  }
  static void read(const json& v, std::uint64_t& out, const std::string& name) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(name + ": expected a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }
  static void read(const json& v, std::optional<int>& out, const std::string& name) {
    if (v.is_null()) {
      out.reset();
      return;
    }
    int x = 0;
    read(v, x, name);
    out = x;
  }
  static void read(const json& v, GateMode& out, const std::string& name) {
    if (!v.is_string()) throw ConfigError(name + ": expected a string");
    out = gate_mode_from_string(v.get<std::string>());
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

json config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["encoder"] = {{"vision_depth", c.encoder.vision_depth},
                  {"text_depth", c.encoder.text_depth},
                  {"width", c.encoder.width},
                  {"heads", c.encoder.heads},
                  {"patch_grid", c.encoder.patch_grid},
                  {"patch_dim", c.encoder.patch_dim},
                  {"vocab_size", c.encoder.vocab_size},
                  {"max_text_len", c.encoder.max_text_len},
                  {"mlp_ratio", c.encoder.mlp_ratio},
                  {"contrastive_temperature", c.encoder.contrastive_temperature}};
  j["world"] = {{"words", c.world.words},
                {"word_length", c.world.word_length},
                {"noise", c.world.noise},
                {"style_strength", c.world.style_strength},
                {"style_offset", c.world.style_offset},
                {"classes_per_domain", c.world.classes_per_domain},
                {"train_per_class", c.world.train_per_class},
                {"test_per_class", c.world.test_per_class}};
  j["prompt"] = {{"length", c.prompt.length}, {"max_text_layers", c.prompt.max_text_layers}};
  j["gate"] = {{"mode", to_string(c.gate.mode)},
               {"temperature", c.gate.temperature},
               {"noise_clamp", c.gate.noise_clamp}};
  j["routing"] = {{"lower", c.routing.lower},
                  {"upper", c.routing.upper},
                  {"top_k", c.routing.top_k},
                  {"task_reg", c.routing.task_reg},
                  {"class_reg", c.routing.class_reg},
                  {"score_offset", c.routing.score_offset},
                  {"two_stage", c.routing.two_stage}};
  j["stream"] = {{"domains", c.stream.domains},
                 {"order", c.stream.order},
                 {"few_shot", c.stream.few_shot ? json(*c.stream.few_shot) : json(nullptr)}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"epochs", c.optimizer.epochs},
                    {"batch", c.optimizer.batch},
                    {"eval_batch", c.optimizer.eval_batch}};
  j["pretrain"] = {{"classes", c.pretrain.classes},
                   {"steps", c.pretrain.steps},
                   {"batch", c.pretrain.batch},
                   {"lr", c.pretrain.lr},
                   {"styles", c.pretrain.styles},
                   {"style_strength", c.pretrain.style_strength},
                   {"style_offset", c.pretrain.style_offset},
                   {"cache_path", c.pretrain.cache_path}};
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.field("seed", c.seed);
  root.field("output_dir", c.output_dir);
  {
    auto s = root.sub("encoder");
    s.field("vision_depth", c.encoder.vision_depth);
    s.field("text_depth", c.encoder.text_depth);
    s.field("width", c.encoder.width);
    s.field("heads", c.encoder.heads);
    s.field("patch_grid", c.encoder.patch_grid);
    s.field("patch_dim", c.encoder.patch_dim);
    s.field("vocab_size", c.encoder.vocab_size);
    s.field("max_text_len", c.encoder.max_text_len);
    s.field("mlp_ratio", c.encoder.mlp_ratio);
    s.field("contrastive_temperature", c.encoder.contrastive_temperature);
    s.finish();
  }
  {
    auto s = root.sub("world");
    s.field("words", c.world.words);
    s.field("word_length", c.world.word_length);
    s.field("noise", c.world.noise);
    s.field("style_strength", c.world.style_strength);
    s.field("style_offset", c.world.style_offset);
    s.field("classes_per_domain", c.world.classes_per_domain);
    s.field("train_per_class", c.world.train_per_class);
    s.field("test_per_class", c.world.test_per_class);
    s.finish();
  }
  {
    auto s = root.sub("prompt");
    s.field("length", c.prompt.length);
    s.field("max_text_layers", c.prompt.max_text_layers);
    s.finish();
  }
  {
    auto s = root.sub("gate");
    s.field("mode", c.gate.mode);
    s.field("temperature", c.gate.temperature);
    s.field("noise_clamp", c.gate.noise_clamp);
    s.finish();
  }
  {
    auto s = root.sub("routing");
    s.field("lower", c.routing.lower);
    s.field("upper", c.routing.upper);
    s.field("top_k", c.routing.top_k);
    s.field("task_reg", c.routing.task_reg);
    s.field("class_reg", c.routing.class_reg);
    s.field("score_offset", c.routing.score_offset);
    s.field("two_stage", c.routing.two_stage);
    s.finish();
  }
  {
    auto s = root.sub("stream");
    s.field("domains", c.stream.domains);
    s.field("order", c.stream.order);
    s.field("few_shot", c.stream.few_shot);
    s.finish();
  }
  {
    auto s = root.sub("optimizer");
    s.field("lr", c.optimizer.lr);
    s.field("epochs", c.optimizer.epochs);
    s.field("batch", c.optimizer.batch);
    s.field("eval_batch", c.optimizer.eval_batch);
    s.finish();
  }
  {
    auto s = root.sub("pretrain");
    s.field("classes", c.pretrain.classes);
    s.field("steps", c.pretrain.steps);
    s.field("batch", c.pretrain.batch);
    s.field("lr", c.pretrain.lr);
    s.field("styles", c.pretrain.styles);
    s.field("style_strength", c.pretrain.style_strength);
    s.field("style_offset", c.pretrain.style_offset);
    s.field("cache_path", c.pretrain.cache_path);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const RunConfig& config, const std::string& path) {
  write_file_atomic(path, config_to_json(config).dump(2) + "\n");
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StateError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw StateError("write to " + tmp.string() + " failed");
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace iap
