#include "iap/report.hpp"

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "iap/errors.hpp"

namespace iap {

namespace {

void append_matrix(Checkpoint& ckpt, const std::string& name, const Eigen::MatrixXd& m) {
  CheckpointEntry e{name, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, {}};
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) e.values.push_back(static_cast<float>(m(i, j)));
  ckpt.entries.push_back(std::move(e));
}

void append_vector(Checkpoint& ckpt, const std::string& name, const Eigen::VectorXd& v) {
  CheckpointEntry e{name, {static_cast<std::size_t>(v.size())}, {}};
  for (Eigen::Index i = 0; i < v.size(); ++i) e.values.push_back(static_cast<float>(v[i]));
  ckpt.entries.push_back(std::move(e));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::stringstream ss(read_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty()) rows.push_back(split_csv(line));
  }
  if (rows.empty()) throw FormatError(path + ": empty file");
  return rows;
}

double parse_number(const std::string& cell, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not a number: '" + cell + "'");
  }
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

}  // namespace

Checkpoint state_checkpoint(const ModelState& state, const RunConfig& config) {
  Checkpoint ckpt;
  ckpt.metadata["config"] = config_to_json(config);
  ckpt.metadata["task_names"] = state.task_names;
  append_parameters(ckpt, state.backbone.parameters());
  append_parameters(ckpt, state.prompts.all_parameters());
  for (const auto& g : state.gates) append_parameters(ckpt, g.parameters());
  for (const auto& t : state.distributions.tasks()) {
    const std::string base = "stats/" + std::to_string(t.task_id);
    append_vector(ckpt, base + "/mu", t.stats.mean());
    append_matrix(ckpt, base + "/sigma", t.stats.covariance());
    for (const auto& c : state.distributions.classes(t.task_id)) {
      const std::string cb = base + "/" + std::to_string(c.class_id);
      append_vector(ckpt, cb + "/mu", c.stats.mean());
      append_matrix(ckpt, cb + "/sigma", c.stats.covariance());
    }
  }
  return ckpt;
}

std::string accuracy_matrix_csv(const AccuracyMatrix& a, const std::vector<std::string>& names) {
  std::string out = "session";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (int s = 0; s < a.tasks(); ++s) {
    out += std::to_string(s);
    for (int t = 0; t < a.tasks(); ++t) out += "," + format_number(a.at(s, t));
    out += "\n";
  }
  return out;
}

std::string metrics_csv(const MetricsReport& m, const std::vector<std::string>& names) {
  std::string out = "task_id,task,transfer,average,last,zero_shot,mean_open_layers\n";
  auto opt = [](std::size_t i, const std::vector<double>& v) { return i < v.size() ? format_number(v[i]) : ""; };
  for (std::size_t j = 0; j < names.size(); ++j) {
    out += std::to_string(j) + "," + names[j] + ",";
    out += m.transfer[j] ? format_number(*m.transfer[j]) : "";
    out += "," + format_number(m.average[j]) + "," + format_number(m.last[j]) + "," + opt(j, m.zero_shot) + "," +
           opt(j, m.mean_open_layers) + "\n";
  }
  out += ",mean,";
  out += m.transfer_mean ? format_number(*m.transfer_mean) : "";
  out += "," + format_number(m.average_mean) + "," + format_number(m.last_mean) + ",";
  out += m.zero_shot.empty() ? "" : format_number(m.zero_shot_mean);
  out += ",\n";
  return out;
}

std::string gate_usage_csv(const std::vector<double>& open_layers, const std::vector<std::string>& names) {
  std::string out = "task_id,task,mean_open_layers\n";
  for (std::size_t j = 0; j < open_layers.size(); ++j) {
    out += std::to_string(j) + "," + names.at(j) + "," + format_number(open_layers[j]) + "\n";
  }
  return out;
}

std::string routing_telemetry_csv(const std::vector<RoutingRecord>& records) {
  std::string out = "instance_id,task,task_chosen,stage,E_max,weight,open_layers,predicted,correct\n";
  for (const auto& r : records) {
    out += std::to_string(r.instance) + "," + std::to_string(r.task) + "," + std::to_string(r.task_chosen) + "," +
           to_string(r.stage) + "," + format_number(r.e_max) + "," + format_number(r.weight) + "," +
           std::to_string(r.open_layers) + "," + std::to_string(r.predicted) + "," + (r.correct ? "1" : "0") + "\n";
  }
  return out;
}

std::string training_log_csv(const std::vector<SessionLog>& sessions) {
  std::string out = "task_id,epoch,loss\n";
  for (const auto& s : sessions) {
    out += std::to_string(s.task) + ",0," + format_number(s.initial_loss) + "\n";
    for (std::size_t e = 0; e < s.epoch_loss.size(); ++e) {
      out += std::to_string(s.task) + "," + std::to_string(e + 1) + "," + format_number(s.epoch_loss[e]) + "\n";
    }
  }
  return out;
}

void write_run_directory(const std::string& dir, const RunConfig& config, const RunResult& result,
                         const ModelState& state) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto at = [&](const char* name) { return (fs::path(dir) / name).string(); };
  save_config(config, at("config.json"));
  save_checkpoint(state_checkpoint(state, config), at("model.ckpt"));
  write_file_atomic(at("accuracy_matrix.csv"), accuracy_matrix_csv(result.accuracy, result.task_names));
  write_file_atomic(at("metrics.csv"), metrics_csv(result.metrics, result.task_names));
  write_file_atomic(at("gate_usage.csv"), gate_usage_csv(result.metrics.mean_open_layers, result.task_names));
  write_file_atomic(at("routing_telemetry.csv"), routing_telemetry_csv(result.telemetry));
  write_file_atomic(at("training_log.csv"), training_log_csv(result.sessions));
}

RunSummary read_run_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto at = [&](const char* name) { return (fs::path(dir) / name).string(); };
  for (const char* name : {"config.json", "accuracy_matrix.csv", "metrics.csv", "gate_usage.csv"}) {
    if (!fs::exists(at(name))) throw StateError("missing " + at(name));
  }
  RunSummary s{load_config(at("config.json")), {}, AccuracyMatrix(0), {}, {}};

  const auto acc = read_csv(at("accuracy_matrix.csv"));
  s.task_names.assign(acc[0].begin() + 1, acc[0].end());
  const int t = static_cast<int>(s.task_names.size());
  if (static_cast<int>(acc.size()) != t + 1) throw FormatError(at("accuracy_matrix.csv") + ": expected a square grid");
  s.accuracy = AccuracyMatrix(t);
  for (int r = 0; r < t; ++r) {
    const auto& row = acc[static_cast<std::size_t>(r + 1)];
    if (static_cast<int>(row.size()) != t + 1) throw FormatError(at("accuracy_matrix.csv") + ": ragged row");
    for (int j = 0; j < t; ++j) s.accuracy.set(r, j, parse_number(row[static_cast<std::size_t>(j + 1)], "accuracy_matrix.csv"));
  }

  const auto met = read_csv(at("metrics.csv"));
  for (std::size_t r = 1; r < met.size() && static_cast<int>(s.zero_shot.size()) < t; ++r) {
    if (met[r].size() > 5 && !met[r][5].empty()) s.zero_shot.push_back(parse_number(met[r][5], "metrics.csv"));
  }
  if (!s.zero_shot.empty() && static_cast<int>(s.zero_shot.size()) != t) s.zero_shot.clear();

  const auto gates = read_csv(at("gate_usage.csv"));
  for (std::size_t r = 1; r < gates.size(); ++r) {
    if (gates[r].size() < 3) throw FormatError(at("gate_usage.csv") + ": short row");
    s.open_layers.push_back(parse_number(gates[r][2], "gate_usage.csv"));
  }
  return s;
}

std::string format_report(const RunSummary& s) {
  const auto m = compute_metrics(s.accuracy, s.zero_shot);
  std::ostringstream out;
  out << "MTIL report: " << s.task_names.size() << " tasks, " << s.config.stream.order << ", gate "
      << to_string(s.config.gate.mode) << (s.config.routing.two_stage ? "" : ", single-stage routing");
  if (s.config.stream.few_shot) out << ", " << *s.config.stream.few_shot << "-shot";
  out << ", seed " << s.config.seed << "\n\n";

  std::size_t w = 8;
  for (const auto& n : s.task_names) w = std::max(w, n.size() + 1);
  out << pad("", 10);
  for (const auto& n : s.task_names) out << pad(n, w);
  out << pad("mean", w) << "\n";
  auto line = [&](const std::string& label, auto cell, const std::string& mean) {
    out << std::string(label) << std::string(10 - label.size(), ' ');
    for (std::size_t j = 0; j < s.task_names.size(); ++j) out << pad(cell(j), w);
    out << pad(mean, w) << "\n";
  };
  if (!s.zero_shot.empty()) {
    line("Zero-shot", [&](std::size_t j) { return percent(s.zero_shot[j]); }, percent(m.zero_shot_mean));
  }
  line("Transfer", [&](std::size_t j) { return m.transfer[j] ? percent(*m.transfer[j]) : std::string(); },
       m.transfer_mean ? percent(*m.transfer_mean) : std::string());
  line("Average", [&](std::size_t j) { return percent(m.average[j]); }, percent(m.average_mean));
  line("Last", [&](std::size_t j) { return percent(m.last[j]); }, percent(m.last_mean));
  if (s.open_layers.size() == s.task_names.size()) {
    char buf[32];
    line("Open", [&](std::size_t j) {
      std::snprintf(buf, sizeof buf, "%.2f", s.open_layers[j]);
      return std::string(buf);
    }, "");
  }
  return out.str();
}

std::string gate_usage_bars(const RunSummary& s) {
  std::string out = "# index task mean_open_layers\n";
  for (std::size_t j = 0; j < s.open_layers.size() && j < s.task_names.size(); ++j) {
    out += std::to_string(j) + " " + s.task_names[j] + " " + format_number(s.open_layers[j]) + "\n";
  }
  return out;
}

}  // namespace iap
