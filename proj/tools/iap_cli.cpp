// iap: run an MTIL stream and report on finished runs.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "iap/errors.hpp"
#include "iap/report.hpp"

namespace {

struct RunArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> order;
  std::optional<int> few_shot;
  std::vector<std::string> ablate;
  std::optional<std::string> gate_mode;
  std::optional<std::string> out;
  bool report = false;
};

iap::RunConfig resolve(const RunArgs& a) {
  iap::RunConfig c = a.config_path.empty() ? iap::RunConfig{} : iap::load_config(a.config_path);
  if (a.seed) c.seed = *a.seed;
  if (a.order) c.stream.order = *a.order;
  if (a.few_shot) c.stream.few_shot = *a.few_shot;
  if (a.gate_mode) c.gate.mode = iap::gate_mode_from_string(*a.gate_mode);
  for (const auto& x : a.ablate) {
    if (x == "ia_gp") {
      if (a.gate_mode && *a.gate_mode != "always_on") throw iap::ConfigError("--ablate ia_gp conflicts with --gate-mode " + *a.gate_mode);
      c.gate.mode = iap::GateMode::always_on;
    } else if (x == "ia_cddp") {
      c.routing.two_stage = false;
    }
  }
  if (a.out) c.output_dir = *a.out;
  c.validate();
  return c;
}

int cmd_run(const RunArgs& a) {
  const auto config = resolve(a);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  std::unique_ptr<iap::ModelState> state;
  const auto result = iap::run_experiment(
      config,
      [&](const std::string& s) {
        char stamp[32];
        std::snprintf(stamp, sizeof stamp, "[%7.1fs] ", elapsed());
        std::cerr << stamp << s << "\n";
      },
      &state);
  iap::write_run_directory(config.output_dir, config, result, *state);
  std::cerr << "wrote " << config.output_dir << "\n";
  if (a.report) {
    const auto summary = iap::read_run_directory(config.output_dir);
    std::cout << iap::format_report(summary);
    iap::write_file_atomic((std::filesystem::path(config.output_dir) / "gate_usage_bars.dat").string(),
                           iap::gate_usage_bars(summary));
  }
  return 0;
}

int cmd_report(const std::string& dir) {
  const auto summary = iap::read_run_directory(dir);
  std::cout << iap::format_report(summary);
  const auto bars = (std::filesystem::path(dir) / "gate_usage_bars.dat").string();
  iap::write_file_atomic(bars, iap::gate_usage_bars(summary));
  std::cout << "\ngate usage bars: " << bars << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-aware prompting for multi-domain task-incremental learning"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "pretrain the backbone, train the task stream, write a run directory");
  run_cmd->add_option("--config", run.config_path, "JSON config; missing keys keep their defaults")->check(CLI::ExistingFile);
  run_cmd->add_option("--seed", run.seed, "seed");
  run_cmd->add_option("--order", run.order, "task order")->check(CLI::IsMember({"order-1", "order-2"}));
  run_cmd->add_option("--few-shot", run.few_shot, "training images per class")->check(CLI::PositiveNumber);
  run_cmd->add_option("--ablate", run.ablate, "ia_gp: gates always on; ia_cddp: single-stage routing")
      ->check(CLI::IsMember({"ia_gp", "ia_cddp"}));
  run_cmd->add_option("--gate-mode", run.gate_mode, "gate mode")
      ->check(CLI::IsMember({"hard", "soft", "random", "always_on"}));
  run_cmd->add_option("--out", run.out, "run directory");
  run_cmd->add_flag("--report", run.report, "print the report when done");

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "print metrics of a finished run directory");
  report_cmd->add_option("dir", report_dir, "run directory")->required();

  auto* defaults_cmd = app.add_subcommand("defaults", "print the default config");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run_cmd) return cmd_run(run);
    if (*report_cmd) return cmd_report(report_dir);
    if (*defaults_cmd) {
      std::cout << iap::config_to_json(iap::RunConfig{}).dump(2) << "\n";
      return 0;
    }
  } catch (const iap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
