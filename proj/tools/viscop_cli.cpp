// viscop: pretrain a base model, adapt it to a target domain, run ablations
// and collect reports. Exit codes: 0 ok, 2 config error, 3 numeric abort,
// 1 anything else.

#include <chrono>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "viscop/errors.hpp"
#include "viscop/experiment.hpp"

using namespace viscop;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kConfigError = 2;
constexpr int kNumericAbort = 3;

LogFn make_logger(bool quiet) {
  if (quiet) return {};
  const auto start = std::chrono::steady_clock::now();
  return [start](const std::string& msg) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", s, msg.c_str());
  };
}

void print(const CommandResult& r) {
  std::cout << r.summary;
  for (const auto& f : r.files) std::cout << "wrote " << f.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual probing for domain adaptation of small video-language models"};
  app.require_subcommand(1);
  std::string config_path;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output on stderr");

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Experiment config file")->required();
  };

  auto* pretrain = app.add_subcommand("pretrain", "Train the base model on the source domain");
  with_config(pretrain);

  std::string strategy;
  auto* adapt = app.add_subcommand("adapt", "Adapt the base model to the target domain");
  with_config(adapt);
  adapt->add_option("-s,--strategy", strategy, "Adaptation strategy (see `strategies`)")->required();

  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  with_config(ablate);
  ablate->add_option("-a,--axis", axis, "probes, placement or alternatives")
      ->required()
      ->check(CLI::IsMember({"probes", "placement", "alternatives"}));

  std::string model = "base", source = "visual";
  auto* embed = app.add_subcommand("export-embeddings", "Write pooled embeddings of the paired eval sets");
  with_config(embed);
  embed->add_option("-m,--model", model, "base or a strategy with an expert checkpoint");
  embed->add_option("--source", source, "visual or probes")->check(CLI::IsMember({"visual", "probes"}));

  auto* report = app.add_subcommand("report", "Summarize every adaptation report of a run");
  with_config(report);

  auto* generate = app.add_subcommand("generate", "Write the synthetic dataset of a run to disk");
  with_config(generate);

  auto* strategies = app.add_subcommand("strategies", "List the adaptation strategies");

  auto* dump = app.add_subcommand("config", "Print a config in canonical form (defaults when no file is given)");
  std::string dump_path;
  dump->add_option("file", dump_path, "Config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  const auto log = make_logger(quiet);
  try {
    if (*strategies) {
      const auto cfg = ExperimentConfig::defaults();
      for (const auto& name : strategy_names()) {
        const auto s = cfg.strategy(name);
        std::string groups;
        for (auto g : s.groups) groups += (groups.empty() ? "" : "+") + std::string(to_string(g));
        std::cout << name << "\t" << groups << "\n";
      }
      return kOk;
    }
    if (*dump) {
      std::cout << (dump_path.empty() ? ExperimentConfig::defaults() : ExperimentConfig::load(dump_path)).to_text();
      return kOk;
    }
    const auto cfg = ExperimentConfig::load(config_path);
    if (*pretrain) print(cmd_pretrain(cfg, log));
    else if (*adapt) print(cmd_adapt(cfg, strategy, log));
    else if (*ablate) print(cmd_ablate(cfg, axis, log));
    else if (*embed) print(cmd_export_embeddings(cfg, model, embedding_source_from_string(source), log));
    else if (*report) print(cmd_report(cfg, log));
    else if (*generate) print(cmd_generate(cfg, log));
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericAbort& e) {
    std::cerr << "numeric abort at step " << e.step() << ": " << e.what() << "\n";
    return kNumericAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
