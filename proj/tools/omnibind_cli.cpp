#include <algorithm>
#include <array>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "omnibind/error.hpp"
#include "omnibind/pipeline.hpp"

namespace {

constexpr std::array<const char*, 6> kCommands = {"gen-world", "build-data", "train-stage1",
                                                  "train-stage2", "eval", "report"};

const char* kUsage =
    "usage: omnibind <command> [options]\n"
    "\n"
    "commands:\n"
    "  gen-world      generate the synthetic semantic world\n"
    "  build-data     build train/eval records and combination manifests\n"
    "  train-stage1   align student encoders to the teachers\n"
    "  train-stage2   train the adaptive fusion module and baselines\n"
    "  eval           write accuracy, baseline and robustness metrics\n"
    "  report         print one table (--table 2m|345m|fusion|robustness)\n"
    "\n"
    "run 'omnibind <command> --help' for options\n";

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> tau;
  std::optional<double> lambda_cr;
  std::optional<double> lambda_se;
  std::optional<std::size_t> heads;
  std::optional<std::string> proportions;
  std::optional<std::size_t> classes;
  std::optional<std::size_t> dim;
  std::string table = "345m";
};

std::array<double, 4> parse_proportions(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) items.push_back(item);
  if (items.size() != 4) {
    throw omnibind::ConfigError("--proportions expects four comma-separated percentages, e.g. 46,15,16,17");
  }
  std::array<double, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t used = 0;
    try {
      out[i] = std::stod(items[i], &used) / 100.0;
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != items[i].size()) {
      throw omnibind::ConfigError("--proportions: '" + items[i] + "' is not a number");
    }
  }
  return out;
}

omnibind::RunConfig resolve(const Flags& f) {
  omnibind::RunConfig cfg = f.config.empty() ? omnibind::RunConfig{} : omnibind::RunConfig::load(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out = *f.out;
  if (f.tau) cfg.stage1.temperature = *f.tau;
  if (f.lambda_cr) cfg.stage1.lambda_cr = *f.lambda_cr;
  if (f.lambda_se) cfg.stage1.lambda_se = *f.lambda_se;
  if (f.heads) cfg.stage2.heads = *f.heads;
  if (f.proportions) cfg.dataset.proportions = parse_proportions(*f.proportions);
  if (f.classes) cfg.world.num_classes = *f.classes;
  if (f.dim) cfg.world.dim = *f.dim;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App& cmd, Flags& f) {
  cmd.add_option("--config", f.config, "JSON run configuration");
  cmd.add_option("--seed", f.seed, "master seed");
  cmd.add_option("--out", f.out, "output directory");
  cmd.add_option("--tau", f.tau, "stage-1 temperature");
  cmd.add_option("--lambda-cr", f.lambda_cr, "cross-modal KL weight");
  cmd.add_option("--lambda-se", f.lambda_se, "self-modal KL weight");
  cmd.add_option("--heads", f.heads, "attention heads of the fusion module");
  cmd.add_option("--proportions", f.proportions, "combination size mix in percent, e.g. 46,15,16,17");
  cmd.add_option("--classes", f.classes, "number of classes in the world");
  cmd.add_option("--dim", f.dim, "embedding dimension");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  const std::string first = argv[1];
  if (first == "-h" || first == "--help") {
    std::cout << kUsage;
    return 0;
  }
  if (std::find(kCommands.begin(), kCommands.end(), first) == kCommands.end()) {
    std::cerr << "unknown command '" << first << "'\n\n" << kUsage;
    return 2;
  }

  CLI::App app{"omnibind pipeline", "omnibind"};
  app.require_subcommand(1);
  Flags flags;
  std::vector<CLI::App*> cmds;
  for (const char* name : kCommands) {
    CLI::App* cmd = app.add_subcommand(name);
    add_common(*cmd, flags);
    cmds.push_back(cmd);
  }
  cmds.back()->add_option("--table", flags.table, "2m, 345m, fusion or robustness");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const omnibind::RunConfig cfg = resolve(flags);
    if (first == "gen-world") {
      omnibind::run_gen_world(cfg);
    } else if (first == "build-data") {
      omnibind::run_build_data(cfg);
    } else if (first == "train-stage1") {
      omnibind::run_train_stage1(cfg);
    } else if (first == "train-stage2") {
      omnibind::run_train_stage2(cfg);
    } else if (first == "eval") {
      omnibind::run_eval(cfg);
    } else {
      std::cout << omnibind::run_report(cfg, omnibind::parse_table_kind(flags.table));
    }
  } catch (const omnibind::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const omnibind::MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const omnibind::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
