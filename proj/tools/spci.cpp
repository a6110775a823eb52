// SPDX-License-Identifier: Apache-2.0
//
// spci: run SPCI/backbone forwards, heatmaps, cost and gradient reports, and
// the toy training loop. See README.md for the exit-code table.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "spci/cli.hpp"

namespace {

void add_common(CLI::App* sub, spci::cli::RunConfig& cfg, std::string& bn_mode,
                std::string& dropout_mode, std::uint64_t& seed) {
  sub->add_option("--input", cfg.input,
                  "SPCT tensor file or synthetic pattern (zeros, ones, checkerboard, ramp, random)");
  sub->add_option("--weights", cfg.weights, "SPCI weight manifest (spci target)");
  sub->add_option("--config", cfg.config, "backbone key-value config file");
  sub->add_option("--seed", seed, "seed for initialization, synthetic inputs and dropout");
  sub->add_option("--out", cfg.out, "output directory");
  sub->add_option("--target", cfg.target, "backbone or spci")
      ->check(CLI::IsMember({"backbone", "spci"}));
  sub->add_flag("--disable-ssg", cfg.disable_ssg, "skip the channel gate");
  sub->add_flag("--disable-pfm", cfg.disable_pfm, "skip the spatial gate");
  sub->add_flag("--disable-cdm", cfg.disable_cdm, "skip the per-element gate");
  sub->add_option("--spci-at", cfg.spci_at, "insertion points: p3, p5, p3p5, none")
      ->check(CLI::IsMember({"p3", "p4", "p5", "p3p5", "p3,p5", "none"}));
  sub->add_option("--bn-mode", bn_mode, "train or eval")->check(CLI::IsMember({"train", "eval"}));
  sub->add_option("--dropout-mode", dropout_mode, "train or eval")
      ->check(CLI::IsMember({"train", "eval"}));
  sub->add_option("--channels", cfg.channels, "block width when no manifest is given")
      ->check(CLI::PositiveNumber);
  sub->add_option("--size", cfg.size, "spatial size of spci-target inputs")
      ->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SPCI attention block toolkit"};
  app.require_subcommand(1, 1);

  spci::cli::RunConfig cfg;
  std::string bn_mode, dropout_mode;
  std::uint64_t seed = 0;

  const std::map<std::string, std::string> help{
      {"forward", "run a forward pass and dump tensors plus a summary"},
      {"heatmap", "write attention maps as 8-bit graymaps"},
      {"cost", "print parameter and multiply-accumulate counts"},
      {"gradcheck", "compare analytic gradients with central differences"},
      {"train-toy", "train the toy classifier and write its loss trajectory"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, desc] : help) {
    CLI::App* sub = app.add_subcommand(name, desc);
    add_common(sub, cfg, bn_mode, dropout_mode, seed);
    subs[name] = sub;
  }
  subs["forward"]->add_flag("--save-weights", cfg.save_weights,
                            "also write the block weights (spci target)");
  subs["train-toy"]->add_option("--steps", cfg.steps, "SGD steps")->check(CLI::PositiveNumber);
  subs["train-toy"]->add_option("--lr", cfg.lr, "learning rate")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : spci::cli::kConfigError;
  }

  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) {
      cfg.subcommand = name;
      if (sub->count("--seed")) cfg.seed = seed;
    }
  }
  auto mode = [](const std::string& s) { return s == "train" ? spci::Mode::train : spci::Mode::eval; };
  if (!bn_mode.empty()) cfg.bn_mode = mode(bn_mode);
  if (!dropout_mode.empty()) cfg.dropout_mode = mode(dropout_mode);

  return spci::cli::run(cfg, std::cout, std::cerr);
}
