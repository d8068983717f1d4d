// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mlora/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multi-domain CTR experiments with mixtures of low-rank domain experts"};
  app.require_subcommand(1);
  mlora::cli::CommandArgs args;
  std::string config, out;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> counts;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON config (a synthetic spec for generate)")->required();
    cmd->add_option("--out", out, "output directory (must not exist unless --force)")->required();
    cmd->add_option("--seed", seeds, "seed list, overrides the config")->delimiter(',');
    cmd->add_flag("--force", args.force, "replace an existing output directory");
  };
  auto* gen = app.add_subcommand("generate", "write a synthetic multi-domain click log");
  auto* train = app.add_subcommand("train", "run the training pipeline of the configured mode");
  auto* compare = app.add_subcommand("compare", "compare plain / mlora / moe pipelines");
  auto* sweep = app.add_subcommand("sweep-experts", "WAUC against the total number of experts");
  for (auto* c : {gen, train, compare, sweep}) common(c);
  sweep->add_option("--counts", counts, "total expert counts, overrides the config")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : mlora::cli::kExitConfig;
  }
  args.config = config;
  args.out = out;
  args.seeds = seeds;
  args.counts = counts;
  const std::string name = app.get_subcommands().front()->get_name();
  return mlora::cli::run_command(name, args, std::cout, std::cerr);
}
