#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fedsim/commands.hpp"
#include "fedsim/config.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Federated backdoor simulator"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::string sweep;
  std::string round = "final";

  auto* run = app.add_subcommand("run", "run one experiment");
  run->add_option("--config", config, "config file")->required();
  run->add_option("--out", out, "output directory")->required();

  auto* sw = app.add_subcommand("sweep", "run a grid of experiments");
  sw->add_option("--config", config, "base config file")->required();
  sw->add_option("--sweep", sweep, "sweep spec file")->required();
  sw->add_option("--out", out, "output directory")->required();

  auto* benign = app.add_subcommand("benign", "run with the attacking clients removed");
  benign->add_option("--config", config, "config file")->required();
  benign->add_option("--out", out, "output directory")->required();

  auto* emb = app.add_subcommand("export-embeddings", "dump penultimate features of the test sets");
  emb->add_option("--config", config, "config file")->required();
  emb->add_option("--out", out, "output directory")->required();
  emb->add_option("--round", round, "'final' or a round number")->capture_default_str();

  auto* keys = app.add_subcommand("config-keys", "print every config key with its default");

  CLI11_PARSE(app, argc, argv);

  if (*run) return fedsim::cmd_run(config, out, std::cerr);
  if (*sw) return fedsim::cmd_sweep(config, sweep, out, std::cerr);
  if (*benign) return fedsim::cmd_benign_ref(config, out, std::cerr);
  if (*emb) return fedsim::cmd_export_embeddings(config, out, round, std::cerr);
  if (*keys) {
    for (const auto& k : fedsim::config_keys()) {
      std::cout << k.key << " = " << k.default_value << "  # " << k.help << '\n';
    }
    return 0;
  }
  return 1;
}
