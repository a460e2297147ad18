#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "prevsynth/cli.hpp"

namespace {

struct CommonFlags {
  std::string manifest_path;
  std::string out_dir;
  std::string bias_structure;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int chains = 0;
  int iters = 0;
  int burnin = -1;

  void attach(CLI::App* cmd, bool needs_manifest = true) {
    auto* m = cmd->add_option("--manifest", manifest_path, "run manifest (JSON)");
    if (needs_manifest) m->required();
    cmd->add_option("--out", out_dir, "output directory (overrides manifest)");
    cmd->add_option("--seed", seed, "RNG seed (overrides manifest)")
        ->each([this](const std::string&) { seed_set = true; });
    cmd->add_option("--bias-structure", bias_structure, "bias structure b1..b7")
        ->check(CLI::IsMember({"b1", "b2", "b3", "b4", "b5", "b6", "b7"}));
    cmd->add_option("--chains", chains, "number of chains");
    cmd->add_option("--iters", iters, "iterations per chain");
    cmd->add_option("--burnin", burnin, "burn-in iterations per chain");
  }

  prevsynth::RunManifest load() const {
    auto manifest = prevsynth::load_manifest(manifest_path);
    if (!out_dir.empty()) manifest.output_dir = out_dir;
    if (seed_set) manifest.sampler.seed = seed;
    if (!bias_structure.empty())
      manifest.structure = *prevsynth::parse_bias_structure(bias_structure);
    if (chains > 0) manifest.sampler.chains = chains;
    if (iters > 0) manifest.sampler.iterations = iters;
    if (burnin >= 0) manifest.sampler.burn_in = burnin;
    return manifest;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stratified disease-prevalence estimation by Bayesian evidence synthesis"};
  app.require_subcommand(1);

  CommonFlags validate_flags, fit_flags, sweep_flags, cv_flags;
  bool allow_prior_only = false;
  bool trace = false;
  std::string scenario_path, simulate_out = "simulated";
  std::uint64_t simulate_seed = 1;

  auto* validate = app.add_subcommand("validate", "check inputs and the identifiability guard");
  validate_flags.attach(validate);

  auto* fit = app.add_subcommand("fit", "fit the model and write posterior summaries");
  fit_flags.attach(fit);
  fit->add_flag("--allow-prior-only", allow_prior_only,
                "waive the identifiability guard (e.g. for prior-only runs)");
  fit->add_flag("--trace", trace, "write retained draws per chain to CSV");

  auto* sweep = app.add_subcommand("sweep", "fit all seven bias formulations and compare");
  sweep_flags.attach(sweep);

  auto* cv = app.add_subcommand("cv", "leave-one-data-source-out cross-validation");
  cv_flags.attach(cv);

  auto* simulate = app.add_subcommand("simulate", "generate a synthetic data bundle");
  simulate->add_option("--scenario", scenario_path, "scenario file (JSON)")->required();
  simulate->add_option("--out", simulate_out, "output directory");
  simulate->add_option("--seed", simulate_seed, "RNG seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) return prevsynth::cli::cmd_validate(validate_flags.load(), std::cout);
    if (fit->parsed())
      return prevsynth::cli::cmd_fit(fit_flags.load(), allow_prior_only, trace, std::cout);
    if (sweep->parsed()) return prevsynth::cli::cmd_sweep(sweep_flags.load(), std::cout);
    if (cv->parsed()) return prevsynth::cli::cmd_cv(cv_flags.load(), std::cout);
    if (simulate->parsed())
      return prevsynth::cli::cmd_simulate(scenario_path, simulate_out, simulate_seed, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return prevsynth::cli::kExitValidation;
  }
  return 0;
}
