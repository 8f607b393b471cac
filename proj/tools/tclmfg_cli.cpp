// Experiment runner: tclmfg_cli run|compare <config> [--seed N] [--out DIR] [--quiet]

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tclmfg/experiment.hpp"

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool quiet = false;
};

tclmfg::ExperimentResult fail(const tclmfg::Error& e) {
  tclmfg::ExperimentResult r;
  r.exit_code = tclmfg::exit_code_for(e);
  r.stage = std::string(tclmfg::to_string(e.stage()));
  r.message = e.what();
  return r;
}

tclmfg::ExperimentResult load(const Args& a, tclmfg::ExperimentConfig& cfg) {
  std::ifstream in(a.config);
  if (!in) return fail(tclmfg::ConfigError(tclmfg::Stage::kParse, "cannot read " + a.config));
  try {
    cfg = tclmfg::parse_config(in);
  } catch (const tclmfg::Error& e) {
    return fail(e);
  }
  if (a.seed) cfg.scenario.seed = *a.seed;
  if (a.out) cfg.output.dir = *a.out;
  return {};
}

int report(const Args& a, const tclmfg::ExperimentResult& r) {
  if (r.exit_code != 0) {
    std::cerr << r.error_record().dump() << '\n';
    return r.exit_code;
  }
  if (!a.quiet)
    for (const auto& f : r.files) std::cout << f.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TCL mean-field game experiments"};
  app.require_subcommand(1);
  Args args;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", args.config, "Config file")->required();
    sub->add_option("--seed", args.seed, "Override scenario.seed");
    sub->add_option("--out", args.out, "Override output.dir");
    sub->add_flag("--quiet", args.quiet, "Print nothing on success");
  };
  CLI::App* run = app.add_subcommand("run", "Run one experiment end to end");
  CLI::App* compare = app.add_subcommand("compare", "Compare dispersion across noise variants");
  add_common(run);
  add_common(compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  tclmfg::ExperimentConfig cfg;
  if (auto r = load(args, cfg); r.exit_code != 0) return report(args, r);
  if (*run) return report(args, tclmfg::run_experiment(cfg));
  return report(args, tclmfg::run_comparison(cfg));
}
