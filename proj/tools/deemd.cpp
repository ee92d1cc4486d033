// deemd: screening pipeline driver.
//
//   deemd screen --config configs/synthetic_small.json --jobs 4
//
// Each subcommand runs its upstream stages first; unchanged stages are cache
// hits. Exit codes: 0 ok, 1 unexpected, 2 config, 3..8 synth..score.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "deemd/common.hpp"
#include "deemd/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::size_t> k;
  std::optional<double> eta, zeta, alpha, sigma;
  bool verbose = false;
};

deemd::RunConfig resolve(const Overrides& o) {
  deemd::RunConfig cfg = o.config.empty() ? deemd::RunConfig{} : deemd::load_run_config(o.config);
  if (!o.output.empty()) cfg.output_dir = o.output;
  if (o.seed) cfg.seed = *o.seed;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.k) cfg.train.k = *o.k;
  if (o.eta) cfg.train.eta = *o.eta;
  if (o.zeta) cfg.zeta = *o.zeta;
  if (o.alpha) cfg.alpha = *o.alpha;
  if (o.sigma) cfg.sigma = *o.sigma;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deemd: top-k MIL screening toolkit"};
  app.require_subcommand(1);
  Overrides o;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "generate the synthetic screen"},
      {"preprocess", "count nuclei, drop empty samples, split, channel statistics"},
      {"train", "top-k MIL training"},
      {"eval", "validation/test AP and localization metrics"},
      {"map", "infection maps and overlays"},
      {"score", "dose efficacy and treatment ranking"},
      {"screen", "all stages plus report.json"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("-o,--output", o.output, "output directory (overrides config)");
    sub->add_option("--seed", o.seed, "global seed");
    sub->add_option("-j,--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--k", o.k, "top-k instances per bag");
    sub->add_option("--eta", o.eta, "bag threshold");
    sub->add_option("--zeta", o.zeta, "efficacy cutoff");
    sub->add_option("--alpha", o.alpha, "infection map exponent");
    sub->add_option("--sigma", o.sigma, "map smoothing in pixels");
    sub->add_flag("-v,--verbose", o.verbose, "debug logging");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : deemd::kConfigExitCode;
  }
  spdlog::set_level(o.verbose ? spdlog::level::debug : spdlog::level::info);

  deemd::RunConfig cfg;
  try {
    cfg = resolve(o);
  } catch (const std::exception& e) {
    spdlog::error("configuration: {}", e.what());
    return deemd::kConfigExitCode;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    deemd::Pipeline pipeline(cfg);
    if (cmd == "synth") pipeline.synth();
    else if (cmd == "preprocess") pipeline.preprocess();
    else if (cmd == "train") pipeline.train();
    else if (cmd == "eval") pipeline.eval();
    else if (cmd == "map") pipeline.map();
    else if (cmd == "score") pipeline.score();
    else pipeline.screen();
    for (const auto& h : pipeline.history())
      std::cout << deemd::to_string(h.stage) << (h.cache_hit ? " cached " : " ran ")
                << h.key.substr(0, 16) << '\n';
  } catch (const deemd::StageFailure& e) {
    spdlog::error("{}", e.what());
    return deemd::exit_code(e.stage());
  } catch (const deemd::Error& e) {
    spdlog::error("{}", e.what());
    return e.kind() == deemd::ErrorKind::InvalidConfig ? deemd::kConfigExitCode : 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
