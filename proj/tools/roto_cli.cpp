// roto: train, eval, diagnose and sweep from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage,
// 3 training aborted on a non-finite loss (last good checkpoint is kept).
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "roto/harness.hpp"

using namespace roto;

namespace {

config::ExperimentConfig load_config(const std::string& path) {
  config::ExperimentConfig c = config::load_file(path);
  config::apply_env(c);
  return c;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Homogenized gradient-based meta-learning experiments"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Meta-train, save a checkpoint, evaluate");
  std::string train_config;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::size_t> train_iters;
  std::string train_out;
  bool freeze = false, reset = false, no_eval = false, trace = false;
  train->add_option("--config", train_config, "TOML experiment file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", train_seed, "Overrides run.seed and ROTO_SEED");
  train->add_option("--iterations", train_iters, "Overrides run.iterations");
  train->add_option("--out-dir", train_out, "Overrides run.out_dir and ROTO_OUT_DIR");
  train->add_flag("--freeze-homogenizer", freeze, "Keep omega = 1 and gamma = I");
  train->add_flag("--reset-per-batch", reset, "Reset every homogenizer slot for each batch");
  train->add_flag("--no-eval", no_eval, "Skip meta-testing after training");
  train->add_flag("--trace", trace, "Write the per-step operation log to trace.log");

  // eval
  auto* eval = app.add_subcommand("eval", "Meta-test a checkpoint");
  std::string eval_ckpt;
  std::vector<std::string> eval_families;
  std::size_t eval_episodes = 0;
  std::optional<std::uint64_t> eval_seed;
  std::optional<std::size_t> eval_steps;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--families", eval_families, "Comma-separated family names")->delimiter(',');
  eval->add_option("--episodes", eval_episodes, "Episode count (default from the config)");
  eval->add_option("--seed", eval_seed, "Episode sampling seed");
  eval->add_option("--steps", eval_steps, "Fine-tuning steps per episode");

  // diagnose
  auto* diag_cmd = app.add_subcommand("diagnose", "Run a diagnostics suite");
  harness::DiagnoseOptions dopt;
  std::string diag_ckpt, diag_config;
  std::optional<double> diag_eta;
  diag_cmd->add_option("--suite", dopt.suite, "bound, homogeneity or saliency")->required();
  auto* src_ck = diag_cmd->add_option("--checkpoint", diag_ckpt, "Diagnose a trained checkpoint")->check(CLI::ExistingFile);
  auto* src_cf = diag_cmd->add_option("--config", diag_config, "Diagnose the initialization of a config")->check(CLI::ExistingFile);
  src_ck->excludes(src_cf);
  diag_cmd->add_option("--out-dir", dopt.out_dir, "Report directory");
  diag_cmd->add_option("--families", dopt.families, "Comma-separated family names")->delimiter(',');
  diag_cmd->add_option("--seed", dopt.seed, "Diagnostics seed");
  diag_cmd->add_option("--trials", dopt.trials, "bound: trials per family pair");
  diag_cmd->add_option("--budget", dopt.budget, "bound: G/L sampling budget");
  diag_cmd->add_option("--eta", diag_eta, "bound: inner rate in the bound (default from the config)");
  diag_cmd->add_option("--radius", dopt.radius, "bound: G/L sampling radius");
  diag_cmd->add_flag("--sampled", dopt.sampled, "bound: sampled episodes instead of exact expectations");
  diag_cmd->add_option("--images", dopt.images, "saliency: images to explain");
  diag_cmd->add_option("--sigma", dopt.sigma, "saliency: SmoothGrad noise level");
  diag_cmd->add_option("--samples", dopt.samples, "saliency: noisy copies per image");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate once per parameter value");
  std::string sweep_config, sweep_param, sweep_out;
  std::vector<std::string> sweep_values;
  sweep->add_option("--config", sweep_config, "TOML experiment file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--param", sweep_param, "Dotted config path or short name (beta, tau, eta_base, ...)")->required();
  sweep->add_option("--values", sweep_values, "Values, comma or space separated")->required()->delimiter(',');
  sweep->add_option("--out-dir", sweep_out, "Overrides run.out_dir and ROTO_OUT_DIR");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      config::ExperimentConfig c = load_config(train_config);
      if (train_seed) c.run.seed = *train_seed;
      if (train_iters) c.run.iterations = *train_iters;
      if (!train_out.empty()) c.run.out_dir = train_out;
      if (freeze) c.homogenizer.freeze = true;
      if (reset) c.homogenizer.reset_per_batch = true;
      if (trace) c.run.trace = true;
      harness::RunOutput out = harness::run_experiment(c, !no_eval);
      std::cout << "run " << out.dir.string() << "\n";
      std::cout << "steps " << out.train.steps << " final_loss " << out.train.final_loss << "\n";
      if (out.eval)
        std::cout << out.eval->metric << " " << out.eval->mean << " +- " << out.eval->ci95 << " over "
                  << out.eval->episodes << " episodes\n";
      if (out.train.aborted) {
        std::cerr << "training aborted: " << out.train.abort_reason << " (last good step "
                  << out.train.checkpoint.step << " saved)\n";
        return 3;
      }
    } else if (*eval) {
      harness::EvalOptions o;
      o.families = eval_families;
      o.episodes = eval_episodes;
      o.seed = eval_seed;
      o.steps = eval_steps;
      harness::EvalResult r = harness::evaluate(ckpt::load(eval_ckpt), o);
      std::cout << r.to_json().dump() << "\n";
    } else if (*diag_cmd) {
      if (diag_ckpt.empty() && diag_config.empty()) throw ConfigError("diagnose: give --checkpoint or --config");
      if (dopt.out_dir == harness::DiagnoseOptions{}.out_dir && diag_cmd->count("--out-dir") == 0)
        dopt.out_dir = env_or("ROTO_OUT_DIR", ".") + "/diagnostics";
      dopt.eta = diag_eta;
      harness::Subject s = diag_ckpt.empty() ? harness::Subject::from_config(load_config(diag_config))
                                             : harness::Subject::from_checkpoint(ckpt::load(diag_ckpt));
      harness::DiagnoseReport rep = harness::diagnose(s, dopt);
      std::cout << "wrote " << rep.jsonl.string() << " and " << rep.csv.string() << "\n";
      if (dopt.suite == "bound") {
        std::cout << "bound holds in " << rep.passed << " / " << rep.checks << " checks\n";
        if (!dopt.sampled && rep.passed != rep.checks) return 1;
      }
    } else if (*sweep) {
      config::ExperimentConfig c = load_config(sweep_config);
      if (!sweep_out.empty()) c.run.out_dir = sweep_out;
      auto points = harness::sweep(c, sweep_param, sweep_values);
      for (const auto& p : points) {
        std::cout << harness::resolve_param(sweep_param) << "=" << p.value << " steps " << p.run.train.steps;
        if (p.run.eval) std::cout << " " << p.run.eval->metric << " " << p.run.eval->mean << " +- " << p.run.eval->ci95;
        std::cout << "\n";
      }
      std::cout << "wrote " << c.run.out_dir << "/sweep.csv\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
