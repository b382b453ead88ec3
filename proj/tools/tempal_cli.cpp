// tempal: train, evaluate, compare and inspect TempAl agents.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "tempal/evalcli/evalcli.hpp"

namespace {

using namespace tempal;

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

struct TrainArgs {
  std::string config, out = "run";
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

struct EvalArgs {
  std::string ckpt, config, out;
  int episodes = 100;
  bool greedy = false, random = false;
  std::uint64_t seed = 0;
};

struct CompareArgs {
  std::string random, instant, tempal, out;
};

struct ExportArgs {
  std::string ckpt, out;
  int steps = 1000;
  bool pca = false;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = load_config(a.config);
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.validate();
  }
  TrainOptions o;
  o.out_dir = a.out;
  o.resume = a.resume;
  o.log = [](const std::string& s) { std::cout << s << std::endl; };
  o.on_iteration = [&cfg](const IterationMetrics& m) {
    const int every = std::max(1, cfg.n_iterations() / 50);
    if (m.iteration % every != 0) return;
    std::cout << "iter " << m.iteration << "  steps " << m.steps << "  return " << format_number(m.mean_return)
              << "  align_loss " << format_number(m.align_loss) << "  entropy " << format_number(m.entropy)
              << std::endl;
  };
  const TrainResult r = train(cfg, o);
  if (r.finished) {
    const auto report = EvalReport::from_returns(cfg.env.name, to_string(cfg.agent.mode), r.final_returns);
    std::cout << "final mean return over " << report.episodes << " episodes: " << format_number(report.mean_return)
              << std::endl;
  } else {
    std::cout << "stopped after iteration " << r.iterations << std::endl;
  }
  return 0;
}

int run_eval(const EvalArgs& a) {
  EvalReport report;
  if (a.random) {
    const TrainConfig cfg = load_config(a.config);
    report = evaluate_random(cfg.env, a.episodes, a.seed);
  } else {
    report = evaluate(load_checkpoint(a.ckpt), std::nullopt, a.episodes, a.greedy, a.seed);
  }
  std::printf("%s %s: mean return %s (std %s) over %d episodes\n", report.env.c_str(), report.mode.c_str(),
              format_number(report.mean_return).c_str(), format_number(report.std_return).c_str(), report.episodes);
  if (!a.out.empty()) save_report(report, a.out);
  return 0;
}

int run_compare(const CompareArgs& a) {
  const auto report = compare(load_report(a.random), load_report(a.instant), load_report(a.tempal));
  std::cout << format_comparison(report);
  if (!a.out.empty()) save_report(report, a.out);
  return 0;
}

int run_export(const ExportArgs& a) {
  const auto dump = export_embeddings(load_checkpoint(a.ckpt), std::nullopt, a.steps, a.out, a.pca, a.seed);
  std::printf("wrote %zu rows to %s\n", dump.rows.size(), a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"TempAl: temporally aligned history representations for PPO agents", "tempal"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train an agent from a config file");
  train_cmd->add_option("--config", ta.config, "key = value config file")->required();
  train_cmd->add_option("--seed", ta.seed, "override train.seed");
  train_cmd->add_option("--out", ta.out, "output directory")->capture_default_str();
  train_cmd->add_flag("--resume", ta.resume, "continue from OUT/checkpoint.tmpl");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (or a random policy)");
  auto* ckpt_opt = eval_cmd->add_option("--ckpt", ea.ckpt, "checkpoint file");
  auto* random_flag = eval_cmd->add_flag("--random", ea.random, "uniformly random actions on the config's environment");
  auto* config_opt = eval_cmd->add_option("--config", ea.config, "config file naming the environment (with --random)");
  eval_cmd->add_option("--episodes", ea.episodes, "number of episodes")->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--greedy", ea.greedy, "argmax actions instead of sampling");
  eval_cmd->add_option("--seed", ea.seed, "evaluation seed")->capture_default_str();
  eval_cmd->add_option("--out", ea.out, "write the report as JSON");
  ckpt_opt->excludes(random_flag);
  random_flag->needs(config_opt);
  config_opt->needs(random_flag);

  CompareArgs ca;
  auto* compare_cmd = app.add_subcommand(
      "compare",
      "relative improvement (R_TempAl - R_random) / (R_instant - R_random) - 1 from three eval reports; when "
      "R_instant equals R_random it is reported as +100%, 0% or -100% by the sign of R_TempAl - R_random");
  compare_cmd->add_option("--random", ca.random, "report of the random policy")->required();
  compare_cmd->add_option("--instant", ca.instant, "report of the instantaneous-only agent")->required();
  compare_cmd->add_option("--tempal", ca.tempal, "report of the TempAl agent")->required();
  compare_cmd->add_option("--out", ca.out, "write the compared report as JSON");

  ExportArgs xa;
  auto* export_cmd = app.add_subcommand("export-emb", "run a checkpoint's policy and dump per-step embeddings as CSV");
  export_cmd->add_option("--ckpt", xa.ckpt, "checkpoint file")->required();
  export_cmd->add_option("--steps", xa.steps, "environment steps")->required()->check(CLI::PositiveNumber);
  export_cmd->add_option("--out", xa.out, "CSV path")->required();
  export_cmd->add_flag("--pca", xa.pca, "append a 2-D PCA projection (p0, p1)");
  export_cmd->add_option("--seed", xa.seed, "environment seed")->capture_default_str();

  if (argc <= 1) {
    std::cerr << app.help();
    return kUsageError;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return kUsageError;
  }
  if (eval_cmd->parsed() && ea.ckpt.empty() && !ea.random) {
    std::cerr << "error: eval needs --ckpt or --random\n\n" << eval_cmd->help();
    return kUsageError;
  }

  try {
    if (train_cmd->parsed()) return run_train(ta);
    if (eval_cmd->parsed()) return run_eval(ea);
    if (compare_cmd->parsed()) return run_compare(ca);
    return run_export(xa);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}
