#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "ctrlloop/ctrlloop.h"

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<unsigned long long> seed;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set train.rounds=2")->take_all();
  cmd->add_option("--seed", c.seed, "seed override")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--deterministic", c.deterministic, "single-worker deterministic mode");
}

void log_to_stderr(const char* msg, void*) { std::fprintf(stderr, "%s\n", msg); }

int report_failure(ctrlloop_status s) {
  std::fprintf(stderr, "error: %s\n", ctrlloop_last_error());
  return static_cast<int>(s);
}

std::string default_data_dir() {
  const char* env = std::getenv("CTRLLOOP_DATA_DIR");
  return env && *env ? env : "data";
}

// Builds the config from --config, --set and --seed. `seed_key` names the
// field that --seed overrides for this command.
ctrlloop_status build_config(const Common& c, const std::string& seed_key, ctrlloop_config** out) {
  ctrlloop_status s = c.config_path.empty() ? ctrlloop_config_new(out) : ctrlloop_config_load(c.config_path.c_str(), out);
  if (s != CTRLLOOP_OK) return s;
  for (const auto& o : c.overrides)
    if ((s = ctrlloop_config_set(*out, o.c_str())) != CTRLLOOP_OK) return s;
  if (c.seed) {
    const std::string v = seed_key == "eval.seeds" ? "[" + std::to_string(*c.seed) + "]" : std::to_string(*c.seed);
    if ((s = ctrlloop_config_set(*out, (seed_key + "=" + v).c_str())) != CTRLLOOP_OK) return s;
  }
  return CTRLLOOP_OK;
}

struct ConfigGuard {
  ctrlloop_config* p = nullptr;
  ~ConfigGuard() { ctrlloop_config_free(p); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-loop novel-view diffusion toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ctrlloop_version()));

  Common gen_c, train_c, eval_c, ablate_c;
  std::string gen_out, train_data, train_out, eval_target, eval_data, eval_out, ablate_data, ablate_out, report_out;
  std::vector<std::string> report_runs;

  auto* gen = app.add_subcommand("gen-data", "render the procedural dataset");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "dataset directory (default: $CTRLLOOP_DATA_DIR or ./data)");

  auto* tr = app.add_subcommand("train", "warm start plus closed-loop rounds, one checkpoint per round");
  add_common(tr, train_c);
  tr->add_option("--data", train_data, "dataset directory (default: $CTRLLOOP_DATA_DIR or ./data)");
  tr->add_option("--out", train_out, "run directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or every checkpoint of a run directory");
  add_common(ev, eval_c);
  ev->add_option("target", eval_target, "checkpoint file or run directory")->required();
  ev->add_option("--data", eval_data, "dataset directory (default: $CTRLLOOP_DATA_DIR or ./data)");
  ev->add_option("--out", eval_out, "report directory (default: <run>/eval/<checkpoint>)");

  auto* ab = app.add_subcommand("ablate", "train and evaluate the ablation grid from a shared warm start");
  add_common(ab, ablate_c);
  ab->add_option("--data", ablate_data, "dataset directory (default: $CTRLLOOP_DATA_DIR or ./data)");
  ab->add_option("--out", ablate_out, "output directory")->required();

  auto* rp = app.add_subcommand("report", "Markdown table and per-round plots from evaluated runs");
  rp->add_option("runs", report_runs, "run directories");
  rp->add_option("--out", report_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return CTRLLOOP_ERR_VALIDATION;
  }

  ctrlloop_set_log(log_to_stderr, nullptr);
  ConfigGuard cfg;
  ctrlloop_status s = CTRLLOOP_OK;

  auto prepare = [&](const Common& c, const std::string& seed_key) {
    if (c.deterministic && (s = ctrlloop_set_deterministic(1)) != CTRLLOOP_OK) return false;
    return (s = build_config(c, seed_key, &cfg.p)) == CTRLLOOP_OK;
  };

  if (gen->parsed()) {
    if (!prepare(gen_c, "dataset.seed")) return report_failure(s);
    const std::string out = gen_out.empty() ? default_data_dir() : gen_out;
    if ((s = ctrlloop_gen_data(cfg.p, out.c_str())) != CTRLLOOP_OK) return report_failure(s);
    std::printf("%s/manifest.json\n", out.c_str());
  } else if (tr->parsed()) {
    if (!prepare(train_c, "train.seed")) return report_failure(s);
    const std::string data = train_data.empty() ? default_data_dir() : train_data;
    if ((s = ctrlloop_train(cfg.p, data.c_str(), train_out.c_str())) != CTRLLOOP_OK) return report_failure(s);
  } else if (ev->parsed()) {
    // Without --config/--set/--seed the checkpoint's own settings apply.
    const bool explicit_cfg = !eval_c.config_path.empty() || !eval_c.overrides.empty() || eval_c.seed;
    if (eval_c.deterministic && (s = ctrlloop_set_deterministic(1)) != CTRLLOOP_OK) return report_failure(s);
    if (explicit_cfg && (s = build_config(eval_c, "eval.seeds", &cfg.p)) != CTRLLOOP_OK) return report_failure(s);
    const std::string data = eval_data.empty() ? default_data_dir() : eval_data;
    s = ctrlloop_eval(cfg.p, eval_target.c_str(), data.c_str(), eval_out.empty() ? nullptr : eval_out.c_str());
    if (s != CTRLLOOP_OK) return report_failure(s);
  } else if (ab->parsed()) {
    if (!prepare(ablate_c, "train.seed")) return report_failure(s);
    const std::string data = ablate_data.empty() ? default_data_dir() : ablate_data;
    if ((s = ctrlloop_ablate(cfg.p, data.c_str(), ablate_out.c_str())) != CTRLLOOP_OK) return report_failure(s);
    std::printf("%s/ablation.md\n", ablate_out.c_str());
  } else if (rp->parsed()) {
    std::vector<const char*> runs;
    for (const auto& r : report_runs) runs.push_back(r.c_str());
    if ((s = ctrlloop_report(runs.data(), runs.size(), report_out.c_str())) != CTRLLOOP_OK) return report_failure(s);
    std::printf("%s/report.md\n", report_out.c_str());
  }
  return 0;
}
