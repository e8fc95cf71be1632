#include "ctrlloop/experiment.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ctrlloop/error.hpp"
#include "ctrlloop/strutil.hpp"

namespace ctrlloop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void say(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

// Keeps only log lines up to and including `last_step`; later lines belong to
// work lost at the interruption and are replayed after resuming.
void truncate_log(const fs::path& path, std::int64_t last_step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) continue;
    if (j.at("step").get<std::int64_t>() <= last_step) kept += line + '\n';
  }
  in.close();
  write_text(path, kept);
}

std::string round_label(int round) { return round == 0 ? "warmstart" : strprintf("round%d", round); }

}  // namespace

void set_deterministic(bool on) {
  if (on) torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(on, false);
}

DatasetManifest run_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir, const LogFn& log) {
  cfg.validate();
  const auto& d = cfg.dataset;
  say(log, strprintf("rendering %d objects x %d views at %dpx", d.n_objects, d.n_views, d.resolution));
  auto m = build_dataset(d.n_objects, d.n_views, d.resolution, d.seed, out_dir);
  say(log, "manifest: " + (out_dir / "manifest.json").string());
  return m;
}

std::vector<fs::path> run_train(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                                const TrainOptions& opts, const LogFn& log) {
  cfg.validate();
  const auto manifest = load_manifest(data_dir);
  const auto identity = dataset_identity(manifest);
  ensure_dir(out_dir);
  save_experiment(cfg, out_dir / "config.json");

  const nets::FrozenEncoder encoder(cfg.model.encoder);
  auto data = std::make_shared<const train::TrainingData>(train::TrainingData::from_manifest(manifest, encoder));
  train::Trainer trainer(cfg.model, cfg.train, data);
  const auto log_path = out_dir / "train_log.jsonl";

  auto existing = list_checkpoints(out_dir);
  if (!existing.empty()) {
    const auto rec = load_checkpoint(existing.back());
    if (!(rec.config.model == cfg.model) || !(rec.config.train == cfg.train))
      throw ValidationError("cannot resume: " + existing.back().string() + " was written with a different config");
    if (rec.data != identity) throw ValidationError("cannot resume: checkpoint was trained on a different dataset");
    restore(trainer, rec);
    truncate_log(log_path, rec.global_step);
    say(log, strprintf("resuming from %s (round %d, step %lld)", existing.back().filename().c_str(), rec.round,
                       static_cast<long long>(rec.global_step)));
  } else {
    if (fs::exists(log_path)) fs::remove(log_path);
    if (opts.init_from) {
      const auto rec = load_checkpoint(*opts.init_from);
      if (rec.round != 0) throw ValidationError("init checkpoint must be a warm start (round 0)");
      if (rec.data != identity) throw ValidationError("init checkpoint was trained on a different dataset");
      restore(trainer, rec);
      if (rec.global_step != cfg.train.warmstart_steps)
        throw ValidationError("init checkpoint step count differs from train.warmstart_steps");
      say(log, "starting from " + opts.init_from->string());
    } else {
      say(log, strprintf("warm start: %d SM steps", cfg.train.warmstart_steps));
      trainer.run_warmstart();
    }
    trainer.log().append_jsonl(log_path);
    const auto path = out_dir / checkpoint_name(0);
    save_checkpoint(capture(trainer, cfg, round_label(0), identity), path);
    existing.push_back(path);
    say(log, "wrote " + path.string());
  }

  const bool rounds_enabled = cfg.train.strategy != train::Strategy::SmOnly;
  while (rounds_enabled && trainer.round() < cfg.train.rounds) {
    if (opts.stop_after_round && trainer.round() >= *opts.stop_after_round) break;
    const auto logged = trainer.log().entries.size();
    trainer.run_round();
    trainer.log().append_jsonl(log_path, logged);
    const auto path = out_dir / checkpoint_name(trainer.round());
    save_checkpoint(capture(trainer, cfg, round_label(trainer.round()), identity), path);
    existing.push_back(path);
    say(log, strprintf("round %d done (step %lld), wrote %s", trainer.round(),
                       static_cast<long long>(trainer.global_step()), path.c_str()));
  }
  return existing;
}

metrics::MetricsReport run_eval_checkpoint(const fs::path& checkpoint, const fs::path& data_dir,
                                           const EvalConfig& eval, const fs::path& out_dir,
                                           const std::optional<train::ModelConfig>& expected_model,
                                           const LogFn& log) {
  const auto rec = load_checkpoint(checkpoint);
  if (expected_model && !(*expected_model == rec.config.model))
    throw ValidationError("architecture mismatch: " + checkpoint.string() +
                          " was trained with a different model config");
  const auto manifest = load_manifest(data_dir);
  EvalConfig ec = eval;
  ec.denoise_steps = std::min(ec.denoise_steps, rec.config.model.timesteps);
  say(log, strprintf("evaluating %s (%d denoise steps, %zu seeds)", checkpoint.filename().c_str(), ec.denoise_steps,
                     ec.seeds.size()));
  auto report = metrics::evaluate(rec, manifest, ec);
  metrics::write_report(report, out_dir);
  say(log, strprintf("%s [%s]: PSNR %.3f  AA@15 %.2f%%  IoU@0.7 %.2f%%  -> %s", report.label.c_str(),
                     report.split.c_str(), report.psnr, 100.0 * report.aa_at_threshold(15.0),
                     100.0 * report.iou_at_threshold(0.7), out_dir.c_str()));
  return report;
}

std::vector<metrics::MetricsReport> run_eval_dir(const fs::path& run_dir, const fs::path& data_dir,
                                                 const EvalConfig& eval,
                                                 const std::optional<train::ModelConfig>& expected_model,
                                                 const LogFn& log) {
  const auto ckpts = list_checkpoints(run_dir);
  if (ckpts.empty()) throw ValidationError("no checkpoints found in " + run_dir.string());
  std::vector<metrics::MetricsReport> out;
  for (const auto& c : ckpts)
    out.push_back(run_eval_checkpoint(c, data_dir, eval, run_dir / "eval" / c.stem(), expected_model, log));
  return out;
}

// ---------------------------------------------------------------- ablation

std::vector<AblationCell> ablation_cells(const ExperimentConfig& base) {
  const auto& a = base.ablate;
  std::vector<int> ks = a.cl_denoise_steps;
  if (ks.empty()) ks.push_back(base.train.cl_denoise_steps);
  std::vector<train::LossMode> modes;
  for (const auto& m : a.loss_modes) modes.push_back(train::parse_loss_mode(m));
  if (modes.empty()) modes.push_back(base.train.loss_mode);
  std::vector<train::Strategy> strategies;
  for (const auto& s : a.strategies) strategies.push_back(train::parse_strategy(s));
  if (strategies.empty()) strategies.push_back(base.train.strategy);

  std::vector<AblationCell> cells;
  for (int k : ks)
    for (auto m : modes)
      for (auto s : strategies) {
        AblationCell c;
        c.cl_denoise_steps = k;
        c.loss_mode = m;
        c.strategy = s;
        c.name = strprintf("k%d_%s_%s", k, train::to_string(m).c_str(), train::to_string(s).c_str());
        cells.push_back(std::move(c));
      }
  return cells;
}

namespace {

json cell_json(const AblationCell& c) {
  json j{{"name", c.name},
         {"cl_denoise_steps", c.cl_denoise_steps},
         {"loss_mode", train::to_string(c.loss_mode)},
         {"strategy", train::to_string(c.strategy)},
         {"status", c.failed ? "failed" : "ok"}};
  if (c.failed) j["error"] = c.error;
  if (c.report) j["metrics"] = metrics::to_json(*c.report);
  return j;
}

std::string failed_row(const std::string& name, const std::string& error) {
  std::string msg = error;
  std::replace(msg.begin(), msg.end(), '|', '/');
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  return strprintf("| %s | failed | - | - | - | - |\n", name.c_str()) + "\nFailure (" + name + "): " + msg + "\n\n";
}

}  // namespace

std::string ablation_markdown(const ExperimentConfig& base, const std::vector<AblationCell>& cells) {
  std::ostringstream md;
  md << "# Ablation\n\n";
  md << "All cells start from the same SM warm start (" << base.train.warmstart_steps
     << " steps), which stands in for a pretrained initialization.\n\n";

  struct Axis {
    std::string title;
    bool enabled;
    std::function<std::string(const AblationCell&)> value;
  };
  const std::vector<Axis> axes{
      {"Denoise steps (K)", !base.ablate.cl_denoise_steps.empty(),
       [](const AblationCell& c) { return std::to_string(c.cl_denoise_steps); }},
      {"Loss mode", !base.ablate.loss_modes.empty(),
       [](const AblationCell& c) { return train::to_string(c.loss_mode); }},
      {"Strategy", !base.ablate.strategies.empty(),
       [](const AblationCell& c) { return train::to_string(c.strategy); }},
  };
  bool any = false;
  for (const auto& axis : axes) {
    if (!axis.enabled) continue;
    any = true;
    md << "## " << axis.title << "\n\n" << metrics::markdown_header();
    std::vector<const AblationCell*> order;
    for (const auto& c : cells) order.push_back(&c);
    std::stable_sort(order.begin(), order.end(),
                     [&](const AblationCell* x, const AblationCell* y) { return axis.value(*x) < axis.value(*y); });
    std::string failures;
    for (const auto* c : order) {
      const auto name = axis.value(*c) + " (" + c->name + ")";
      if (c->failed || !c->report) {
        md << strprintf("| %s | failed | - | - | - | - |\n", name.c_str());
        failures += "- " + c->name + ": " + c->error + "\n";
      } else {
        md << metrics::markdown_row(name, *c->report);
      }
    }
    if (!failures.empty()) md << "\nFailed cells:\n" << failures;
    md << "\n";
  }
  if (!any) {
    md << "## Base configuration\n\n" << metrics::markdown_header();
    for (const auto& c : cells) {
      if (c.failed || !c.report)
        md << failed_row(c.name, c.error);
      else
        md << metrics::markdown_row(c.name, *c.report);
    }
    md << "\n";
  }

  if (!base.ablate.seeds.empty()) {
    md << "## Random seed (PSNR)\n\n| Cell |";
    for (auto s : base.ablate.seeds) md << " " << s << " |";
    md << " Spread |\n|---|";
    for (std::size_t i = 0; i <= base.ablate.seeds.size(); ++i) md << "---|";
    md << "\n";
    for (const auto& c : cells) {
      md << "| " << c.name << " |";
      if (c.failed || !c.report) {
        for (std::size_t i = 0; i <= base.ablate.seeds.size(); ++i) md << " - |";
        md << "\n";
        continue;
      }
      double lo = INFINITY, hi = -INFINITY;
      for (auto s : base.ablate.seeds) {
        const double v = c.report->psnr_by_seed.at(s);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        md << strprintf(" %.4f |", v);
      }
      md << strprintf(" %.4f |\n", hi - lo);
    }
    md << "\n";
  }
  md << "KID features: " << metrics::kFeatureSpace << ". Angles: " << metrics::kAngleConvention << ".\n";
  return md.str();
}

std::vector<AblationCell> run_ablate(const ExperimentConfig& base, const fs::path& data_dir, const fs::path& out_dir,
                                     const LogFn& log) {
  base.validate();
  ensure_dir(out_dir);
  auto cells = ablation_cells(base);
  say(log, strprintf("ablation grid: %zu cells", cells.size()));

  const auto warm_dir = out_dir / "warmstart";
  const auto warm = run_train(base, data_dir, warm_dir, TrainOptions{0, std::nullopt}, log).front();

  EvalConfig eval = base.eval;
  if (!base.ablate.seeds.empty()) eval.seeds = base.ablate.seeds;

  for (auto& c : cells) {
    ExperimentConfig cfg = base;
    cfg.train.cl_denoise_steps = c.cl_denoise_steps;
    cfg.train.loss_mode = c.loss_mode;
    cfg.train.strategy = c.strategy;
    const auto dir = out_dir / "cells" / c.name;
    try {
      cfg.validate();
      TrainOptions opts;
      opts.init_from = warm;
      const auto ckpts = run_train(cfg, data_dir, dir, opts, log);
      c.report = run_eval_checkpoint(ckpts.back(), data_dir, eval, dir / "eval" / ckpts.back().stem(),
                                     cfg.model, log);
    } catch (const Error& e) {
      // A diverging cell is a result, not a crash of the whole grid.
      c.failed = true;
      c.error = e.what();
      say(log, "cell " + c.name + " failed: " + c.error);
    }
  }

  json j{{"cells", json::array()}, {"warmstart", warm.string()}, {"seeds", eval.seeds}};
  for (const auto& c : cells) j["cells"].push_back(cell_json(c));
  write_text(out_dir / "ablation.json", j.dump(2) + "\n");
  write_text(out_dir / "ablation.md", ablation_markdown(base, cells));
  say(log, "wrote " + (out_dir / "ablation.md").string());
  return cells;
}

// ------------------------------------------------------------------ report

namespace {

struct RunRows {
  std::string name;
  std::vector<metrics::MetricsReport> reports;  // sorted by round
};

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string line_plot(const std::string& title, const std::string& ylabel, const std::vector<RunRows>& runs,
                      const std::function<double(const metrics::MetricsReport&)>& value) {
  const double W = 480, H = 320, L = 60, R = 130, T = 36, B = 44;
  int max_round = 0;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& run : runs)
    for (const auto& r : run.reports) {
      max_round = std::max(max_round, r.round);
      lo = std::min(lo, value(r));
      hi = std::max(hi, value(r));
    }
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto px = [&](double x) { return L + (W - L - R) * (max_round == 0 ? 0.5 : x / max_round); };
  auto py = [&](double y) { return H - B - (H - T - B) * (y - lo) / (hi - lo); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream s;
  s << strprintf("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" font-family=\"sans-serif\" "
                 "font-size=\"12\">\n",
                 W, H);
  s << strprintf("<rect width=\"%g\" height=\"%g\" fill=\"white\"/>\n", W, H);
  s << strprintf("<text x=\"%g\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">%s</text>\n", (W - R + L) / 2,
                 svg_escape(title).c_str());
  s << strprintf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, H - B, W - R, H - B);
  s << strprintf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, T, L, H - B);
  for (int r = 0; r <= max_round; ++r)
    s << strprintf("<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">%s</text>\n", px(r), H - B + 16,
                   r == 0 ? "warm" : std::to_string(r).c_str());
  s << strprintf("<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">round</text>\n", (W - R + L) / 2, H - 8);
  for (int i = 0; i <= 4; ++i) {
    const double y = lo + (hi - lo) * i / 4.0;
    s << strprintf("<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.3g</text>\n", L - 6, py(y) + 4, y);
    s << strprintf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"#ddd\"/>\n", L, py(y), W - R, py(y));
  }
  s << strprintf("<text x=\"14\" y=\"%g\" transform=\"rotate(-90 14 %g)\" text-anchor=\"middle\">%s</text>\n",
                 (H - B + T) / 2, (H - B + T) / 2, svg_escape(ylabel).c_str());
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const char* color = colors[k % 6];
    std::string pts;
    for (const auto& r : runs[k].reports) pts += strprintf("%.2f,%.2f ", px(r.round), py(value(r)));
    s << strprintf("<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"2\" points=\"%s\"/>\n", color, pts.c_str());
    for (const auto& r : runs[k].reports)
      s << strprintf("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", px(r.round), py(value(r)), color);
    const double ly = T + 16.0 * static_cast<double>(k);
    s << strprintf("<rect x=\"%g\" y=\"%g\" width=\"12\" height=\"3\" fill=\"%s\"/>\n", W - R + 10, ly, color);
    s << strprintf("<text x=\"%g\" y=\"%g\">%s</text>\n", W - R + 26, ly + 5, svg_escape(runs[k].name).c_str());
  }
  s << "</svg>\n";
  return s.str();
}

RunRows collect_run(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw IoError("run directory not found: " + run_dir.string());
  RunRows rows;
  auto norm = fs::absolute(run_dir).lexically_normal();
  if (norm.filename().empty()) norm = norm.parent_path();
  rows.name = norm.filename().string();
  const auto eval_dir = run_dir / "eval";
  if (fs::is_directory(eval_dir)) {
    for (const auto& e : fs::directory_iterator(eval_dir)) {
      const auto agg = e.path() / "aggregate.json";
      if (!fs::is_regular_file(agg)) continue;
      std::ifstream f(agg, std::ios::binary);
      json j;
      try {
        f >> j;
      } catch (const json::exception& ex) {
        throw IoError("cannot parse " + agg.string() + ": " + ex.what());
      }
      rows.reports.push_back(metrics::report_from_json(j));
    }
  }
  if (rows.reports.empty())
    throw ValidationError("no evaluated checkpoints in " + run_dir.string() +
                          " (expected eval/<checkpoint>/aggregate.json; run `eval` first)");
  std::sort(rows.reports.begin(), rows.reports.end(),
            [](const auto& a, const auto& b) { return a.round < b.round; });
  return rows;
}

}  // namespace

std::string run_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, const LogFn& log) {
  if (run_dirs.empty()) throw ValidationError("report: no run directories given");
  std::vector<RunRows> runs;
  for (const auto& d : run_dirs) runs.push_back(collect_run(d));

  std::ostringstream md;
  md << "# Results\n\n" << metrics::markdown_header();
  for (const auto& run : runs)
    for (const auto& r : run.reports) {
      std::string row = r.round == 0 ? "warm start (SM baseline)" : strprintf("%d round%s", r.round,
                                                                              r.round == 1 ? "" : "s");
      if (runs.size() > 1) row = run.name + ": " + row;
      md << metrics::markdown_row(row, r);
    }
  md << "\nThe warm start is a pure score-matching run that stands in for a pretrained initialization.\n";
  md << "KID features: " << metrics::kFeatureSpace << ". Angles: " << metrics::kAngleConvention << ".\n";
  md << "\n![PSNR](psnr.svg) ![AA@15](aa15.svg) ![IoU@0.7](iou07.svg)\n";

  ensure_dir(out_dir);
  write_text(out_dir / "report.md", md.str());
  write_text(out_dir / "psnr.svg", line_plot("PSNR per round", "PSNR (dB)", runs, [](const auto& r) { return r.psnr; }));
  write_text(out_dir / "aa15.svg", line_plot("AA@15° per round", "AA@15° (%)", runs,
                                             [](const auto& r) { return 100.0 * r.aa_at_threshold(15.0); }));
  write_text(out_dir / "iou07.svg", line_plot("IoU@0.7 per round", "IoU@0.7 (%)", runs,
                                              [](const auto& r) { return 100.0 * r.iou_at_threshold(0.7); }));
  say(log, "wrote " + (out_dir / "report.md").string());
  return md.str();
}

}  // namespace ctrlloop
