#include "ctrlloop/ctrlloop.h"

#include <torch/torch.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>

#include "ctrlloop/checkpoint.hpp"
#include "ctrlloop/config.hpp"
#include "ctrlloop/error.hpp"
#include "ctrlloop/experiment.hpp"

struct ctrlloop_config {
  ctrlloop::ExperimentConfig cfg;
};

struct ctrlloop_model {
  ctrlloop::CheckpointRecord rec;
  ctrlloop::nets::FrozenEncoder encoder;
  ctrlloop::nets::ConditionalDenoiser model{nullptr};
  ctrlloop::diffusion::NoiseSchedule sched;
  int resolution = 0;
};

namespace {

namespace fs = std::filesystem;
using namespace ctrlloop;

thread_local std::string g_last_error;

std::mutex g_log_mutex;
ctrlloop_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

void emit(const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  if (g_log_fn) g_log_fn(msg.c_str(), g_log_user);
}

const LogFn kLog = [](const std::string& m) { emit(m); };

ctrlloop_status fail(ctrlloop_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <class F>
ctrlloop_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return CTRLLOOP_OK;
  } catch (const Error& e) {
    switch (e.kind()) {
      case ErrorKind::Validation: return fail(CTRLLOOP_ERR_VALIDATION, e.what());
      case ErrorKind::Numerical: return fail(CTRLLOOP_ERR_RUNTIME, e.what());
      case ErrorKind::Io: return fail(CTRLLOOP_ERR_IO, e.what());
    }
    return fail(CTRLLOOP_ERR_RUNTIME, e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(CTRLLOOP_ERR_VALIDATION, std::string("invalid JSON: ") + e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(CTRLLOOP_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(CTRLLOOP_ERR_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail(CTRLLOOP_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail(CTRLLOOP_ERR_RUNTIME, "unknown error");
  }
}

void require(const void* p, const char* what) {
  if (!p) throw ValidationError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* ctrlloop_version(void) { return "1.0.0"; }

const char* ctrlloop_last_error(void) { return g_last_error.c_str(); }

void ctrlloop_set_log(ctrlloop_log_fn fn, void* user) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  g_log_fn = fn;
  g_log_user = user;
}

ctrlloop_status ctrlloop_set_deterministic(int on) {
  return guarded([&] { set_deterministic(on != 0); });
}

ctrlloop_status ctrlloop_config_new(ctrlloop_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new ctrlloop_config{};
  });
}

ctrlloop_status ctrlloop_config_load(const char* path, ctrlloop_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new ctrlloop_config{load_experiment(path)};
  });
}

ctrlloop_status ctrlloop_config_parse(const char* json_text, ctrlloop_config** out) {
  return guarded([&] {
    require(json_text, "json_text");
    require(out, "out");
    *out = new ctrlloop_config{experiment_from_json(nlohmann::json::parse(json_text))};
  });
}

ctrlloop_status ctrlloop_config_set(ctrlloop_config* cfg, const char* assignment) {
  return guarded([&] {
    require(cfg, "cfg");
    require(assignment, "assignment");
    cfg->cfg = apply_override(cfg->cfg, assignment);
  });
}

ctrlloop_status ctrlloop_config_to_json(const ctrlloop_config* cfg, char** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = dup_string(to_json(cfg->cfg).dump(2));
  });
}

ctrlloop_status ctrlloop_config_save(const ctrlloop_config* cfg, const char* path) {
  return guarded([&] {
    require(cfg, "cfg");
    require(path, "path");
    save_experiment(cfg->cfg, path);
  });
}

void ctrlloop_config_free(ctrlloop_config* cfg) { delete cfg; }

void ctrlloop_string_free(char* s) { std::free(s); }

ctrlloop_status ctrlloop_gen_data(const ctrlloop_config* cfg, const char* out_dir) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out_dir, "out_dir");
    run_gen_data(cfg->cfg, out_dir, kLog);
  });
}

ctrlloop_status ctrlloop_train(const ctrlloop_config* cfg, const char* data_dir, const char* out_dir) {
  return guarded([&] {
    require(cfg, "cfg");
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    run_train(cfg->cfg, data_dir, out_dir, {}, kLog);
  });
}

ctrlloop_status ctrlloop_train_until(const ctrlloop_config* cfg, const char* data_dir, const char* out_dir,
                                     int round) {
  return guarded([&] {
    require(cfg, "cfg");
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    if (round < 0) throw ValidationError("round must be >= 0");
    TrainOptions opts;
    opts.stop_after_round = round;
    run_train(cfg->cfg, data_dir, out_dir, opts, kLog);
  });
}

ctrlloop_status ctrlloop_eval(const ctrlloop_config* cfg, const char* target, const char* data_dir,
                              const char* out_dir) {
  return guarded([&] {
    require(target, "target");
    require(data_dir, "data_dir");
    const fs::path t(target);
    std::optional<train::ModelConfig> expected;
    if (cfg) {
      cfg->cfg.validate();
      expected = cfg->cfg.model;
    }
    if (fs::is_directory(t)) {
      const auto ckpts = list_checkpoints(t);
      if (ckpts.empty()) throw ValidationError("no checkpoints found in " + t.string());
      const EvalConfig eval = cfg ? cfg->cfg.eval : load_checkpoint(ckpts.front()).config.eval;
      for (const auto& c : ckpts) {
        const fs::path out = out_dir ? fs::path(out_dir) / c.stem() : t / "eval" / c.stem();
        run_eval_checkpoint(c, data_dir, eval, out, expected, kLog);
      }
      return;
    }
    if (!fs::exists(t)) throw IoError("checkpoint not found: " + t.string());
    const EvalConfig eval = cfg ? cfg->cfg.eval : load_checkpoint(t).config.eval;
    const fs::path out = out_dir ? fs::path(out_dir) : t.parent_path() / "eval" / t.stem();
    run_eval_checkpoint(t, data_dir, eval, out, expected, kLog);
  });
}

ctrlloop_status ctrlloop_ablate(const ctrlloop_config* cfg, const char* data_dir, const char* out_dir) {
  return guarded([&] {
    require(cfg, "cfg");
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    run_ablate(cfg->cfg, data_dir, out_dir, kLog);
  });
}

ctrlloop_status ctrlloop_report(const char* const* run_dirs, size_t n_runs, const char* out_dir) {
  return guarded([&] {
    require(out_dir, "out_dir");
    if (n_runs > 0) require(run_dirs, "run_dirs");
    std::vector<fs::path> dirs;
    for (size_t i = 0; i < n_runs; ++i) {
      require(run_dirs[i], "run_dirs[i]");
      dirs.emplace_back(run_dirs[i]);
    }
    run_report(dirs, out_dir, kLog);
  });
}

ctrlloop_status ctrlloop_model_open(const char* checkpoint, ctrlloop_model** out) {
  return guarded([&] {
    require(checkpoint, "checkpoint");
    require(out, "out");
    auto rec = load_checkpoint(checkpoint);
    const auto& mc = rec.config.model;
    auto* m = new ctrlloop_model{rec, nets::FrozenEncoder(mc.encoder), nets::make_denoiser(mc.arch),
                                 diffusion::schedule_from_betas(rec.betas),
                                 rec.data.value("resolution", rec.config.dataset.resolution)};
    try {
      load_parameters(m->model, m->rec);
      m->model->eval();
    } catch (...) {
      delete m;
      throw;
    }
    *out = m;
  });
}

int ctrlloop_model_resolution(const ctrlloop_model* model) { return model ? model->resolution : 0; }

ctrlloop_status ctrlloop_model_generate(ctrlloop_model* model, const float* ref_rgb, double d_elevation,
                                        double d_azimuth, double d_radius, uint64_t seed, int steps,
                                        float* out_rgb) {
  return guarded([&] {
    require(model, "model");
    require(ref_rgb, "ref_rgb");
    require(out_rgb, "out_rgb");
    const int T = model->sched.steps();
    if (steps < 1 || steps > T) throw ValidationError("steps must lie in [1, " + std::to_string(T) + "]");
    const int r = model->resolution;
    torch::NoGradGuard no_grad;
    const auto ref = torch::from_blob(const_cast<float*>(ref_rgb), {1, r, r, 3}, torch::kFloat)
                         .permute({0, 3, 1, 2})
                         .contiguous() *
                         2.0 -
                     1.0;
    const double d_az = deg2rad(d_azimuth);
    const RelativePose rel{deg2rad(d_elevation), std::sin(d_az), std::cos(d_az), d_radius};
    const auto z_class = model->encoder.encode(ref).z_class;
    const auto pose = nets::pose_vector(rel).to(torch::kFloat).unsqueeze(0);
    const auto cond = model->model->embed(z_class, pose);
    const diffusion::DenoiseFn fn = [&](const torch::Tensor& x, const torch::Tensor& c, int t) {
      return model->model->forward(x, c, t);
    };
    const auto x0 = diffusion::sample(fn, cond, diffusion::strided_plan(T, steps), model->sched, seed, {1, 3, r, r},
                                      torch::kFloat, train::sampler_options(model->rec.config.model));
    const auto img = ((x0[0] + 1.0) * 0.5).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
    std::memcpy(out_rgb, img.data_ptr<float>(), sizeof(float) * static_cast<size_t>(img.numel()));
  });
}

void ctrlloop_model_free(ctrlloop_model* model) { delete model; }

}  // extern "C"
