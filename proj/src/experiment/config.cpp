#include "ctrlloop/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "ctrlloop/error.hpp"

using nlohmann::json;

namespace ctrlloop {

namespace {

/// Reads fields from one JSON object, remembering which keys were consumed
/// so the rest can be rejected as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + name() + "' must be an object");
  }
  ~Section() = default;

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError("config: field '" + field(key) + "' has the wrong type");
    }
  }
  void read(const char* key, std::optional<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (v.is_null()) {
      out.reset();
    } else if (v.is_number()) {
      out = v.get<double>();
    } else {
      throw ValidationError("config: field '" + field(key) + "' must be a number or null");
    }
  }
  Section child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }
  bool has(const char* key) const { return j_.contains(key); }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError("config: unknown key '" + field(k.c_str()) + "'");
  }
  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string name() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ValidationError("config: field '" + field + "' " + what);
}

void read_model(Section s, train::ModelConfig& m) {
  {
    auto a = s.child("arch");
    a.read("image_channels", m.arch.image_channels);
    a.read("base_width", m.arch.base_width);
    a.read("channel_mults", m.arch.channel_mults);
    a.read("res_blocks", m.arch.res_blocks);
    a.read("time_dim", m.arch.time_dim);
    a.read("cond_dim", m.arch.cond_dim);
    a.read("init_seed", m.arch.init_seed);
    a.finish();
  }
  {
    auto e = s.child("encoder");
    e.read("seed", m.encoder.seed);
    e.read("hidden", m.encoder.hidden);
    e.read("patch_dim", m.encoder.patch_dim);
    e.read("class_dim", m.encoder.class_dim);
    e.read("patch_size", m.encoder.patch_size);
    e.finish();
  }
  s.read("timesteps", m.timesteps);
  s.read("beta_start", m.beta_start);
  s.read("beta_end", m.beta_end);
  s.read("clip_x0", m.clip_x0);
  s.finish();
  m.arch.class_dim = m.encoder.class_dim;
  m.encoder.in_channels = m.arch.image_channels;
}

void read_train(Section s, train::TrainConfig& t) {
  std::string loss_mode = train::to_string(t.loss_mode), strategy = train::to_string(t.strategy);
  s.read("rounds", t.rounds);
  s.read("m_cl", t.m_cl);
  s.read("n_sm", t.n_sm);
  s.read("cl_denoise_steps", t.cl_denoise_steps);
  s.read("lr_cl", t.lr_cl);
  s.read("lr_sm", t.lr_sm);
  s.read("adam_beta1", t.adam_beta1);
  s.read("adam_beta2", t.adam_beta2);
  s.read("batch_sm", t.batch_sm);
  s.read("batch_cl", t.batch_cl);
  s.read("grad_accum_sm", t.grad_accum_sm);
  s.read("grad_accum_cl", t.grad_accum_cl);
  s.read("loss_mode", loss_mode);
  s.read("strategy", strategy);
  s.read("lambda_simul", t.lambda_simul);
  s.read("warmstart_steps", t.warmstart_steps);
  s.read("lr_warmstart", t.lr_warmstart);
  s.read("seed", t.seed);
  s.finish();
  try {
    t.loss_mode = train::parse_loss_mode(loss_mode);
    t.strategy = train::parse_strategy(strategy);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config: field '") + (s.has("loss_mode") ? "train.loss_mode" : "train.strategy") +
                          "': " + e.what());
  }
}

}  // namespace

json to_json(const train::ModelConfig& m) {
  return json{{"arch",
               {{"image_channels", m.arch.image_channels},
                {"base_width", m.arch.base_width},
                {"channel_mults", m.arch.channel_mults},
                {"res_blocks", m.arch.res_blocks},
                {"time_dim", m.arch.time_dim},
                {"cond_dim", m.arch.cond_dim},
                {"init_seed", m.arch.init_seed}}},
              {"encoder",
               {{"seed", m.encoder.seed},
                {"hidden", m.encoder.hidden},
                {"patch_dim", m.encoder.patch_dim},
                {"class_dim", m.encoder.class_dim},
                {"patch_size", m.encoder.patch_size}}},
              {"timesteps", m.timesteps},
              {"beta_start", m.beta_start},
              {"beta_end", m.beta_end},
              {"clip_x0", m.clip_x0}};
}

json to_json(const train::TrainConfig& t) {
  return json{{"rounds", t.rounds},
              {"m_cl", t.m_cl},
              {"n_sm", t.n_sm},
              {"cl_denoise_steps", t.cl_denoise_steps},
              {"lr_cl", t.lr_cl},
              {"lr_sm", t.lr_sm},
              {"adam_beta1", t.adam_beta1},
              {"adam_beta2", t.adam_beta2},
              {"batch_sm", t.batch_sm},
              {"batch_cl", t.batch_cl},
              {"grad_accum_sm", t.grad_accum_sm},
              {"grad_accum_cl", t.grad_accum_cl},
              {"loss_mode", train::to_string(t.loss_mode)},
              {"strategy", train::to_string(t.strategy)},
              {"lambda_simul", t.lambda_simul},
              {"warmstart_steps", t.warmstart_steps},
              {"lr_warmstart", t.lr_warmstart},
              {"seed", t.seed}};
}

json to_json(const ExperimentConfig& c) {
  const auto& g = c.eval.pose_grid;
  json grid{{"azimuth_step_deg", g.azimuth_step_deg},
            {"elevation_min_deg", g.elevation_min_deg},
            {"elevation_max_deg", g.elevation_max_deg},
            {"elevation_step_deg", g.elevation_step_deg},
            {"radius", g.radius ? json(*g.radius) : json(nullptr)}};
  return json{{"dataset",
               {{"n_objects", c.dataset.n_objects},
                {"n_views", c.dataset.n_views},
                {"resolution", c.dataset.resolution},
                {"seed", c.dataset.seed}}},
              {"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"eval",
               {{"denoise_steps", c.eval.denoise_steps},
                {"seeds", c.eval.seeds},
                {"batch", c.eval.batch},
                {"pose_grid", grid},
                {"aa_thresholds_deg", c.eval.aa_thresholds_deg},
                {"iou_thresholds", c.eval.iou_thresholds},
                {"mask_tau", c.eval.mask_tau}}},
              {"ablate",
               {{"cl_denoise_steps", c.ablate.cl_denoise_steps},
                {"loss_modes", c.ablate.loss_modes},
                {"strategies", c.ablate.strategies},
                {"seeds", c.ablate.seeds}}}};
}

train::ModelConfig model_from_json(const json& j) {
  train::ModelConfig m;
  read_model(Section(j, "model"), m);
  return m;
}

train::TrainConfig train_from_json(const json& j) {
  train::TrainConfig t;
  read_train(Section(j, "train"), t);
  return t;
}

namespace {

ExperimentConfig parse_experiment(const json& j) {
  ExperimentConfig c;
  Section root(j, "");
  {
    auto d = root.child("dataset");
    d.read("n_objects", c.dataset.n_objects);
    d.read("n_views", c.dataset.n_views);
    d.read("resolution", c.dataset.resolution);
    d.read("seed", c.dataset.seed);
    d.finish();
  }
  read_model(root.child("model"), c.model);
  read_train(root.child("train"), c.train);
  {
    auto e = root.child("eval");
    e.read("denoise_steps", c.eval.denoise_steps);
    e.read("seeds", c.eval.seeds);
    e.read("batch", c.eval.batch);
    {
      auto g = e.child("pose_grid");
      g.read("azimuth_step_deg", c.eval.pose_grid.azimuth_step_deg);
      g.read("elevation_min_deg", c.eval.pose_grid.elevation_min_deg);
      g.read("elevation_max_deg", c.eval.pose_grid.elevation_max_deg);
      g.read("elevation_step_deg", c.eval.pose_grid.elevation_step_deg);
      g.read("radius", c.eval.pose_grid.radius);
      g.finish();
    }
    e.read("aa_thresholds_deg", c.eval.aa_thresholds_deg);
    e.read("iou_thresholds", c.eval.iou_thresholds);
    e.read("mask_tau", c.eval.mask_tau);
    e.finish();
  }
  {
    auto a = root.child("ablate");
    a.read("cl_denoise_steps", c.ablate.cl_denoise_steps);
    a.read("loss_modes", c.ablate.loss_modes);
    a.read("strategies", c.ablate.strategies);
    a.read("seeds", c.ablate.seeds);
    a.finish();
  }
  root.finish();
  return c;
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j) {
  auto c = parse_experiment(j);
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  check(dataset.n_objects >= 1, "dataset.n_objects", "must be >= 1");
  check(dataset.n_views >= 2, "dataset.n_views", "must be >= 2");
  check(dataset.resolution == 16 || dataset.resolution == 32 || dataset.resolution == 64, "dataset.resolution",
        "must be one of 16, 32, 64");
  check(model.timesteps >= 1, "model.timesteps", "must be >= 1");
  check(model.beta_start > 0.0 && model.beta_start <= model.beta_end && model.beta_end < 1.0, "model.beta_start",
        "and model.beta_end must satisfy 0 < start <= end < 1");
  check(!model.arch.channel_mults.empty(), "model.arch.channel_mults", "must not be empty");
  for (int m : model.arch.channel_mults) check(m >= 1, "model.arch.channel_mults", "entries must be >= 1");
  check(model.arch.base_width >= 1, "model.arch.base_width", "must be >= 1");
  check(model.arch.res_blocks >= 1, "model.arch.res_blocks", "must be >= 1");
  check(model.arch.time_dim >= 2, "model.arch.time_dim", "must be >= 2");
  check(model.arch.cond_dim >= 1, "model.arch.cond_dim", "must be >= 1");
  check(model.arch.image_channels == 3, "model.arch.image_channels", "must be 3 for rendered datasets");
  check(model.encoder.patch_size >= 1 && dataset.resolution % model.encoder.patch_size == 0, "model.encoder.patch_size",
        "must divide dataset.resolution");
  check(model.encoder.class_dim >= 1 && model.encoder.class_dim <= model.encoder.patch_dim, "model.encoder.class_dim",
        "must lie in [1, patch_dim]");
  check(model.encoder.hidden >= 1, "model.encoder.hidden", "must be >= 1");
  const int levels = static_cast<int>(model.arch.channel_mults.size());
  check(dataset.resolution % (1 << (levels - 1)) == 0, "model.arch.channel_mults",
        "has too many levels for dataset.resolution");
  try {
    train.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  check(train.cl_denoise_steps <= model.timesteps, "train.cl_denoise_steps", "must be <= model.timesteps");
  check(eval.denoise_steps >= 1 && eval.denoise_steps <= model.timesteps, "eval.denoise_steps",
        "must lie in [1, model.timesteps]");
  check(!eval.seeds.empty(), "eval.seeds", "must not be empty");
  check(eval.batch >= 1, "eval.batch", "must be >= 1");
  const auto& g = eval.pose_grid;
  check(g.azimuth_step_deg > 0.0, "eval.pose_grid.azimuth_step_deg", "must be > 0");
  check(g.elevation_step_deg > 0.0, "eval.pose_grid.elevation_step_deg", "must be > 0");
  check(g.elevation_min_deg <= g.elevation_max_deg && g.elevation_min_deg >= -90.0 && g.elevation_max_deg <= 90.0,
        "eval.pose_grid.elevation_min_deg", "and elevation_max_deg must satisfy -90 <= min <= max <= 90");
  check(!g.radius || *g.radius > 0.0, "eval.pose_grid.radius", "must be > 0 or null");
  for (double t : eval.aa_thresholds_deg) check(t > 0.0, "eval.aa_thresholds_deg", "entries must be > 0");
  for (double t : eval.iou_thresholds) check(t >= 0.0 && t <= 1.0, "eval.iou_thresholds", "entries must lie in [0, 1]");
  check(eval.mask_tau > 0.0 && eval.mask_tau < 1.0, "eval.mask_tau", "must lie in (0, 1)");
  for (int k : ablate.cl_denoise_steps)
    check(k >= 1 && k <= model.timesteps, "ablate.cl_denoise_steps", "entries must lie in [1, model.timesteps]");
  for (const auto& m : ablate.loss_modes) {
    try {
      train::parse_loss_mode(m);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("config: field 'ablate.loss_modes': ") + e.what());
    }
  }
  for (const auto& s : ablate.strategies)
    check(s == "alternating" || s == "simultaneous", "ablate.strategies",
          "entries must be 'alternating' or 'simultaneous'");
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config: " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

void save_experiment(const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write config: " + path.string());
  f << to_json(c).dump(2) << '\n';
}

ExperimentConfig apply_override(const ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json j = to_json(c);
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      throw ValidationError("config: unknown key '" + key + "' in --set");
    node = &(*node)[parts[i]];
  }
  *node = value;
  return parse_experiment(j);
}

}  // namespace ctrlloop
