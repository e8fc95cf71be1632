#include "ctrlloop/checkpoint.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <regex>

#include "ctrlloop/error.hpp"
#include "ctrlloop/strutil.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctrlloop {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'T', 'R', 'L', 'C', 'K', 'P', '1'};

NamedArray to_array(const std::string& name, const torch::Tensor& t) {
  const auto f = t.detach().to(torch::kFloat).contiguous();
  NamedArray a{name, f.sizes().vec(), {}};
  a.values.assign(f.data_ptr<float>(), f.data_ptr<float>() + f.numel());
  return a;
}

void copy_into(torch::Tensor& dst, const NamedArray& a) {
  if (dst.sizes().vec() != a.shape) throw ValidationError("checkpoint: shape mismatch for array '" + a.name + "'");
  auto src = torch::from_blob(const_cast<float*>(a.values.data()), a.shape, torch::kFloat);
  torch::NoGradGuard g;
  dst.copy_(src.to(dst.scalar_type()));
}

torch::Tensor as_tensor(const NamedArray& a, torch::ScalarType dtype) {
  return torch::from_blob(const_cast<float*>(a.values.data()), a.shape, torch::kFloat).to(dtype).clone();
}

json optimizer_state(torch::optim::Adam& opt, const std::string& prefix,
                     const std::vector<std::pair<std::string, torch::Tensor>>& params, std::vector<NamedArray>& out) {
  json steps = json::object();
  auto& state = opt.state();
  for (const auto& [name, p] : params) {
    auto it = state.find(p.unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
    steps[name] = s.step();
    out.push_back(to_array(prefix + "/" + name + "/exp_avg", s.exp_avg()));
    out.push_back(to_array(prefix + "/" + name + "/exp_avg_sq", s.exp_avg_sq()));
  }
  return steps;
}

void restore_optimizer(torch::optim::Adam& opt, const std::string& prefix, const json& steps,
                       const std::vector<std::pair<std::string, torch::Tensor>>& params, const CheckpointRecord& rec) {
  auto& state = opt.state();
  state.clear();
  for (const auto& [name, p] : params) {
    if (!steps.contains(name)) continue;
    const auto* m = rec.find(prefix + "/" + name + "/exp_avg");
    const auto* v = rec.find(prefix + "/" + name + "/exp_avg_sq");
    if (!m || !v) throw ValidationError("checkpoint: missing optimizer moments for '" + name + "'");
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(steps.at(name).get<std::int64_t>());
    s->exp_avg(as_tensor(*m, p.scalar_type()));
    s->exp_avg_sq(as_tensor(*v, p.scalar_type()));
    state[p.unsafeGetTensorImpl()] = std::move(s);
  }
}

std::vector<std::pair<std::string, torch::Tensor>> named_params(nets::ConditionalDenoiser& model) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : model->named_parameters()) out.emplace_back(item.key(), item.value());
  return out;
}

}  // namespace

const NamedArray* CheckpointRecord::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

void save_checkpoint(const CheckpointRecord& rec, const fs::path& path) {
  json header{{"format", "ctrlloop-checkpoint"},
              {"format_version", 1},
              {"label", rec.label},
              {"round", rec.round},
              {"global_step", rec.global_step},
              {"config", to_json(rec.config)},
              {"schedule", {{"beta", rec.betas}}},
              {"rng", rec.rng},
              {"optimizer", rec.optimizer},
              {"data", rec.data},
              {"dtype", "float32"},
              {"byte_order", "little"}};
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& a : rec.arrays) {
    dir.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
    offset += a.values.size() * sizeof(float);
  }
  header["arrays"] = dir;
  const std::string text = header.dump();

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint: " + path.string());
    const std::uint64_t len = text.size();
    f.write(kMagic, sizeof kMagic);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : rec.arrays)
      f.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    if (!f) throw IoError("failed writing checkpoint: " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string());
}

CheckpointRecord load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  f.read(magic, sizeof magic);
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("corrupt checkpoint (bad magic): " + path.string());
  if (len > (std::uint64_t{1} << 30)) throw IoError("corrupt checkpoint (header length): " + path.string());
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  if (!f) throw IoError("corrupt checkpoint (truncated header): " + path.string());
  const auto data_start = static_cast<std::uint64_t>(f.tellg());
  f.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(f.tellg());

  CheckpointRecord rec;
  try {
    const json h = json::parse(text);
    if (h.at("format") != "ctrlloop-checkpoint") throw IoError("not a ctrlloop checkpoint: " + path.string());
    rec.label = h.at("label");
    rec.round = h.at("round");
    rec.global_step = h.at("global_step");
    rec.config = experiment_from_json(h.at("config"));
    rec.betas = h.at("schedule").at("beta").get<std::vector<double>>();
    rec.rng = h.at("rng");
    rec.optimizer = h.at("optimizer");
    rec.data = h.at("data");
    for (const auto& a : h.at("arrays")) {
      NamedArray arr{a.at("name"), a.at("shape").get<std::vector<std::int64_t>>(), {}};
      const auto count = a.at("count").get<std::uint64_t>();
      const auto offset = a.at("offset").get<std::uint64_t>();
      std::int64_t expect = 1;
      for (auto d : arr.shape) expect *= d;
      if (static_cast<std::uint64_t>(expect) != count || data_start + offset + count * sizeof(float) > file_size)
        throw IoError("corrupt checkpoint (array '" + arr.name + "'): " + path.string());
      arr.values.resize(count);
      f.seekg(static_cast<std::streamoff>(data_start + offset));
      f.read(reinterpret_cast<char*>(arr.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
      if (!f) throw IoError("corrupt checkpoint (truncated array '" + arr.name + "'): " + path.string());
      rec.arrays.push_back(std::move(arr));
    }
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  return rec;
}

json dataset_identity(const DatasetManifest& m) {
  return json{{"seed", m.seed},
              {"version", m.version},
              {"resolution", m.resolution},
              {"n_objects", m.objects.size()},
              {"n_views", m.objects.empty() ? 0 : m.objects.front().views.size()}};
}

CheckpointRecord capture(train::Trainer& trainer, const ExperimentConfig& cfg, const std::string& label,
                         const json& data_identity) {
  CheckpointRecord rec;
  rec.label = label;
  rec.round = trainer.round();
  rec.global_step = trainer.global_step();
  rec.config = cfg;
  rec.betas = trainer.schedule().beta;
  rec.rng = json{{"base_seed", trainer.config().seed}, {"next_step", trainer.global_step()}};
  rec.data = data_identity;
  const auto params = named_params(trainer.model());
  for (const auto& [name, p] : params) rec.arrays.push_back(to_array("model/" + name, p));
  rec.optimizer = json{{"sm", optimizer_state(trainer.sm_optimizer(), "opt_sm", params, rec.arrays)},
                       {"cl", optimizer_state(trainer.cl_optimizer(), "opt_cl", params, rec.arrays)}};
  return rec;
}

void load_parameters(nets::ConditionalDenoiser& model, const CheckpointRecord& rec) {
  for (auto& [name, p] : named_params(model)) {
    const auto* a = rec.find("model/" + name);
    if (!a) throw ValidationError("checkpoint: missing parameter '" + name + "' (architecture mismatch?)");
    copy_into(p, *a);
  }
}

void restore(train::Trainer& trainer, const CheckpointRecord& rec) {
  if (!(rec.config.model == trainer.model_config()))
    throw ValidationError("checkpoint: model config differs from the trainer's");
  load_parameters(trainer.model(), rec);
  const auto params = named_params(trainer.model());
  restore_optimizer(trainer.sm_optimizer(), "opt_sm", rec.optimizer.at("sm"), params, rec);
  restore_optimizer(trainer.cl_optimizer(), "opt_cl", rec.optimizer.at("cl"), params, rec);
  trainer.set_progress(rec.global_step, rec.round);
}

std::string checkpoint_name(int round) { return strprintf("ckpt_round%03d.ckpt", round); }

std::vector<fs::path> list_checkpoints(const fs::path& dir) {
  std::vector<std::pair<int, fs::path>> found;
  if (!fs::is_directory(dir)) return {};
  static const std::regex pattern(R"(ckpt_round(\d+)\.ckpt)");
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = e.path().filename().string();
    if (std::regex_match(name, m, pattern)) found.emplace_back(std::stoi(m[1]), e.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [r, p] : found) out.push_back(p);
  return out;
}

}  // namespace ctrlloop
