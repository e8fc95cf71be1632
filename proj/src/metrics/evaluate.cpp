#include "ctrlloop/evaluate.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <fstream>
#include <mutex>
#include <tuple>

#include "ctrlloop/error.hpp"
#include "ctrlloop/metrics.hpp"
#include "ctrlloop/rng.hpp"
#include "ctrlloop/strutil.hpp"
#include "ctrlloop/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctrlloop::metrics {

namespace {

std::string threshold_key(double t) { return strprintf("%g", t); }

Image to_image(const torch::Tensor& chw) {
  const auto t = ((chw.detach().to(torch::kFloat) + 1.0) * 0.5).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
  Image img(static_cast<int>(t.size(1)), static_cast<int>(t.size(0)), static_cast<int>(t.size(2)));
  std::copy(t.data_ptr<float>(), t.data_ptr<float>() + t.numel(), img.data.begin());
  return img;
}

torch::Tensor to_model_tensor(const Image& img) {
  return torch::from_blob(const_cast<float*>(img.data.data()), {img.height, img.width, img.channels}, torch::kFloat)
             .permute({2, 0, 1})
             .clone() *
             2.0 -
         1.0;
}

Eigen::MatrixXd class_features(const std::vector<Image>& images, const nets::FrozenEncoder& encoder) {
  std::vector<torch::Tensor> ts;
  ts.reserve(images.size());
  for (const auto& i : images) ts.push_back(to_model_tensor(i));
  torch::NoGradGuard g;
  const auto z = encoder.encode(torch::stack(ts).to(torch::kDouble)).z_class.contiguous();
  Eigen::MatrixXd out(z.size(0), z.size(1));
  const auto acc = z.accessor<double, 2>();
  for (std::int64_t i = 0; i < z.size(0); ++i)
    for (std::int64_t j = 0; j < z.size(1); ++j) out(i, j) = acc[i][j];
  return out;
}

/// Grid renders are the expensive part of the pose oracle; share them across evaluations.
const PoseOracle& cached_oracle(std::uint64_t object_seed, const PoseGridSpec& grid, double radius, int resolution) {
  using Key = std::tuple<std::uint64_t, double, double, double, double, double, int>;
  static std::mutex mu;
  static std::map<Key, std::unique_ptr<PoseOracle>> cache;
  const Key key{object_seed,         grid.azimuth_step_deg,  grid.elevation_min_deg, grid.elevation_max_deg,
                grid.elevation_step_deg, radius, resolution};
  std::lock_guard lock(mu);
  auto& slot = cache[key];
  if (!slot) slot = std::make_unique<PoseOracle>(make_scene(object_seed), grid, radius, resolution);
  return *slot;
}

}  // namespace

double MetricsReport::aa_at_threshold(double deg) const {
  for (const auto& [t, v] : aa)
    if (t == deg) return v;
  throw ValidationError(strprintf("report has no AA at %g degrees", deg));
}

double MetricsReport::iou_at_threshold(double thr) const {
  for (const auto& [t, v] : iou)
    if (t == thr) return v;
  throw ValidationError(strprintf("report has no IoU fraction at %g", thr));
}

std::vector<EvalPair> eval_pairs(const DatasetManifest& m) {
  std::vector<EvalPair> pairs;
  for (std::size_t o = 0; o < m.objects.size(); ++o) {
    const int n = static_cast<int>(m.objects[o].views.size());
    for (int v = 0; v < n; ++v) pairs.push_back({static_cast<int>(o), (v + 1) % n, v});
  }
  return pairs;
}

std::uint64_t generation_seed(std::uint64_t eval_seed, const EvalPair& p) {
  return derive_seed({eval_seed, static_cast<std::uint64_t>(p.object_id), static_cast<std::uint64_t>(p.tg_view)});
}

MetricsReport score(const DatasetManifest& m, const std::vector<EvalPair>& pairs,
                    const std::vector<std::uint64_t>& seeds, const std::vector<Image>& generated,
                    const EvalConfig& cfg, const nets::FrozenEncoder& encoder) {
  if (generated.size() != pairs.size() * seeds.size())
    throw ValidationError("score: expected one generated image per (seed, pair)");
  if (pairs.empty()) throw ValidationError("score: no evaluation pairs");
  const double radius = cfg.pose_grid.radius.value_or(kNominalRadius);

  MetricsReport r;
  std::vector<Image> real;
  for (const auto& p : pairs) real.push_back(load_view(m, p.object_id, p.tg_view).rgb);

  std::vector<double> angles, ious;
  std::size_t k = 0;
  for (auto seed : seeds) {
    double seed_psnr = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i, ++k) {
      const auto& p = pairs[i];
      const auto gt = load_view(m, p.object_id, p.tg_view);
      const auto& gen = generated[k];
      SampleRecord s;
      s.object_id = p.object_id;
      s.view_id = p.tg_view;
      s.ref_view_id = p.ref_view;
      s.seed = seed;
      s.psnr = psnr(gen, gt.rgb);
      s.iou = iou(extract_mask(gen, {1.0f, 1.0f, 1.0f}, cfg.mask_tau), gt.alpha);
      const auto& oracle = cached_oracle(m.objects[p.object_id].object_seed, cfg.pose_grid, radius, m.resolution);
      s.angle_diff_deg = angle_diff(oracle.estimate(gen).pose, m.objects[p.object_id].views[p.tg_view].pose);
      seed_psnr += s.psnr;
      r.records.push_back(s);
    }
    r.psnr_by_seed[seed] = seed_psnr / static_cast<double>(pairs.size());
  }
  std::sort(r.records.begin(), r.records.end(), [](const SampleRecord& a, const SampleRecord& b) {
    return std::tie(a.seed, a.object_id, a.view_id) < std::tie(b.seed, b.object_id, b.view_id);
  });
  double psnr_sum = 0.0, angle_sum = 0.0;
  for (const auto& s : r.records) {
    psnr_sum += s.psnr;
    angle_sum += s.angle_diff_deg;
    angles.push_back(s.angle_diff_deg);
    ious.push_back(s.iou);
  }
  const auto n = static_cast<double>(r.records.size());
  r.psnr = psnr_sum / n;
  r.mean_angle_diff_deg = angle_sum / n;
  for (double t : cfg.aa_thresholds_deg) r.aa.emplace_back(t, aa_at(angles, t));
  for (double t : cfg.iou_thresholds) r.iou.emplace_back(t, fraction_at_least(ious, t));
  r.kid = kid(class_features(generated, encoder), class_features(real, encoder));
  return r;
}

std::vector<Image> generate(const CheckpointRecord& rec, const DatasetManifest& m, const std::vector<EvalPair>& pairs,
                            const EvalConfig& cfg) {
  const auto& mc = rec.config.model;
  if (m.resolution % (1 << (static_cast<int>(mc.arch.channel_mults.size()) - 1)) != 0 ||
      m.resolution % mc.encoder.patch_size != 0)
    throw ValidationError("checkpoint architecture does not fit the dataset resolution");
  nets::FrozenEncoder encoder(mc.encoder);
  auto model = nets::make_denoiser(mc.arch, torch::kFloat);
  load_parameters(model, rec);
  model->eval();
  const auto sched = diffusion::schedule_from_betas(rec.betas);
  if (cfg.denoise_steps > sched.steps()) throw ValidationError("eval.denoise_steps exceeds the checkpoint's schedule");
  const auto plan = diffusion::strided_plan(sched.steps(), cfg.denoise_steps);

  torch::NoGradGuard no_grad;
  const auto data = train::TrainingData::from_manifest(m, encoder, torch::kFloat);
  std::vector<int> base;  // global view index of each object's first view
  int acc = 0;
  for (const auto& o : m.objects) {
    base.push_back(acc);
    acc += static_cast<int>(o.views.size());
  }
  const diffusion::DenoiseFn fn = [&model](const torch::Tensor& x, const torch::Tensor& c, int t) {
    return model->forward(x, c, t);
  };
  const std::vector<std::int64_t> item_shape{mc.arch.image_channels, m.resolution, m.resolution};
  const auto opts = train::sampler_options(mc);

  std::vector<Image> out;
  out.reserve(pairs.size() * cfg.seeds.size());
  for (auto seed : cfg.seeds) {
    for (std::size_t b = 0; b < pairs.size(); b += cfg.batch) {
      const auto e = std::min(pairs.size(), b + static_cast<std::size_t>(cfg.batch));
      std::vector<std::pair<int, int>> idx;
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = b; i < e; ++i) {
        idx.emplace_back(base[pairs[i].object_id] + pairs[i].ref_view, base[pairs[i].object_id] + pairs[i].tg_view);
        seeds.push_back(generation_seed(seed, pairs[i]));
      }
      const auto batch = train::make_batch(data, idx, seeds);
      const auto cond = model->embed(batch.ref_class, batch.pose);
      const auto x_init = diffusion::gaussian_batch(seeds, item_shape, torch::kFloat);
      const auto x0 = diffusion::sample_from(fn, cond, plan, sched, x_init, opts);
      for (std::int64_t i = 0; i < x0.size(0); ++i) out.push_back(to_image(x0[i]));
    }
  }
  return out;
}

MetricsReport evaluate(const CheckpointRecord& rec, const DatasetManifest& m, const EvalConfig& cfg) {
  if (rec.data.contains("resolution") && rec.data.at("resolution").get<int>() != m.resolution)
    throw ValidationError("checkpoint/manifest mismatch: trained at a different resolution");
  const auto pairs = eval_pairs(m);
  const auto images = generate(rec, m, pairs, cfg);
  const nets::FrozenEncoder encoder(rec.config.model.encoder);
  auto r = score(m, pairs, cfg.seeds, images, cfg, encoder);
  r.label = rec.label;
  r.round = rec.round;
  r.global_step = rec.global_step;
  const bool same_data = rec.data.value("seed", std::uint64_t{0}) == m.seed &&
                         rec.data.value("n_objects", std::size_t{0}) == m.objects.size();
  r.split = same_data ? "train" : "heldout";
  return r;
}

json to_json(const MetricsReport& r) {
  json aa = json::object(), io = json::object(), by_seed = json::object();
  for (const auto& [t, v] : r.aa) aa[threshold_key(t)] = v;
  for (const auto& [t, v] : r.iou) io[threshold_key(t)] = v;
  for (const auto& [s, v] : r.psnr_by_seed) by_seed[std::to_string(s)] = v;
  return json{{"label", r.label},
              {"split", r.split},
              {"round", r.round},
              {"global_step", r.global_step},
              {"psnr", r.psnr},
              {"kid", r.kid},
              {"kid_feature_space", kFeatureSpace},
              {"angle_convention", kAngleConvention},
              {"mean_angle_diff_deg", r.mean_angle_diff_deg},
              {"aa", aa},
              {"iou", io},
              {"psnr_by_seed", by_seed},
              {"n_samples", r.records.size()}};
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  try {
    r.label = j.at("label");
    r.split = j.at("split");
    r.round = j.at("round");
    r.global_step = j.at("global_step");
    r.psnr = j.at("psnr");
    r.kid = j.at("kid");
    r.mean_angle_diff_deg = j.at("mean_angle_diff_deg");
    for (const auto& [k, v] : j.at("aa").items()) r.aa.emplace_back(std::stod(k), v.get<double>());
    for (const auto& [k, v] : j.at("iou").items()) r.iou.emplace_back(std::stod(k), v.get<double>());
    for (const auto& [k, v] : j.at("psnr_by_seed").items()) r.psnr_by_seed[std::stoull(k)] = v.get<double>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed aggregate report: ") + e.what());
  }
  std::sort(r.aa.begin(), r.aa.end());
  std::sort(r.iou.begin(), r.iou.end());
  return r;
}

std::string markdown_header() {
  return "| Run | Split | KID | PSNR | AA@15° | IoU@0.7 |\n|---|---|---|---|---|---|\n";
}

std::string markdown_row(const std::string& name, const MetricsReport& r) {
  auto pct = [](double v) { return strprintf("%.2f%%", 100.0 * v); };
  std::string aa15 = "n/a", iou07 = "n/a";
  for (const auto& [t, v] : r.aa)
    if (t == 15.0) aa15 = pct(v);
  for (const auto& [t, v] : r.iou)
    if (t == 0.7) iou07 = pct(v);
  return strprintf("| %s | %s | %.4f | %.4f | %s | %s |\n", name.c_str(), r.split.c_str(), r.kid, r.psnr,
                   aa15.c_str(), iou07.c_str());
}

void write_report(const MetricsReport& r, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory: " + dir.string());
  {
    std::ofstream f(dir / "samples.jsonl", std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / "samples.jsonl").string());
    for (const auto& s : r.records)
      f << json{{"object_id", s.object_id}, {"view_id", s.view_id},          {"ref_view_id", s.ref_view_id},
                {"psnr", s.psnr},           {"angle_diff_deg", s.angle_diff_deg}, {"iou", s.iou},
                {"seed", s.seed}}
               .dump()
        << '\n';
  }
  {
    std::ofstream f(dir / "aggregate.json", std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / "aggregate.json").string());
    f << to_json(r).dump(2) << '\n';
  }
  {
    std::ofstream f(dir / "report.md", std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / "report.md").string());
    f << markdown_header() << markdown_row(r.label, r);
    f << "\nAA at all thresholds:";
    for (const auto& [t, v] : r.aa) f << strprintf(" %g°=%.2f%%", t, 100.0 * v);
    f << "\n\nKID features: " << kFeatureSpace << ". Angles: " << kAngleConvention << ".\n";
  }
}

}  // namespace ctrlloop::metrics
