#include <doctest.h>

#include <functional>

#include "ctrlloop/config.hpp"
#include "ctrlloop/error.hpp"
#include "test_util.hpp"

using namespace ctrlloop;
using nlohmann::json;

namespace {

std::string validation_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults validate and survive a json round trip") {
    ExperimentConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(experiment_from_json(to_json(c)) == c);
    CHECK(c.train.rounds == 2);
    CHECK(c.train.m_cl == 500);
    CHECK(c.train.n_sm == 1500);
    CHECK(c.train.cl_denoise_steps == 10);
    CHECK(c.model.timesteps == 100);
  }

  TEST_CASE("non-default values round trip through a file") {
    ExperimentConfig c;
    c.dataset.resolution = 16;
    c.train.loss_mode = train::LossMode::Pixel;
    c.train.strategy = train::Strategy::Simultaneous;
    c.eval.pose_grid.radius = 2.5;
    c.ablate.cl_denoise_steps = {5, 10};
    c.ablate.loss_modes = {"pixel", "patch_feature"};
    c.model.clip_x0 = false;
    testutil::TempDir dir;
    save_experiment(c, dir / "c.json");
    CHECK(load_experiment(dir / "c.json") == c);
  }

  TEST_CASE("missing keys take defaults") {
    const auto c = experiment_from_json(json{{"train", {{"rounds", 3}}}});
    CHECK(c.train.rounds == 3);
    CHECK(c.train.n_sm == ExperimentConfig{}.train.n_sm);
  }

  TEST_CASE("unknown keys and wrong types are rejected with the field name") {
    CHECK(validation_message([] { experiment_from_json(json{{"train", {{"roundz", 3}}}}); }).find("train.roundz") !=
          std::string::npos);
    CHECK(validation_message([] { experiment_from_json(json{{"bogus", 1}}); }).find("bogus") != std::string::npos);
    CHECK(validation_message([] { experiment_from_json(json{{"train", {{"rounds", "two"}}}}); })
              .find("train.rounds") != std::string::npos);
    CHECK(validation_message([] { experiment_from_json(json{{"train", {{"loss_mode", "patch"}}}}); })
              .find("train.loss_mode") != std::string::npos);
  }

  TEST_CASE("resolution must be one of the supported sizes") {
    const auto msg = validation_message([] { experiment_from_json(json{{"dataset", {{"resolution", 17}}}}); });
    CHECK(msg.find("dataset.resolution") != std::string::npos);
  }

  TEST_CASE("dotted overrides") {
    ExperimentConfig c;
    c = apply_override(c, "train.rounds=4");
    c = apply_override(c, "train.loss_mode=pixel");
    c = apply_override(c, "eval.seeds=[1,2,3]");
    c = apply_override(c, "model.arch.channel_mults=[1,2]");
    c = apply_override(c, "eval.pose_grid.radius=2.4");
    CHECK(c.train.rounds == 4);
    CHECK(c.train.loss_mode == train::LossMode::Pixel);
    CHECK((c.eval.seeds == std::vector<std::uint64_t>{1, 2, 3}));
    CHECK((c.model.arch.channel_mults == std::vector<int>{1, 2}));
    CHECK(c.eval.pose_grid.radius == 2.4);
    CHECK_THROWS_AS(apply_override(c, "train.nope=1"), ValidationError);
    CHECK_THROWS_AS(apply_override(c, "train.rounds"), ValidationError);
    CHECK_THROWS_AS(apply_override(c, "train.rounds=\"x\""), ValidationError);
    CHECK_THROWS_AS(apply_override(c, "dataset.resolution=17").validate(), ValidationError);
    CHECK_THROWS_AS(apply_override(c, "train.rounds=-1").validate(), ValidationError);
  }

  TEST_CASE("cross-field checks run once all overrides are applied") {
    CHECK_THROWS_AS(apply_override(ExperimentConfig{}, "model.encoder.class_dim=64").validate(), ValidationError);
    CHECK_THROWS_AS(apply_override(ExperimentConfig{}, "model.encoder.patch_size=5").validate(), ValidationError);
    CHECK_THROWS_AS(apply_override(ExperimentConfig{}, "train.grad_accum_sm=3").validate(), ValidationError);
    auto c = apply_override(ExperimentConfig{}, "model.encoder.class_dim=8");
    CHECK_NOTHROW(c.validate());
    CHECK(c.model.arch.class_dim == 8);
  }

  TEST_CASE("malformed files") {
    testutil::TempDir dir;
    {
      std::ofstream f(dir / "bad.json");
      f << "{ not json";
    }
    CHECK_THROWS_AS(load_experiment(dir / "bad.json"), ValidationError);
    CHECK_THROWS_AS(load_experiment(dir / "missing.json"), IoError);
  }
}
