#include <doctest.h>
#include <torch/torch.h>

#include "ctrlloop/error.hpp"
#include "ctrlloop/nets.hpp"
#include "fd.hpp"

using namespace ctrlloop;
using namespace ctrlloop::nets;
using testutil::relative_error;

namespace {

EncoderConfig toy_encoder() {
  EncoderConfig c;
  c.in_channels = 1;
  c.hidden = 4;
  c.patch_dim = 8;
  c.class_dim = 4;
  c.patch_size = 4;
  return c;
}

ArchConfig toy_arch(int channels = 2) {
  ArchConfig a;
  a.image_channels = channels;
  a.base_width = 8;
  a.channel_mults = {1, 2};
  a.res_blocks = 1;
  a.time_dim = 16;
  a.cond_dim = 8;
  a.class_dim = 4;
  a.init_seed = 3;
  return a;
}

torch::Tensor param(ConditionalDenoiser& m, const std::string& name) {
  for (const auto& p : m->named_parameters())
    if (p.key() == name) return p.value();
  FAIL("missing parameter " << name);
  return {};
}

}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("feature shapes") {
    const FrozenEncoder enc(EncoderConfig{});
    const auto f = enc.encode(torch::zeros({2, 3, 32, 32}));
    CHECK((f.z_patch.sizes() == torch::IntArrayRef{2, 64, 32}));
    CHECK((f.z_class.sizes() == torch::IntArrayRef{2, 32}));
    CHECK(enc.patch_count(32, 32) == 64);
    CHECK(torch::isfinite(f.z_patch).all().item<bool>());
  }

  TEST_CASE("deterministic in the seed and the input") {
    const FrozenEncoder a(EncoderConfig{}), b(EncoderConfig{});
    const auto x = torch::rand({1, 3, 16, 16}) * 2 - 1;
    CHECK(torch::equal(a.encode(x).z_patch, a.encode(x).z_patch));
    CHECK(torch::equal(a.encode(x).z_patch, b.encode(x).z_patch));
    EncoderConfig other;
    other.seed = 1;
    CHECK_FALSE(torch::equal(FrozenEncoder(other).encode(x).z_patch, a.encode(x).z_patch));
  }

  TEST_CASE("class feature is an orthogonal projection of the mean patch feature") {
    const FrozenEncoder enc(EncoderConfig{});
    const auto params = enc.parameters();
    const auto proj = params.back();
    CHECK((torch::matmul(proj.t(), proj) - torch::eye(proj.size(1), torch::kDouble)).abs().max().item<double>() <
          1e-12);
    const auto x = torch::rand({3, 3, 16, 16}, torch::kDouble) * 2 - 1;
    const auto f = enc.encode(x);
    CHECK((f.z_class - torch::matmul(f.z_patch.mean(1), proj)).abs().max().item<double>() < 1e-12);
  }

  TEST_CASE("directional derivative matches finite differences") {
    const FrozenEncoder enc(toy_encoder());
    auto x = (torch::rand({1, 1, 8, 8}, torch::kDouble) * 2 - 1).requires_grad_(true);
    const auto v = torch::randn({1, 1, 8, 8}, torch::kDouble);
    for (int which = 0; which < 2; ++which) {
      const auto u = which == 0 ? torch::randn({1, 4, 8}, torch::kDouble) : torch::randn({1, 4}, torch::kDouble);
      auto project = [&](const torch::Tensor& in) {
        const auto f = enc.encode(in);
        return ((which == 0 ? f.z_patch : f.z_class) * u).sum();
      };
      const auto g = torch::autograd::grad({project(x)}, {x})[0];
      const double jvp = (g * v).sum().item<double>();
      const double fd = testutil::directional_fd([&] { return project(x).item<double>(); }, x.detach(), v);
      CHECK(relative_error(jvp, fd) <= 1e-4);
    }
  }

  TEST_CASE("encoder weights never require gradients") {
    const FrozenEncoder enc(EncoderConfig{});
    const auto before = enc.parameters();
    std::vector<torch::Tensor> copies;
    for (const auto& p : before) {
      CHECK_FALSE(p.requires_grad());
      copies.push_back(p.clone());
    }
    auto x = torch::rand({2, 3, 8, 8}).requires_grad_(true);
    enc.encode(x).z_patch.sum().backward();
    const auto after = enc.parameters();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(torch::equal(after[i], copies[i]));
  }

  TEST_CASE("feature loss differs from pixel loss") {
    // Two edits with identical pixel MSE against the reference but different feature-space error.
    const FrozenEncoder enc(EncoderConfig{});
    const auto ref = torch::zeros({1, 3, 16, 16}, torch::kDouble);
    auto a = ref.clone(), b = ref.clone();
    a.index_put_({0, 0, 8, 8}, 0.5);
    b.index_put_({0, 0, 8, 8}, -0.5);
    CHECK(torch::mse_loss(a, ref).item<double>() == torch::mse_loss(b, ref).item<double>());
    const auto fr = enc.encode(ref).z_patch;
    const double la = torch::mse_loss(enc.encode(a).z_patch, fr).item<double>();
    const double lb = torch::mse_loss(enc.encode(b).z_patch, fr).item<double>();
    CHECK(relative_error(la, lb) > 1e-3);
  }

  TEST_CASE("shape errors") {
    const FrozenEncoder enc(EncoderConfig{});
    CHECK_THROWS_AS(enc.encode(torch::zeros({1, 1, 16, 16})), ValidationError);
    CHECK_THROWS_AS(enc.encode(torch::zeros({1, 3, 15, 16})), ValidationError);
  }
}

TEST_SUITE("embedder") {
  TEST_CASE("zero class feature with the identity pose") {
    auto m = make_denoiser(toy_arch(), torch::kDouble);
    const auto z = torch::zeros({1, 4}, torch::kDouble);
    const auto pose = pose_vector(RelativePose{}).unsqueeze(0);
    const auto W = param(m, "embedder.weight"), b = param(m, "embedder.bias");
    auto basis = torch::zeros({8}, torch::kDouble);
    basis[6] = 1.0;  // cos component of the identity pose
    const auto expect = torch::matmul(W, basis) + b;
    CHECK((m->embed(z, pose)[0] - expect).abs().max().item<double>() < 1e-14);
  }

  TEST_CASE("linear in the class feature") {
    auto m = make_denoiser(toy_arch(), torch::kDouble);
    const auto z = torch::randn({1, 4}, torch::kDouble);
    const auto pose = pose_vector(RelativePose{0.1, 0.6, 0.8, -0.05}).unsqueeze(0);
    const auto base = m->embed(torch::zeros_like(z), pose);
    const auto unit = m->embed(z, pose) - base;
    for (double a : {-2.0, 0.5, 3.0}) CHECK(((m->embed(a * z, pose) - base) - a * unit).abs().max().item<double>() < 1e-12);
  }

  TEST_CASE("gradient of the squared norm with respect to W") {
    auto m = make_denoiser(toy_arch(), torch::kDouble);
    const auto z = torch::randn({2, 4}, torch::kDouble);
    const auto pose = torch::stack({pose_vector(RelativePose{0.2, 0.0, 1.0, 0.1}),
                                    pose_vector(RelativePose{-0.3, 0.6, 0.8, 0.0})});
    auto W = param(m, "embedder.weight");
    auto loss = [&] { return m->embed(z, pose).pow(2).sum(); };
    m->zero_grad();
    loss().backward();
    const auto g = W.grad().clone();
    for (std::int64_t i = 0; i < W.numel(); i += 3) {
      const double fd = testutil::entry_fd([&] { return loss().item<double>(); }, W, i);
      CHECK(relative_error(g.view({-1})[i].item<double>(), fd) <= 1e-6);
    }
  }
}

TEST_SUITE("denoiser") {
  TEST_CASE("output shape equals input shape") {
    ArchConfig a = toy_arch(3);
    a.class_dim = 32;
    auto m = make_denoiser(a);
    for (int res : {16, 32, 64}) {
      const auto x = torch::randn({2, 3, res, res});
      const auto out = m->forward(x, torch::randn({2, a.cond_dim}), 10);
      CHECK(out.sizes() == x.sizes());
    }
  }

  TEST_CASE("default architecture runs") {
    auto m = make_denoiser(ArchConfig{});
    const auto x = torch::randn({1, 3, 32, 32});
    const auto cond = m->embed(torch::randn({1, 32}), pose_vector(RelativePose{}).to(torch::kFloat).unsqueeze(0));
    CHECK(m->forward(x, cond, 50).sizes() == x.sizes());
  }

  TEST_CASE("identical inputs give identical outputs, and construction is seeded") {
    auto m = make_denoiser(toy_arch());
    auto m2 = make_denoiser(toy_arch());
    const auto x = torch::randn({2, 2, 8, 8});
    const auto c = torch::randn({2, 8});
    CHECK(torch::equal(m->forward(x, c, 7), m->forward(x, c, 7)));
    CHECK(torch::equal(m->forward(x, c, 7), m2->forward(x, c, 7)));
  }

  TEST_CASE("parameter gradients match finite differences") {
    auto m = make_denoiser(toy_arch(2), torch::kDouble);
    const auto x = torch::randn({2, 2, 8, 8}, torch::kDouble);
    const auto c = torch::randn({2, 8}, torch::kDouble);
    const auto t = torch::tensor({3.0, 40.0}, torch::kDouble);
    auto loss = [&] { return m->forward(x, c, t).pow(2).mean(); };
    m->zero_grad();
    loss().backward();
    int checked = 0;
    for (const auto& p : m->named_parameters()) {
      if (p.key().rfind("embedder.", 0) == 0) continue;  // only used by embed()
      auto value = p.value();
      REQUIRE_MESSAGE(value.grad().defined(), p.key());
      const auto g = value.grad().clone().view({-1});
      for (std::int64_t i = 0; i < value.numel(); i += std::max<std::int64_t>(1, value.numel() / 3)) {
        const double fd = testutil::entry_fd([&] { return loss().item<double>(); }, value, i);
        const double ad = g[i].item<double>();
        if (std::abs(ad) < 1e-9 && std::abs(fd) < 1e-9) continue;
        CHECK_MESSAGE(relative_error(ad, fd) <= 1e-3, p.key(), "[", i, "]: ", ad, " vs ", fd);
        ++checked;
      }
    }
    CHECK(checked > 20);
  }

  TEST_CASE("non-finite activations raise a numerical error") {
    auto m = make_denoiser(toy_arch());
    auto x = torch::zeros({1, 2, 8, 8});
    x[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(m->forward(x, torch::zeros({1, 8}), 1), NumericalError);
  }

  TEST_CASE("shape errors") {
    auto m = make_denoiser(toy_arch());
    CHECK_THROWS_AS(m->forward(torch::zeros({1, 3, 8, 8}), torch::zeros({1, 8}), 1), ValidationError);
    CHECK_THROWS_AS(m->forward(torch::zeros({1, 2, 7, 7}), torch::zeros({1, 8}), 1), ValidationError);
    CHECK_THROWS_AS(m->forward(torch::zeros({1, 2, 8, 8}), torch::zeros({2, 8}), 1), ValidationError);
  }
}
