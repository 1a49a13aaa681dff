#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "skeldiff/denoiser.hpp"
#include "skeldiff/error.hpp"

using namespace skeldiff;

namespace {

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

Tensor permute_frames(const Tensor& grid, const std::vector<int>& perm) {
  Tensor out(grid.shape());
  const std::size_t row = grid.size() / grid.dim(0);
  for (int f = 0; f < grid.dim(0); ++f)
    std::copy_n(grid.data() + perm[f] * row, row, out.data() + f * row);
  return out;
}

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("config validation") {
    CHECK_NOTHROW(DenoiserConfig{}.validate());
    auto bad = fixtures::tiny_config();
    bad.base_channels = 9;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = fixtures::tiny_config();
    bad.frames = 6;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = fixtures::tiny_config();
    bad.past_frames = 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = fixtures::tiny_config();
    bad.n_levels = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = fixtures::tiny_config();
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("sinusoidal encoding values") {
    const Tensor e = sinusoidal_encoding({0.0, 2.0}, 4);
    CHECK(e.at(0, 0) == 0.0);
    CHECK(e.at(0, 1) == 1.0);
    CHECK(e.at(1, 0) == doctest::Approx(std::sin(2.0)));
    CHECK(e.at(1, 2) == doctest::Approx(std::sin(2.0 / 100.0)));
  }

  TEST_CASE("output shapes for two skeletons share one weight set") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser model(cfg, 1);
    Rng rng(2);
    for (const auto& topo : {fixtures::chain3(), fixtures::biped7(), fixtures::chain_n(1)}) {
      const int j = topo->joint_count();
      ForwardTrace trace;
      const auto out = model.forward(fixtures::random_input(cfg, topo, rng), &trace);
      CHECK(out.root->value.shape() == Shape{cfg.frames, 3});
      CHECK(out.rot->value.shape() == Shape{cfg.frames, j, 6});
      CHECK(trace.tokens == j + 1);
      CHECK(all_finite(out.root->value));
      CHECK(all_finite(out.rot->value));
    }
  }

  TEST_CASE("temporal lengths halve twice") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser model(cfg, 1);
    Rng rng(3);
    ForwardTrace trace;
    model.forward(fixtures::random_input(cfg, fixtures::chain3(), rng), &trace);
    CHECK(trace.encoder_lengths == std::vector<int>{12, 6, 3});
    CHECK(trace.decoder_lengths == std::vector<int>{3, 6, 12});
    model.forward(fixtures::random_input(cfg, fixtures::chain3(), rng, false), &trace);
    CHECK(trace.encoder_lengths == std::vector<int>{8, 4, 2});
  }

  TEST_CASE("attention key rows scale linearly with joint count") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser model(cfg, 1);
    Rng rng(4);
    std::vector<double> per_token;
    for (int j : {1, 3, 7, 12}) {
      ForwardTrace trace;
      model.forward(fixtures::random_input(cfg, fixtures::chain_n(j), rng), &trace);
      CHECK(trace.tokens == j + 1);
      CHECK(trace.joint_attention_calls == 4);
      per_token.push_back(static_cast<double>(trace.joint_attention_key_rows) / (j + 1));
    }
    for (double v : per_token) CHECK(v == per_token.front());
  }

  TEST_CASE("forward is a pure function of weights and inputs") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser a(cfg, 5);
    const Denoiser b(cfg, 5);
    Rng rng(6);
    const auto in = fixtures::random_input(cfg, fixtures::biped7(), rng);
    const auto x = a.forward(in);
    const auto y = a.forward(in);
    const auto z = b.forward(in);
    CHECK(x.root->value == y.root->value);
    CHECK(x.rot->value == y.rot->value);
    CHECK(x.rot->value == z.rot->value);
  }

  TEST_CASE("null style and no-past paths") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser model(cfg, 7);
    Rng rng(8);
    auto in = fixtures::random_input(cfg, fixtures::biped7(), rng);
    in.style = StyleCondition::null_style();
    const auto nulled = model.forward(in);
    CHECK(all_finite(nulled.rot->value));
    in.past_root = Tensor();
    in.past_rot = Tensor();
    const auto no_past = model.forward(in);
    CHECK(no_past.rot->value.shape() == Shape{cfg.frames, 7, 6});
    CHECK(all_finite(no_past.rot->value));
  }

  TEST_CASE("style conditioning errors and blends") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser model(cfg, 9);
    CHECK_THROWS_AS(model.style_embedding(StyleCondition::single(3)), ConfigError);
    CHECK_THROWS_AS(model.style_embedding(StyleCondition::single(-1)), ConfigError);
    CHECK_THROWS_AS(model.style_embedding(StyleCondition{{{0, 0.5}, {1, 0.4}}}), ConfigError);
    CHECK_THROWS_AS(model.style_embedding(StyleCondition{{{0, 1.5}, {1, -0.5}}}), ConfigError);

    const Tensor one = model.style_embedding(StyleCondition::single(2))->value;
    const Tensor hot = model.style_embedding(StyleCondition{{{2, 1.0}, {0, 0.0}}})->value;
    CHECK(one == hot);
    const Tensor a = model.style_embedding(StyleCondition::single(0))->value;
    const Tensor b = model.style_embedding(StyleCondition::single(1))->value;
    const Tensor mix = model.style_embedding(StyleCondition{{{0, 0.3}, {1, 0.7}}})->value;
    for (std::size_t i = 0; i < mix.size(); ++i) CHECK(mix[i] == doctest::Approx(0.3 * a[i] + 0.7 * b[i]));
    CHECK(model.style_embedding(StyleCondition::null_style())->value.shape() == Shape{1, cfg.style_embed_dim});

    Rng rng(10);
    auto in = fixtures::random_input(cfg, fixtures::chain3(), rng);
    in.style = StyleCondition::single(7);
    CHECK_THROWS_AS(model.forward(in), ConfigError);
  }

  TEST_CASE("input shape errors") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser model(cfg, 11);
    Rng rng(12);
    auto in = fixtures::random_input(cfg, fixtures::chain3(), rng);
    auto short_traj = in;
    short_traj.trajectory.positions = normal_tensor({cfg.frames - 1, 2}, rng);
    CHECK_THROWS_AS(model.forward(short_traj), ShapeError);
    auto wrong_joints = in;
    wrong_joints.topology = fixtures::biped7();
    CHECK_THROWS_AS(model.forward(wrong_joints), ShapeError);
    auto wrong_past = in;
    wrong_past.past_root = normal_tensor({2, 3}, rng);
    CHECK_THROWS_AS(model.forward(wrong_past), ShapeError);
  }

  TEST_CASE("FiLM layers start as the identity modulation") {
    const Denoiser model(fixtures::tiny_config(), 13);
    int film_params = 0;
    for (const auto& [name, var] : model.parameters().entries()) {
      if (name.find(".film.") == std::string::npos) continue;
      ++film_params;
      for (double v : var->value.values()) CHECK(v == 0.0);
    }
    CHECK(film_params > 0);

    Rng rng(14);
    auto x = ad::constant(normal_tensor({5, 3, 4}, rng));
    const auto zero = ad::constant(Tensor({4}, 0.0));
    CHECK(film_modulate(x, zero, zero, 2)->value == ad::group_norm(x, 2)->value);

    const auto flat = ad::constant(Tensor({2, 1, 4}, 3.0));
    const auto shifted = film_modulate(flat, zero, ad::constant(Tensor({4}, 1.0)), 2);
    for (double v : shifted->value.values()) CHECK(v == 1.0);
    CHECK_THROWS_AS(film_modulate(x, ad::constant(Tensor({3}, 0.0)), zero, 2), ShapeError);
  }

  TEST_CASE("joint attention does not leak across the ancestor mask") {
    Rng rng(15);
    const int channels = 4;
    ParameterStore store;
    const auto w = fixtures::random_attention(store, channels, channels, channels, rng);
    for (const auto& topo : {fixtures::chain3(), fixtures::star(3), fixtures::random_tree(6, rng)}) {
      const AncestorMask mask = build_ancestor_mask(*topo);
      const int tokens = mask.token_count();
      const Tensor pe = normal_tensor({1, tokens, channels}, rng);
      const Tensor grid = normal_tensor({2, tokens, channels}, rng);
      auto layer = [&](const Tensor& g) {
        return joint_attention(ad::constant(g), mask, w, 2, ad::constant(pe))->value;
      };
      for (int q = 0; q < tokens; ++q)
        for (int k = 0; k < tokens; ++k) {
          const double s = fixtures::token_sensitivity(layer, grid, q, k);
          if (mask.allowed(q, k)) {
            CHECK(s > 1e-6);
          } else {
            CHECK(s < 1e-6);
          }
        }
    }
  }

  TEST_CASE("single joint attends to the root token and itself") {
    Rng rng(16);
    ParameterStore store;
    const auto w = fixtures::random_attention(store, 4, 4, 4, rng);
    const AncestorMask mask = build_ancestor_mask(*fixtures::chain_n(1));
    const Tensor grid = normal_tensor({1, 2, 4}, rng);
    auto layer = [&](const Tensor& g) { return joint_attention(ad::constant(g), mask, w, 1, nullptr)->value; };
    CHECK(fixtures::token_sensitivity(layer, grid, 1, 0) > 1e-6);
    CHECK(fixtures::token_sensitivity(layer, grid, 0, 1) > 1e-6);
    CHECK_THROWS_AS(joint_attention(ad::constant(normal_tensor({1, 3, 4}, rng)), mask, w, 1, nullptr), ShapeError);
  }

  TEST_CASE("temporal attention on one frame reduces to value and output projections") {
    Rng rng(17);
    ParameterStore store;
    const auto w = fixtures::random_attention(store, 4, 4, 4, rng);
    const auto grid = ad::constant(normal_tensor({1, 3, 4}, rng));
    const auto out = temporal_attention(grid, w, 2, nullptr);
    const auto expected = ad::add(grid, w.o(w.v(grid)));
    CHECK(max_abs_diff(out->value, expected->value) < 1e-12);
  }

  TEST_CASE("temporal attention is frame-permutation equivariant only without encodings") {
    Rng rng(18);
    ParameterStore store;
    const auto w = fixtures::random_attention(store, 4, 4, 4, rng);
    const Tensor grid = normal_tensor({6, 3, 4}, rng);
    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    auto plain = [&](const Tensor& g) { return temporal_attention(ad::constant(g), w, 2, nullptr)->value; };
    CHECK(max_abs_diff(plain(permute_frames(grid, perm)), permute_frames(plain(grid), perm)) < 1e-12);

    std::vector<double> pos(6);
    std::iota(pos.begin(), pos.end(), 0.0);
    const auto pe = ad::constant(sinusoidal_encoding(pos, 4));
    auto encoded = [&](const Tensor& g) { return temporal_attention(ad::constant(g), w, 2, pe)->value; };
    CHECK(max_abs_diff(encoded(permute_frames(grid, perm)), permute_frames(encoded(grid), perm)) > 1e-6);
  }

  TEST_CASE("trajectory cross attention") {
    Rng rng(19);
    ParameterStore store;
    auto w = fixtures::random_attention(store, 4, 6, 4, rng);
    const auto grid = ad::constant(normal_tensor({4, 3, 4}, rng));
    const Tensor traj = normal_tensor({4, 6}, rng);
    const auto base = trajectory_cross_attention(grid, ad::constant(traj), w, 2, nullptr, nullptr)->value;

    Tensor moved = traj;
    moved.at(2, 0) += 1e-4;
    const auto nudged = trajectory_cross_attention(grid, ad::constant(moved), w, 2, nullptr, nullptr)->value;
    CHECK(max_abs_diff(base, nudged) > 1e-9);
    const auto other =
        trajectory_cross_attention(grid, ad::constant(normal_tensor({4, 6}, rng)), w, 2, nullptr, nullptr)->value;
    CHECK(max_abs_diff(base, other) > 1e-3);

    w.v.weight->value.fill(0.0);
    const auto silent = trajectory_cross_attention(grid, ad::constant(traj), w, 2, nullptr, nullptr)->value;
    CHECK(max_abs_diff(silent, grid->value) == 0.0);
  }

  TEST_CASE("network output depends on the trajectory and the style") {
    const auto cfg = fixtures::tiny_config();
    Denoiser model(cfg, 20);
    for (auto& [name, var] : model.parameters().entries()) {
      if (name.find(".film.") == std::string::npos) continue;
      Rng r(21);
      var->value = normal_tensor(var->value.shape(), r);
      for (auto& v : var->value.values()) v *= 0.1;
    }
    Rng rng(22);
    auto in = fixtures::random_input(cfg, fixtures::chain3(), rng);
    const auto base = model.forward(in).rot->value;
    auto traj = in;
    traj.trajectory.positions.at(3, 1) += 0.5;
    CHECK(max_abs_diff(model.forward(traj).rot->value, base) > 1e-6);
    auto style = in;
    style.style = StyleCondition::single(2);
    CHECK(max_abs_diff(model.forward(style).rot->value, base) > 1e-6);
  }

  TEST_CASE("positional encodings and merged attention can be toggled") {
    auto cfg = fixtures::tiny_config();
    cfg.positional_encoding = false;
    Rng rng(23);
    const auto in = fixtures::random_input(cfg, fixtures::biped7(), rng);
    CHECK(all_finite(Denoiser(cfg, 1).forward(in).rot->value));
    cfg.positional_encoding = true;
    cfg.merged_attention = true;
    ForwardTrace trace;
    const auto out = Denoiser(cfg, 1).forward(in, &trace);
    CHECK(all_finite(out.rot->value));
    CHECK(trace.joint_attention_calls == 4);
  }

  TEST_CASE("network gradients match finite differences") {
    const auto cfg = fixtures::tiny_config();
    Denoiser model(cfg, 24);
    Rng rng(25);
    for (auto& [name, var] : model.parameters().entries())
      if (name.find(".film.") != std::string::npos)
        for (auto& v : var->value.values()) v = 0.1 * draw_normal(rng);
    const auto in = fixtures::random_input(cfg, fixtures::chain3(), rng);
    const Tensor target = normal_tensor({cfg.frames, 3, 6}, rng);
    auto loss = [&] {
      const auto out = model.forward(in);
      return ad::add(ad::mse(out.rot, ad::constant(target)), ad::mean(out.root));
    };
    std::vector<ad::Var> picked;
    for (const char* name : {"encoder2.attn.joint.q.weight", "encoder3.attn.cross.v.bias", "input.root.weight",
                             "style.embedding", "output.joint.bias"})
      picked.push_back(model.parameters().find(name));
    CHECK(gradcheck::max_relative_error(loss, picked, 1e-5, 1e-7) < 1e-3);
  }
}
