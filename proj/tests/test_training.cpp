#include <cmath>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "skeldiff/checkpoint.hpp"
#include "skeldiff/error.hpp"
#include "skeldiff/losses.hpp"
#include "skeldiff/training.hpp"

using namespace skeldiff;

namespace {

ad::Var still_root(int frames, double x = 0, double y = 0.95) {
  Tensor t({frames, 3}, 0.0);
  for (int f = 0; f < frames; ++f) {
    t.at(f, 0) = x;
    t.at(f, 1) = y;
  }
  return ad::constant(t);
}

ad::Var identity_rot(int frames, int joints) { return ad::constant(fixtures::identity_rotations(frames, joints)); }

double scalar(const ad::Var& v) { return v->value[0]; }

std::vector<MotionWindow> walk_windows(const TopologyPtr& topo, const DenoiserConfig& cfg, int style = 0) {
  auto clip = fixtures::walk_clip(topo, cfg.frames + cfg.past_frames + 6, 0.03, 0.4, style);
  const NormStats stats = compute_norm_stats({clip});
  return make_windows(clip, WindowSpec{cfg.frames, cfg.past_frames, 2}, stats);
}

TrainingConfig quick_training(int steps) {
  TrainingConfig tc;
  tc.steps = steps;
  tc.batch_size = 2;
  tc.learning_rate = 1e-3;
  return tc;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("diffusion loss examples") {
    Rng rng(1);
    const Tensor a = normal_tensor({3, 4}, rng);
    const Tensor b = normal_tensor({3, 4}, rng);
    CHECK(scalar(diffusion_loss(ad::constant(a), ad::constant(a))) == 0.0);
    CHECK(scalar(diffusion_loss(ad::constant(Tensor::scalar(1)), ad::constant(Tensor::scalar(0)))) == 1.0);
    double expected = 0;
    for (std::size_t i = 0; i < a.size(); ++i) expected += (a[i] - b[i]) * (a[i] - b[i]);
    expected /= a.size();
    CHECK(std::abs(scalar(diffusion_loss(ad::constant(a), ad::constant(b))) - expected) < 1e-9);
    CHECK_THROWS_AS(diffusion_loss(ad::constant(a), ad::constant(Tensor({4, 3}, 0.0))), ShapeError);
  }

  TEST_CASE("angular velocity loss examples") {
    const int frames = 5;
    const double slope = 0.3;
    Tensor constant({frames, 1, 6}, 0.2);
    Tensor ramp = constant;
    for (int f = 0; f < frames; ++f)
      for (int k = 0; k < 6; ++k) ramp.at(f, 0, k) += slope * f;
    CHECK(scalar(angular_velocity_loss(ad::constant(constant), ad::constant(constant))) == 0.0);
    CHECK(scalar(angular_velocity_loss(ad::constant(constant), ad::constant(ramp))) ==
          doctest::Approx(slope * slope).epsilon(1e-12));

    Tensor one = constant;
    for (int f = 0; f < frames; ++f) one.at(f, 0, 2) += slope * f;
    CHECK(scalar(angular_velocity_loss(ad::constant(constant), ad::constant(one))) ==
          doctest::Approx(slope * slope / 6).epsilon(1e-12));

    Tensor shifted_a = ramp;
    Tensor shifted_b = one;
    for (auto& v : shifted_a.values()) v += 1.7;
    for (auto& v : shifted_b.values()) v += 1.7;
    CHECK(scalar(angular_velocity_loss(ad::constant(shifted_a), ad::constant(shifted_b))) ==
          doctest::Approx(scalar(angular_velocity_loss(ad::constant(ramp), ad::constant(one)))).epsilon(1e-12));
    CHECK_THROWS(angular_velocity_loss(ad::constant(Tensor({1, 1, 6}, 0.0)), ad::constant(Tensor({1, 1, 6}, 0.0))));
  }

  TEST_CASE("global position loss examples") {
    const auto topo = fixtures::chain3();
    const int frames = 4;
    const auto rot = identity_rot(frames, 3);
    CHECK(scalar(global_position_loss(*topo, still_root(frames), rot, still_root(frames), rot)) == 0.0);
    CHECK(scalar(global_position_loss(*topo, still_root(frames, 1.0), rot, still_root(frames), rot)) ==
          doctest::Approx(1.0 / 3).epsilon(1e-15));

    Tensor mid = rot->value;
    for (int f = 0; f < frames; ++f) set_rot6d(mid, f, 1, rotation_about(Vec3::UnitZ(), 0.4));
    CHECK(scalar(global_position_loss(*topo, still_root(frames), ad::constant(mid), still_root(frames), rot)) > 1e-3);
    Tensor leaf = rot->value;
    for (int f = 0; f < frames; ++f) set_rot6d(leaf, f, 2, rotation_about(Vec3::UnitZ(), 0.4));
    CHECK(scalar(global_position_loss(*topo, still_root(frames), ad::constant(leaf), still_root(frames), rot)) == 0.0);
  }

  TEST_CASE("global velocity loss examples") {
    const auto topo = fixtures::chain3();
    const int frames = 5;
    const auto rot = identity_rot(frames, 3);
    CHECK(scalar(global_velocity_loss(*topo, still_root(frames), rot, still_root(frames), rot)) == 0.0);
    Tensor moving = still_root(frames)->value;
    for (int f = 0; f < frames; ++f) moving.at(f, 0) = 0.1 * f;
    CHECK(scalar(global_velocity_loss(*topo, ad::constant(moving), rot, still_root(frames), rot)) ==
          doctest::Approx(0.01 / 3).epsilon(1e-12));
    CHECK(scalar(global_velocity_loss(*topo, still_root(frames, 3.0), rot, still_root(frames), rot)) == 0.0);
  }

  TEST_CASE("foot contact loss examples") {
    const auto topo = fixtures::chain3();
    const int frames = 5;
    const auto rot = identity_rot(frames, 3);
    Tensor sliding = still_root(frames)->value;
    for (int f = 0; f < frames; ++f) sliding.at(f, 2) = 0.05 * f;
    const Tensor on({frames, 1}, 1.0);
    const Tensor off({frames, 1}, 0.0);
    CHECK(scalar(foot_contact_loss(*topo, ad::constant(sliding), rot, off)) == 0.0);
    CHECK(scalar(foot_contact_loss(*topo, ad::constant(sliding), rot, on)) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(scalar(foot_contact_loss(*topo, still_root(frames), rot, on)) == 0.0);
    CHECK_THROWS_AS(foot_contact_loss(*topo, still_root(frames), rot, Tensor({frames, 2}, 1.0)), ShapeError);
  }

  TEST_CASE("auxiliary losses are nonnegative and gradients are finite-difference exact") {
    Rng rng(2);
    const auto topo = fixtures::biped7();
    const int frames = 4;
    auto pr = ad::parameter(normal_tensor({frames, 3}, rng));
    auto rr = ad::parameter(normal_tensor({frames, 7, 6}, rng));
    const auto tr = ad::constant(normal_tensor({frames, 3}, rng));
    const auto trot = ad::constant(fixtures::random_rotations(frames, 7, rng));
    Tensor contact({frames, 2}, 1.0);
    contact.at(2, 1) = 0.0;
    const std::vector<std::function<ad::Var()>> losses{
        [&] { return angular_velocity_loss(rr, trot); },
        [&] { return global_position_loss(*topo, pr, rr, tr, trot); },
        [&] { return global_velocity_loss(*topo, pr, rr, tr, trot); },
        [&] { return foot_contact_loss(*topo, pr, rr, contact); }};
    for (const auto& l : losses) {
      CHECK(scalar(l()) >= 0.0);
      CHECK(gradcheck::max_relative_error(l, {pr, rr}) < 1e-4);
    }
  }

  TEST_CASE("differentiable denormalization matches the tensor form") {
    NormStats s;
    s.min = {-2, 0.5, -1};
    s.max = {3, 1.5, 4};
    Rng rng(3);
    const Tensor x = normal_tensor({5, 3}, rng);
    CHECK(max_abs_diff(denormalize_root(ad::constant(x), s)->value, denormalize_root(x, s)) < 1e-15);
  }

  TEST_CASE("loss weight validation") {
    LossWeights w;
    CHECK_NOTHROW(w.validate());
    w.diffusion = 0;
    CHECK_THROWS_AS(w.validate(), ConfigError);
    w = LossWeights{};
    w.foot_contact = -1;
    CHECK_THROWS_AS(w.validate(), ConfigError);
  }

  TEST_CASE("total loss with only the diffusion term") {
    const auto cfg = fixtures::tiny_config();
    const Denoiser model(cfg, 4);
    const auto windows = walk_windows(fixtures::chain3(), cfg);
    const auto schedule = make_schedule(ScheduleKind::Cosine, 50);
    LossWeights only_d{1, 0, 0, 0, 0};
    Rng a(5);
    const auto l = total_loss(windows, model, schedule, only_d, NormStats::identity(), ConditionDropout{0, 0}, a);
    CHECK(l.parts.total == l.parts.diffusion);
    CHECK(l.parts.foot_contact == 0.0);

    Rng b(5);
    Rng c(5);
    const auto x = total_loss(windows, model, schedule, LossWeights{}, NormStats::identity(), ConditionDropout{0, 0}, b);
    const auto y = total_loss(windows, model, schedule, LossWeights{}, NormStats::identity(), ConditionDropout{0, 0}, c);
    CHECK(x.parts.total == y.parts.total);
    CHECK(x.parts.diffusion == l.parts.diffusion);
    CHECK(x.parts.total >= x.parts.diffusion);
    CHECK(x.parts.global_position > 0);

    auto mixed = windows;
    mixed.push_back(walk_windows(fixtures::biped7(), cfg).front());
    CHECK_THROWS_AS(total_loss(mixed, model, schedule, LossWeights{}, NormStats::identity(), ConditionDropout{}, b),
                    TrainingError);
  }

  TEST_CASE("condition dropout frequencies") {
    const auto schedule = make_schedule(ScheduleKind::Cosine, 50);
    Rng rng(6);
    int styles = 0;
    int pasts = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const auto c = draw_sample_conditions(schedule, ConditionDropout{}, rng);
      CHECK(c.t >= 1);
      CHECK(c.t <= 50);
      styles += c.drop_style;
      pasts += c.drop_past;
    }
    CHECK(std::abs(styles / double(n) - 0.1) < 0.01);
    CHECK(std::abs(pasts / double(n) - 0.5) < 0.02);
  }

  TEST_CASE("loss is symmetric under relabeling styles") {
    const auto cfg = fixtures::tiny_config();
    Denoiser model(cfg, 7);
    for (auto& [name, var] : model.parameters().entries())
      if (name.find(".film.") != std::string::npos) {
        Rng r(8);
        var->value = normal_tensor(var->value.shape(), r);
      }
    auto windows = walk_windows(fixtures::chain3(), cfg, 0);
    windows[1].style_id = 2;
    const auto schedule = make_schedule(ScheduleKind::Cosine, 50);
    Rng a(9);
    const double before =
        total_loss(windows, model, schedule, LossWeights{}, NormStats::identity(), ConditionDropout{}, a).parts.total;

    const std::vector<int> perm{2, 0, 1};
    auto table = model.parameters().find("style.embedding");
    const Tensor old = table->value;
    for (int s = 0; s < 3; ++s)
      for (int c = 0; c < cfg.style_embed_dim; ++c) table->value.at(perm[s], c) = old.at(s, c);
    for (auto& w : windows) w.style_id = perm[w.style_id];
    Rng b(9);
    const double after =
        total_loss(windows, model, schedule, LossWeights{}, NormStats::identity(), ConditionDropout{}, b).parts.total;
    CHECK(after == before);
  }

  TEST_CASE("total loss gradient on a 100-parameter slice") {
    const auto cfg = fixtures::tiny_config();
    Denoiser model(cfg, 10);
    Rng init(11);
    for (auto& [name, var] : model.parameters().entries())
      if (name.find(".film.") != std::string::npos)
        for (auto& v : var->value.values()) v = 0.1 * draw_normal(init);
    const auto windows = walk_windows(fixtures::biped7(), cfg);
    const std::vector<MotionWindow> batch(windows.begin(), windows.begin() + 2);
    const auto schedule = make_schedule(ScheduleKind::Cosine, 50);
    auto loss = [&] {
      Rng rng(12);
      return total_loss(batch, model, schedule, LossWeights{}, NormStats::identity(), ConditionDropout{}, rng).total;
    };
    std::vector<ad::Var> picked;
    std::size_t count = 0;
    for (const char* name : {"output.root.weight", "output.joint.bias", "input.root.weight",
                             "encoder2.attn.joint.q.bias", "style.embedding"}) {
      picked.push_back(model.parameters().find(name));
      count += picked.back()->value.size();
    }
    CHECK(count >= 100);
    CHECK(gradcheck::max_relative_error(loss, picked, 1e-5, 1e-7) < 1e-3);
  }

  TEST_CASE("learning rate schedule") {
    TrainingConfig tc;
    CHECK(learning_rate_at(tc, 0) == 1e-4);
    CHECK(learning_rate_at(tc, 1000) == doctest::Approx(1e-4 * std::pow(0.9999, 1000)).epsilon(1e-14));
    tc.lr_decay = 1.5;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainingConfig{};
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
  }

  TEST_CASE("training data groups windows by skeleton") {
    const auto chain = fixtures::chain3();
    const auto biped = fixtures::biped7();
    const std::vector<MotionClip> clips{fixtures::walk_clip(chain, 20, 0.02, 0), fixtures::walk_clip(biped, 20, 0.02, 0),
                                        fixtures::walk_clip(chain, 20, 0.03, 1, 1)};
    const auto data = make_training_data(clips, WindowSpec{8, 4, 4}, NormStats::identity(), true);
    REQUIRE(data.groups.size() == 2);
    CHECK(data.groups[0].size() == 6);
    CHECK(data.groups[1].size() == 3);
    CHECK(data.window_count() == 9);
    for (const auto& w : data.sample_weights[0]) CHECK(w == doctest::Approx(1.0 / 6));
  }

  TEST_CASE("training steps reduce the loss and reject non-finite values") {
    const auto cfg = fixtures::tiny_config();
    const auto clip = fixtures::walk_clip(fixtures::chain3(), 20, 0.03, 0);
    const NormStats stats = compute_norm_stats({clip});
    const auto data = make_training_data({clip}, WindowSpec{cfg.frames, cfg.past_frames, 2}, stats, true);
    const auto schedule = make_schedule(ScheduleKind::Cosine, 50);
    auto tc = quick_training(60);
    tc.dropout = ConditionDropout{0, 0};
    tc.augment = AugmentConfig{0, 0, 2};
    TrainingState state{Denoiser(cfg, 13), Adam(), Rng(14), 0};
    std::vector<double> losses;
    train_loop(state, data, tc, schedule, stats, [&](const StepReport& r) { losses.push_back(r.loss.total); });
    REQUIRE(losses.size() == 60);
    CHECK(state.step == 60);
    double head = 0;
    double tail = 0;
    for (int i = 0; i < 10; ++i) {
      head += losses[i];
      tail += losses[50 + i];
    }
    CHECK(tail < head);

    state.model.parameters().find("output.root.bias")->value[0] = std::nan("");
    CHECK_THROWS_AS(train_step(state, data, tc, schedule, stats), TrainingError);
  }

  TEST_CASE("metrics csv") {
    StepReport r;
    r.step = 3;
    r.learning_rate = 0.5;
    r.loss.total = 1.25;
    CHECK(metrics_csv_header().rfind("step,total,", 0) == 0);
    CHECK(metrics_csv_row(r) == "3,1.25,0,0,0,0,0,0.5");
  }

  TEST_CASE("rng state round trip") {
    Rng rng(15);
    rng();
    Rng copy = rng_from_state_string(rng_state_string(rng));
    CHECK(copy() == rng());
    CHECK_THROWS_AS(rng_from_state_string("garbage"), CheckpointError);
  }

  TEST_CASE("checkpoint round trip is bit-identical") {
    fixtures::TempDir dir("ckpt");
    auto cfg = fixtures::tiny_config();
    cfg.merged_attention = true;
    const Denoiser model(cfg, 16);
    CheckpointMeta meta;
    meta.run_config = {{"model.F", cfg.frames}};
    meta.style_names = {"a/x", "a/y", "b/z"};
    meta.dataset_names = {"a", "b"};
    meta.topologies = {fixtures::chain3(), fixtures::biped7()};
    meta.stats.min = {-1.5, 0.1, -2};
    meta.stats.max = {1.25, 1.1, 2.5};
    meta.step = 42;
    Rng rng(17);
    meta.rng_state = rng_state_string(rng);
    AdamState adam;
    adam.step = 42;
    for (const auto& [name, var] : model.parameters().entries()) {
      adam.m[name] = normal_tensor(var->value.shape(), rng);
      adam.v[name] = normal_tensor(var->value.shape(), rng);
    }
    save_checkpoint(dir.path() / "m.skd", meta, model, &adam);
    const auto loaded = load_checkpoint(dir.path() / "m.skd");
    CHECK(loaded.model.config() == cfg);
    CHECK(loaded.meta.style_names == meta.style_names);
    CHECK(loaded.meta.dataset_names == meta.dataset_names);
    CHECK(*loaded.meta.topologies[1] == *meta.topologies[1]);
    CHECK(loaded.meta.stats == meta.stats);
    CHECK(loaded.meta.step == 42);
    CHECK(loaded.meta.rng_state == meta.rng_state);
    CHECK(loaded.meta.run_config == meta.run_config);
    CHECK(loaded.optimizer.step == 42);
    CHECK(loaded.optimizer.m == adam.m);
    CHECK(loaded.optimizer.v == adam.v);
    for (std::size_t i = 0; i < model.parameters().entries().size(); ++i)
      CHECK(loaded.model.parameters().entries()[i].second->value == model.parameters().entries()[i].second->value);

    const auto in = fixtures::random_input(cfg, fixtures::biped7(), rng);
    CHECK(loaded.model.forward(in).rot->value == model.forward(in).rot->value);
    CHECK(loaded.model.forward(in).root->value == model.forward(in).root->value);
  }

  TEST_CASE("corrupt checkpoints are rejected") {
    fixtures::TempDir dir("badckpt");
    const Denoiser model(fixtures::tiny_config(), 18);
    save_checkpoint(dir.path() / "ok.skd", CheckpointMeta{}, model);
    std::string bytes;
    {
      std::ifstream in(dir.path() / "ok.skd", std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write = [&](const std::string& name, const std::string& content) {
      std::ofstream out(dir.path() / name, std::ios::binary);
      out << content;
      return dir.path() / name;
    };
    CHECK_THROWS_AS(load_checkpoint(write("magic.skd", "NOTACKPT" + bytes.substr(8))), CheckpointError);
    std::string versioned = bytes;
    versioned[8] = 9;
    CHECK_THROWS_AS(load_checkpoint(write("version.skd", versioned)), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(write("short.skd", bytes.substr(0, bytes.size() - 16))), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.skd"), CheckpointError);
  }

  TEST_CASE("resuming from a checkpoint reproduces uninterrupted training") {
    fixtures::TempDir dir("resume");
    const auto cfg = fixtures::tiny_config();
    const std::vector<MotionClip> clips{fixtures::walk_clip(fixtures::chain3(), 20, 0.03, 0),
                                        fixtures::walk_clip(fixtures::biped7(), 20, 0.02, 1, 1)};
    const NormStats stats = compute_norm_stats(clips);
    const auto data = make_training_data(clips, WindowSpec{cfg.frames, cfg.past_frames, 2}, stats, true);
    const auto schedule = make_schedule(ScheduleKind::Cosine, 50);
    auto tc = quick_training(8);

    TrainingState straight{Denoiser(cfg, 19), Adam(), Rng(20), 0};
    std::vector<double> expected;
    train_loop(straight, data, tc, schedule, stats, [&](const StepReport& r) { expected.push_back(r.loss.total); });

    TrainingState first{Denoiser(cfg, 19), Adam(), Rng(20), 0};
    tc.steps = 5;
    train_loop(first, data, tc, schedule, stats);
    CheckpointMeta meta;
    meta.step = first.step;
    meta.rng_state = rng_state_string(first.rng);
    save_checkpoint(dir.path() / "c.skd", meta, first.model, &first.optimizer.state());

    auto loaded = load_checkpoint(dir.path() / "c.skd");
    TrainingState resumed{std::move(loaded.model), Adam(), rng_from_state_string(loaded.meta.rng_state),
                          loaded.meta.step};
    resumed.optimizer.state() = loaded.optimizer;
    tc.steps = 8;
    std::vector<double> tail;
    train_loop(resumed, data, tc, schedule, stats, [&](const StepReport& r) { tail.push_back(r.loss.total); });
    REQUIRE(tail.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(tail[i] == expected[5 + i]);
    for (std::size_t i = 0; i < straight.model.parameters().entries().size(); ++i)
      CHECK(resumed.model.parameters().entries()[i].second->value ==
            straight.model.parameters().entries()[i].second->value);
  }
}
