#include "skeldiff/denoiser.hpp"

#include <cmath>

#include "skeldiff/error.hpp"

namespace skeldiff {

namespace {

constexpr int kTrajectoryFeatures = 8;

struct FilmLinear {
  Linear map;
  int channels = 0;

  FilmLinear() = default;
  FilmLinear(ParameterStore& s, const std::string& name, int cond_dim, int channels_, Rng& rng)
      : map(s, name, cond_dim, 2 * channels_, rng, true), channels(channels_) {}

  ad::Var apply(const ad::Var& x, const ad::Var& cond, int groups) const {
    auto gb = map(cond);
    auto gamma = ad::reshape(ad::slice(gb, 1, 0, channels), {channels});
    auto beta = ad::reshape(ad::slice(gb, 1, channels, channels), {channels});
    return film_modulate(x, gamma, beta, groups);
  }
};

AttentionWeights make_attention(ParameterStore& s, const std::string& name, int q_in, int kv_in, int width,
                                Rng& rng) {
  return AttentionWeights{Linear(s, name + ".q", q_in, width, rng), Linear(s, name + ".k", kv_in, width, rng),
                          Linear(s, name + ".v", kv_in, width, rng), Linear(s, name + ".o", width, width, rng)};
}

struct ResBlock {
  Conv1d conv1;
  Conv1d conv2;
  FilmLinear film;
  Linear skip;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParameterStore& s, const std::string& name, int in, int out, int cond_dim, Rng& rng)
      : conv1(s, name + ".conv1", in, out, 1, rng),
        conv2(s, name + ".conv2", out, out, 1, rng),
        film(s, name + ".film", cond_dim, out, rng),
        has_skip(in != out) {
    if (has_skip) skip = Linear(s, name + ".skip", in, out, rng);
  }

  ad::Var operator()(const ad::Var& x, const ad::Var& cond, int groups) const {
    auto h = conv1(ad::silu(ad::group_norm(x, groups)));
    h = ad::silu(film.apply(h, cond, groups));
    h = conv2(h);
    return ad::add(has_skip ? skip(x) : x, h);
  }
};

// Per-call context shared by every attention stack in one forward pass.
struct StackContext {
  const AncestorMask* mask = nullptr;
  std::shared_ptr<const std::vector<std::uint8_t>> merged_mask;
  std::vector<int> token_depth;
  ad::Var trajectory_tokens;
  ad::Var trajectory_encoding;
  int past_frames = 0;
  ForwardTrace* trace = nullptr;
};

struct AttentionStack {
  int channels = 0;
  FilmLinear film;
  AttentionWeights temporal;
  AttentionWeights joint;
  AttentionWeights cross;
  ad::Var depth_table;
  Linear ff1;
  Linear ff2;

  AttentionStack() = default;
  AttentionStack(ParameterStore& s, const std::string& name, int c, int cond_dim, int traj_dim, int max_depth,
                 bool merged, Rng& rng)
      : channels(c), film(s, name + ".film", cond_dim, c, rng) {
    if (!merged) temporal = make_attention(s, name + ".temporal", c, c, c, rng);
    joint = make_attention(s, name + ".joint", c, c, c, rng);
    cross = make_attention(s, name + ".cross", c, traj_dim, c, rng);
    depth_table = s.create(name + ".depth_embedding", [&] {
      Tensor t({max_depth + 2, c});
      for (auto& v : t.values()) v = 0.02 * draw_normal(rng);
      return t;
    }());
    ff1 = Linear(s, name + ".ff1", c, 2 * c, rng);
    ff2 = Linear(s, name + ".ff2", 2 * c, c, rng);
  }

  ad::Var operator()(const ad::Var& x, const ad::Var& cond, int stride, const DenoiserConfig& cfg,
                     const StackContext& ctx) const {
    const int frames = x->value.dim(0);
    const int tokens = x->value.dim(1);
    auto h = film.apply(x, cond, cfg.groupnorm_groups);

    ad::Var frame_pe;
    ad::Var token_pe;
    if (cfg.positional_encoding) {
      std::vector<double> pos(frames);
      for (int t = 0; t < frames; ++t) pos[t] = t * stride + (stride - 1) / 2.0;
      frame_pe = ad::constant(sinusoidal_encoding(pos, channels));
      token_pe = ad::reshape(ad::gather_rows(depth_table, ctx.token_depth), {1, tokens, channels});
    }

    if (cfg.merged_attention) {
      auto qk = h;
      if (frame_pe) {
        qk = ad::add(qk, ad::reshape(frame_pe, {frames, 1, channels}));
        qk = ad::add(qk, token_pe);
      }
      const Shape flat{1, frames * tokens, channels};
      auto q = joint.q(ad::reshape(qk, flat));
      auto k = joint.k(ad::reshape(qk, flat));
      auto v = joint.v(ad::reshape(h, flat));
      auto a = joint.o(ad::attention(q, k, v, cfg.heads, ctx.merged_mask));
      h = ad::add(h, ad::reshape(a, {frames, tokens, channels}));
      if (ctx.trace) {
        ctx.trace->joint_attention_key_rows += static_cast<long long>(frames) * tokens;
        ++ctx.trace->joint_attention_calls;
      }
    } else {
      h = temporal_attention(h, temporal, cfg.heads, frame_pe);
      h = joint_attention(h, *ctx.mask, joint, cfg.heads, token_pe);
      if (ctx.trace) {
        ctx.trace->joint_attention_key_rows += static_cast<long long>(frames) * tokens;
        ++ctx.trace->joint_attention_calls;
      }
    }

    h = trajectory_cross_attention(h, ctx.trajectory_tokens, cross, cfg.heads, frame_pe, ctx.trajectory_encoding);
    return ad::add(h, ff2(ad::silu(ff1(h))));
  }
};

std::shared_ptr<const std::vector<std::uint8_t>> merged_mask(const AncestorMask& mask, int frames) {
  const int k = mask.token_count();
  const std::size_t n = static_cast<std::size_t>(frames) * k;
  auto m = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
  for (std::size_t qi = 0; qi < n; ++qi)
    for (std::size_t ki = 0; ki < n; ++ki) (*m)[qi * n + ki] = mask.allowed(qi % k, ki % k) ? 1 : 0;
  return m;
}

}  // namespace

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_levels != 3) fail("n_levels must be 3");
  if (base_channels <= 0 || heads <= 0 || groupnorm_groups <= 0) fail("channel settings must be positive");
  if (base_channels % groupnorm_groups != 0) fail("base_channels must be divisible by groupnorm_groups");
  if (base_channels % heads != 0) fail("base_channels must be divisible by heads");
  if (style_count < 1) fail("style_count must be at least 1");
  if (style_embed_dim <= 0 || time_embed_dim <= 0 || trajectory_embed_dim <= 0) fail("embedding sizes must be positive");
  if (time_embed_dim % 2 != 0) fail("time_embed_dim must be even");
  if (frames <= 0 || past_frames < 0) fail("frame counts must be positive");
  if (past_frames > frames) fail("F_past must not exceed F");
  const int div = 1 << (n_levels - 1);
  if ((frames + past_frames) % div != 0) fail("F + F_past must be divisible by " + std::to_string(div));
  if (frames % div != 0) fail("F must be divisible by " + std::to_string(div) + " for the no-past path");
  if (max_depth < 1) fail("max_depth must be positive");
}

Tensor sinusoidal_encoding(const std::vector<double>& positions, int dim) {
  Tensor out({static_cast<int>(positions.size()), dim}, 0.0);
  const int half = dim / 2;
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / dim);
      out.at(static_cast<int>(r), 2 * i) = std::sin(positions[r] * freq);
      out.at(static_cast<int>(r), 2 * i + 1) = std::cos(positions[r] * freq);
    }
  }
  return out;
}

ad::Var film_modulate(const ad::Var& features, const ad::Var& gamma, const ad::Var& beta, int groups) {
  const Shape& s = features->value.shape();
  const int c = s.back();
  if (gamma->value.size() != static_cast<std::size_t>(c) || beta->value.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("film_modulate: " + std::to_string(c) + " channels, gamma " + shape_str(gamma->value.shape()) +
                     " beta " + shape_str(beta->value.shape()));
  }
  Shape bshape(s.size(), 1);
  bshape.back() = c;
  auto h = ad::group_norm(features, groups);
  return ad::add(ad::mul(h, ad::add_scalar(ad::reshape(gamma, bshape), 1.0)), ad::reshape(beta, bshape));
}

ad::Var joint_attention(const ad::Var& grid, const AncestorMask& mask, const AttentionWeights& w, int heads,
                        const ad::Var& token_encoding) {
  if (grid->value.rank() != 3 || grid->value.dim(1) != mask.token_count()) {
    throw ShapeError("joint_attention: grid " + shape_str(grid->value.shape()) + " vs mask of " +
                     std::to_string(mask.token_count()) + " tokens");
  }
  auto qk = token_encoding ? ad::add(grid, token_encoding) : grid;
  auto a = ad::attention(w.q(qk), w.k(qk), w.v(grid), heads, mask.data());
  return ad::add(grid, w.o(a));
}

ad::Var temporal_attention(const ad::Var& grid, const AttentionWeights& w, int heads, const ad::Var& frame_encoding) {
  if (grid->value.rank() != 3) throw ShapeError("temporal_attention: grid must be [T, K, C]");
  auto x = ad::transpose01(grid);
  auto qk = x;
  if (frame_encoding) {
    qk = ad::add(x, ad::reshape(frame_encoding, {1, grid->value.dim(0), grid->value.dim(2)}));
  }
  auto a = ad::attention(w.q(qk), w.k(qk), w.v(x), heads);
  return ad::add(grid, ad::transpose01(w.o(a)));
}

ad::Var trajectory_cross_attention(const ad::Var& grid, const ad::Var& trajectory_tokens, const AttentionWeights& w,
                                   int heads, const ad::Var& grid_frame_encoding,
                                   const ad::Var& trajectory_frame_encoding) {
  const Shape& gs = grid->value.shape();
  const Shape& ts = trajectory_tokens->value.shape();
  if (gs.size() != 3 || ts.size() != 2) {
    throw ShapeError("trajectory_cross_attention: grid " + shape_str(gs) + " trajectory " + shape_str(ts));
  }
  auto q_in = grid;
  if (grid_frame_encoding) q_in = ad::add(q_in, ad::reshape(grid_frame_encoding, {gs[0], 1, gs[2]}));
  auto k_in = trajectory_tokens;
  if (trajectory_frame_encoding) k_in = ad::add(k_in, trajectory_frame_encoding);
  auto q = w.q(ad::reshape(q_in, {1, gs[0] * gs[1], gs[2]}));
  auto k = w.k(ad::reshape(k_in, {1, ts[0], ts[1]}));
  auto v = w.v(ad::reshape(trajectory_tokens, {1, ts[0], ts[1]}));
  auto a = w.o(ad::attention(q, k, v, heads));
  return ad::add(grid, ad::reshape(a, gs));
}

struct Denoiser::Modules {
  Linear root_in;
  Linear joint_in;
  ad::Var flag_table;
  Linear time1;
  Linear time2;
  ad::Var style_table;
  Linear traj1;
  Linear traj2;
  ResBlock enc1, enc2, enc3;
  Conv1d down1, down2;
  AttentionStack enc2_attn, enc3_attn;
  ResBlock dec3, dec2, dec1;
  AttentionStack dec3_attn, dec2_attn;
  Conv1d up2, up1;
  Linear root_out;
  Linear joint_out;
};

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed)
    : config_(config), modules_(std::make_unique<Modules>()) {
  config_.validate();
  Rng rng(seed);
  auto& m = *modules_;
  auto& s = params_;
  const int c1 = config_.base_channels;
  const int c2 = 2 * c1;
  const int c3 = 4 * c1;
  const int cond = config_.time_embed_dim + config_.style_embed_dim;
  const int ct = config_.trajectory_embed_dim;
  const int md = config_.max_depth;
  const bool merged = config_.merged_attention;

  m.root_in = Linear(s, "input.root", 3, c1, rng);
  m.joint_in = Linear(s, "input.joint", 6, c1, rng);
  m.flag_table = s.create("input.frame_flag", normal_tensor({2, c1}, rng));
  m.time1 = Linear(s, "time.fc1", config_.time_embed_dim, config_.time_embed_dim, rng);
  m.time2 = Linear(s, "time.fc2", config_.time_embed_dim, config_.time_embed_dim, rng);
  m.style_table = s.create("style.embedding", normal_tensor({config_.style_count + 1, config_.style_embed_dim}, rng));
  m.traj1 = Linear(s, "trajectory.fc1", kTrajectoryFeatures, ct, rng);
  m.traj2 = Linear(s, "trajectory.fc2", ct, ct, rng);

  m.enc1 = ResBlock(s, "encoder1.res", c1, c1, cond, rng);
  m.down1 = Conv1d(s, "encoder1.down", c1, c1, 2, rng);
  m.enc2 = ResBlock(s, "encoder2.res", c1, c2, cond, rng);
  m.enc2_attn = AttentionStack(s, "encoder2.attn", c2, cond, ct, md, merged, rng);
  m.down2 = Conv1d(s, "encoder2.down", c2, c2, 2, rng);
  m.enc3 = ResBlock(s, "encoder3.res", c2, c3, cond, rng);
  m.enc3_attn = AttentionStack(s, "encoder3.attn", c3, cond, ct, md, merged, rng);

  m.dec3 = ResBlock(s, "decoder3.res", c3, c3, cond, rng);
  m.dec3_attn = AttentionStack(s, "decoder3.attn", c3, cond, ct, md, merged, rng);
  m.up2 = Conv1d(s, "decoder3.up", c3, c3, 1, rng);
  m.dec2 = ResBlock(s, "decoder2.res", c3 + c2, c2, cond, rng);
  m.dec2_attn = AttentionStack(s, "decoder2.attn", c2, cond, ct, md, merged, rng);
  m.up1 = Conv1d(s, "decoder2.up", c2, c2, 1, rng);
  m.dec1 = ResBlock(s, "decoder1.res", c2 + c1, c1, cond, rng);

  m.root_out = Linear(s, "output.root", c1, 3, rng);
  m.joint_out = Linear(s, "output.joint", c1, 6, rng);
}

Denoiser::~Denoiser() = default;
Denoiser::Denoiser(Denoiser&&) noexcept = default;
Denoiser& Denoiser::operator=(Denoiser&&) noexcept = default;

ad::Var Denoiser::style_embedding(const StyleCondition& style) const {
  const int null_row = config_.style_count;
  if (style.is_null()) return ad::gather_rows(modules_->style_table, {null_row});
  double total = 0;
  for (const auto& [id, w] : style.weights) {
    if (id < 0 || id >= config_.style_count) throw ConfigError("unknown style id " + std::to_string(id));
    if (!(w >= 0)) throw ConfigError("style weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ConfigError("style weights must sum to 1");
  return ad::reshape(ad::weighted_rows(modules_->style_table, style.weights), {1, config_.style_embed_dim});
}

Denoiser::Output Denoiser::forward(const DenoiserInput& in, ForwardTrace* trace) const {
  const auto& m = *modules_;
  const auto& cfg = config_;
  if (!in.topology) throw ShapeError("denoiser: missing topology");
  const auto& topo = *in.topology;
  const int joints = topo.joint_count();
  const int frames = cfg.frames;
  const bool has_past = !in.past_root.empty() || !in.past_rot.empty();
  const int past = has_past ? cfg.past_frames : 0;

  auto expect = [](const Tensor& t, const Shape& s, const char* what) {
    if (t.shape() != s) throw ShapeError(std::string("denoiser: ") + what + " is " + shape_str(t.shape()) +
                                         ", expected " + shape_str(s));
  };
  expect(in.noisy_root, {frames, 3}, "noisy root");
  expect(in.noisy_rot, {frames, joints, 6}, "noisy rotations");
  if (has_past) {
    expect(in.past_root, {past, 3}, "past root");
    expect(in.past_rot, {past, joints, 6}, "past rotations");
  }
  expect(in.trajectory.positions, {frames, 2}, "trajectory positions");
  expect(in.trajectory.rotations, {frames, 6}, "trajectory rotations");

  const int length = past + frames;
  const int tokens = joints + 1;
  const int c1 = cfg.base_channels;

  StackContext ctx;
  const AncestorMask mask = build_ancestor_mask(topo);
  ctx.mask = &mask;
  ctx.token_depth.resize(tokens);
  ctx.token_depth[0] = 0;
  for (int j = 0; j < joints; ++j) {
    const int d = topo.depth(j) + 1;
    if (d > cfg.max_depth + 1) throw ConfigError("skeleton depth exceeds model.max_depth");
    ctx.token_depth[j + 1] = d;
  }
  if (cfg.merged_attention) {
    ctx.merged_mask = merged_mask(mask, length / 2);
  }
  ctx.past_frames = past;
  ctx.trace = trace;
  if (trace) {
    *trace = ForwardTrace{};
    trace->tokens = tokens;
  }

  // Conditioning vector shared by every FiLM layer.
  auto t_emb = ad::constant(sinusoidal_encoding({static_cast<double>(in.t)}, cfg.time_embed_dim));
  t_emb = m.time2(ad::silu(m.time1(t_emb)));
  auto cond = ad::silu(ad::concat({t_emb, style_embedding(in.style)}, 1));

  Tensor traj_rows({frames, kTrajectoryFeatures});
  for (int f = 0; f < frames; ++f) {
    for (int k = 0; k < 2; ++k) traj_rows.at(f, k) = in.trajectory.positions.at(f, k);
    for (int k = 0; k < 6; ++k) traj_rows.at(f, 2 + k) = in.trajectory.rotations.at(f, k);
  }
  ctx.trajectory_tokens = m.traj2(ad::silu(m.traj1(ad::constant(std::move(traj_rows)))));
  if (cfg.positional_encoding) {
    std::vector<double> pos(frames);
    for (int f = 0; f < frames; ++f) pos[f] = past + f;
    ctx.trajectory_encoding = ad::constant(sinusoidal_encoding(pos, cfg.trajectory_embed_dim));
  }

  Tensor root_all = has_past ? concat0(in.past_root, in.noisy_root) : in.noisy_root;
  Tensor rot_all = has_past ? concat0(in.past_rot, in.noisy_rot) : in.noisy_rot;
  auto root_tok = ad::reshape(m.root_in(ad::constant(std::move(root_all))), {length, 1, c1});
  auto joint_tok = m.joint_in(ad::constant(std::move(rot_all)));
  auto grid = ad::concat({root_tok, joint_tok}, 1);
  std::vector<int> flags(length, 1);
  for (int f = 0; f < past; ++f) flags[f] = 0;
  grid = ad::add(grid, ad::reshape(ad::gather_rows(m.flag_table, flags), {length, 1, c1}));

  const int g = cfg.groupnorm_groups;
  auto e1 = m.enc1(grid, cond, g);
  auto h = m.down1(e1);
  auto e2 = m.enc2_attn(m.enc2(h, cond, g), cond, 2, cfg, ctx);
  h = m.down2(e2);
  if (cfg.merged_attention) ctx.merged_mask = merged_mask(mask, length / 4);
  auto e3 = m.enc3_attn(m.enc3(h, cond, g), cond, 4, cfg, ctx);

  h = m.dec3_attn(m.dec3(e3, cond, g), cond, 4, cfg, ctx);
  h = m.up2(ad::upsample_time(h, 2));
  if (cfg.merged_attention) ctx.merged_mask = merged_mask(mask, length / 2);
  h = m.dec2_attn(m.dec2(ad::concat({h, e2}, 2), cond, g), cond, 2, cfg, ctx);
  h = m.up1(ad::upsample_time(h, 2));
  h = m.dec1(ad::concat({h, e1}, 2), cond, g);

  if (trace) {
    trace->encoder_lengths = {e1->value.dim(0), e2->value.dim(0), e3->value.dim(0)};
    trace->decoder_lengths = {e3->value.dim(0), e2->value.dim(0), h->value.dim(0)};
  }

  h = ad::slice(ad::silu(ad::group_norm(h, g)), 0, past, frames);
  Output out;
  out.root = m.root_out(ad::reshape(ad::slice(h, 1, 0, 1), {frames, c1}));
  out.rot = m.joint_out(ad::slice(h, 1, 1, joints));
  return out;
}

}  // namespace skeldiff
