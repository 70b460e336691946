#include "consistentid/toy_diffusion.hpp"

#include "consistentid/errors.hpp"
#include "consistentid/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cid {

NoiseSchedule::NoiseSchedule(int timesteps) {
  if (timesteps < 1) throw ConfigError("noise schedule needs at least one timestep");
  constexpr double s = 0.008;
  auto f = [&](double t) {
    const double c = std::cos((t / timesteps + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  alpha_bar_.resize(static_cast<std::size_t>(timesteps) + 1);
  alpha_bar_[0] = 1.0;
  for (int t = 1; t <= timesteps; ++t) {
    const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
    alpha_bar_[static_cast<std::size_t>(t)] = alpha_bar_[static_cast<std::size_t>(t - 1)] * (1.0 - beta);
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > timesteps()) {
    throw TimestepError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(timesteps()) + "]");
  }
  return alpha_bar_[static_cast<std::size_t>(t)];
}

namespace {

constexpr int kF = BlockAutoencoder::kFactor;

// +-1 checkerboard over a block, normalized so encode(decode(c)) == c.
double detail_pattern(int y, int x) { return ((y + x) % 2 == 0) ? 1.0 : -1.0; }

}  // namespace

ad::Matrix BlockAutoencoder::encode(const Image& image) const {
  if (image.channels != 3 || image.height % kF != 0 || image.width % kF != 0) {
    throw ShapeError("encode_latent: expected an RGB image with sides divisible by " + std::to_string(kF));
  }
  const int lh = image.height / kF;
  const int lw = image.width / kF;
  ad::Matrix z = ad::Matrix::Zero(static_cast<Eigen::Index>(lh) * lw, 4);
  const double inv = 1.0 / (kF * kF);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const Eigen::Index r = static_cast<Eigen::Index>(y / kF) * lw + x / kF;
      double lum = 0.0;
      for (int c = 0; c < 3; ++c) {
        z(r, c) += kScale * inv * image.at(y, x, c);
        lum += image.at(y, x, c);
      }
      z(r, 3) += kScale * inv * detail_pattern(y, x) * lum / 3.0;
    }
  }
  return z;
}

Image BlockAutoencoder::decode(const ad::Matrix& latent, int latent_height, int latent_width) const {
  if (latent.rows() != static_cast<Eigen::Index>(latent_height) * latent_width || latent.cols() != 4) {
    throw ShapeError("decode_latent: expected a " + std::to_string(latent_height * latent_width) + "x4 latent");
  }
  Image img(latent_height * kF, latent_width * kF, 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const Eigen::Index r = static_cast<Eigen::Index>(y / kF) * latent_width + x / kF;
      const double detail = detail_pattern(y, x) * latent(r, 3);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (latent(r, c) + detail) / kScale;
    }
  }
  return img;
}

ad::Matrix BlockAutoencoder::clamp_to_range(const ad::Matrix& latent) {
  if (latent.cols() != 4) throw ShapeError("clamp_to_range: expected 4 latent channels");
  ad::Matrix out(latent.rows(), 4);
  out.leftCols(3) = latent.leftCols(3).cwiseMax(0.0).cwiseMin(kScale);
  out.col(3) = latent.col(3).cwiseMax(-0.5 * kScale).cwiseMin(0.5 * kScale);
  return out;
}

ad::Matrix encode_latent(const Image& image) { return BlockAutoencoder{}.encode(image); }

Image decode_latent(const ad::Matrix& latent, int latent_height, int latent_width) {
  return BlockAutoencoder{}.decode(latent, latent_height, latent_width);
}

ad::Matrix add_noise(const ad::Matrix& z0, int t, const ad::Matrix& eps, const NoiseSchedule& schedule) {
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw ShapeError("add_noise: noise shape differs from latent");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

namespace {

ad::Parameter gaussian(std::string name, int rows, int cols, double stddev, Rng& rng) {
  ad::Parameter p;
  p.name = std::move(name);
  p.value.resize(rows, cols);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = stddev * rng.normal();
  p.zero_grad();
  return p;
}

ad::Parameter zeros(std::string name, int rows, int cols) {
  ad::Parameter p;
  p.name = std::move(name);
  p.value = ad::Matrix::Zero(rows, cols);
  p.zero_grad();
  return p;
}

ad::Parameter conv(std::string name, int cin, int cout, Rng& rng, double gain = 1.0) {
  return gaussian(std::move(name), 9 * cin, cout, gain * std::sqrt(2.0 / (9.0 * cin)), rng);
}

constexpr int kTimeHidden = 64;

ad::Matrix timestep_features(int t, int dim) {
  ad::Matrix f(1, dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(1000.0) * i / std::max(1, half - 1));
    f(0, i) = std::sin(t * freq);
    f(0, half + i) = std::cos(t * freq);
  }
  return f;
}

ad::Matrix coordinates(int height, int width) {
  ad::Matrix c(static_cast<Eigen::Index>(height) * width, 2);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      c(static_cast<Eigen::Index>(y) * width + x, 0) = (2.0 * x + 1.0) / width - 1.0;
      c(static_cast<Eigen::Index>(y) * width + x, 1) = (2.0 * y + 1.0) / height - 1.0;
    }
  }
  return c;
}

ad::Var cross_attention(ad::Tape& t, const ad::Var& h, const ad::Var& context, ad::Parameter& wq, ad::Parameter& wk,
                        ad::Parameter& wv, ad::Parameter& wo, ad::Var* probs_out) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(wq.value.cols()));
  ad::Var q = ad::matmul(h, t.param(wq));
  ad::Var k = ad::matmul(context, t.param(wk));
  ad::Var v = ad::matmul(context, t.param(wv));
  ad::Var p = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv));
  if (probs_out) *probs_out = p;
  return ad::add(h, ad::matmul(ad::matmul(p, v), t.param(wo)));
}

ad::Var conv_block(ad::Tape& t, const ad::Var& x, int height, int width, ad::Parameter& w, ad::Parameter& b) {
  return ad::conv3x3(x, height, width, t.param(w), t.param(b));
}

}  // namespace

Denoiser Denoiser::create(const DenoiserConfig& config, std::uint64_t seed) {
  if (config.latent.height % 2 != 0 || config.latent.width % 2 != 0) throw ConfigError("latent sides must be even");
  Rng rng(derive_seed({seed, 0x64656e6fULL}));
  const int c1 = config.channels1;
  const int c2 = config.channels2;
  const int a = config.attention_dim;
  const int d = config.context_dim;
  const int cin = config.latent.channels + 2;
  Denoiser n;
  n.config = config;
  n.t_w1 = gaussian("den.t_w1", config.time_dim, kTimeHidden, 1.0 / std::sqrt(config.time_dim), rng);
  n.t_b1 = zeros("den.t_b1", 1, kTimeHidden);
  n.t_w2 = gaussian("den.t_w2", kTimeHidden, kTimeHidden, 1.0 / std::sqrt(kTimeHidden), rng);
  n.t_b2 = zeros("den.t_b2", 1, kTimeHidden);
  n.c1a_w = conv("den.c1a_w", cin, c1, rng);
  n.c1a_b = zeros("den.c1a_b", 1, c1);
  n.c1a_t = gaussian("den.c1a_t", kTimeHidden, c1, 1.0 / std::sqrt(kTimeHidden), rng);
  n.c1b_w = conv("den.c1b_w", c1, c1, rng);
  n.c1b_b = zeros("den.c1b_b", 1, c1);
  n.a1_q = gaussian("den.a1_q", c1, a, 1.0 / std::sqrt(c1), rng);
  n.a1_k = gaussian("den.a1_k", d, a, 1.0 / std::sqrt(d), rng);
  n.a1_v = gaussian("den.a1_v", d, a, 1.0 / std::sqrt(d), rng);
  n.a1_o = gaussian("den.a1_o", a, c1, 1.0 / std::sqrt(a), rng);
  n.c2a_w = conv("den.c2a_w", c1, c2, rng);
  n.c2a_b = zeros("den.c2a_b", 1, c2);
  n.c2a_t = gaussian("den.c2a_t", kTimeHidden, c2, 1.0 / std::sqrt(kTimeHidden), rng);
  n.c2b_w = conv("den.c2b_w", c2, c2, rng);
  n.c2b_b = zeros("den.c2b_b", 1, c2);
  n.a2_q = gaussian("den.a2_q", c2, a, 1.0 / std::sqrt(c2), rng);
  n.a2_k = gaussian("den.a2_k", d, a, 1.0 / std::sqrt(d), rng);
  n.a2_v = gaussian("den.a2_v", d, a, 1.0 / std::sqrt(d), rng);
  n.a2_o = gaussian("den.a2_o", a, c2, 1.0 / std::sqrt(a), rng);
  n.c3_w = conv("den.c3_w", c1 + c2, c1, rng);
  n.c3_b = zeros("den.c3_b", 1, c1);
  n.c3_t = gaussian("den.c3_t", kTimeHidden, c1, 1.0 / std::sqrt(kTimeHidden), rng);
  n.out_w = conv("den.out_w", c1, config.latent.channels, rng, 0.1);
  n.out_b = zeros("den.out_b", 1, config.latent.channels);
  return n;
}

std::vector<ad::Parameter*> Denoiser::parameters() {
  return {&t_w1,  &t_b1,  &t_w2,  &t_b2,  &c1a_w, &c1a_b, &c1a_t, &c1b_w, &c1b_b, &a1_q,  &a1_k,  &a1_v,
          &a1_o,  &c2a_w, &c2a_b, &c2a_t, &c2b_w, &c2b_b, &a2_q,  &a2_k,  &a2_v,  &a2_o,  &c3_w,  &c3_b,
          &c3_t,  &out_w, &out_b};
}

std::vector<const ad::Parameter*> Denoiser::parameters() const {
  auto ps = const_cast<Denoiser*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

void Denoiser::set_trainable(bool trainable) {
  for (auto* p : parameters()) p->trainable = trainable;
}

DenoiserOutput denoise(ad::Tape& t, Denoiser& n, const ad::Var& z_t, int timestep, const ad::Var& context,
                       bool collect_maps) {
  const auto& cfg = n.config;
  const int H = cfg.latent.height;
  const int W = cfg.latent.width;
  if (z_t.rows() != static_cast<Eigen::Index>(H) * W || z_t.cols() != cfg.latent.channels) {
    throw ShapeError("denoise: latent must be " + std::to_string(H * W) + "x" + std::to_string(cfg.latent.channels));
  }
  if (context.cols() != cfg.context_dim || context.rows() < 1) {
    throw ShapeError("denoise: context must be n x " + std::to_string(cfg.context_dim));
  }
  if (timestep < 0) throw TimestepError("denoise: negative timestep");

  ad::Var temb = ad::add_row(ad::matmul(t.constant(timestep_features(timestep, cfg.time_dim)), t.param(n.t_w1)),
                             t.param(n.t_b1));
  temb = ad::silu(ad::add_row(ad::matmul(ad::silu(temb), t.param(n.t_w2)), t.param(n.t_b2)));

  ad::Var x = ad::concat_cols(z_t, t.constant(coordinates(H, W)));
  ad::Var h1 = ad::silu(ad::add_row(conv_block(t, x, H, W, n.c1a_w, n.c1a_b), ad::matmul(temb, t.param(n.c1a_t))));
  h1 = ad::silu(conv_block(t, h1, H, W, n.c1b_w, n.c1b_b));
  DenoiserOutput out;
  ad::Var p1, p2;
  h1 = cross_attention(t, h1, context, n.a1_q, n.a1_k, n.a1_v, n.a1_o, collect_maps ? &p1 : nullptr);

  ad::Var d = ad::avg_pool2(h1, H, W);
  ad::Var h2 =
      ad::silu(ad::add_row(conv_block(t, d, H / 2, W / 2, n.c2a_w, n.c2a_b), ad::matmul(temb, t.param(n.c2a_t))));
  h2 = ad::silu(conv_block(t, h2, H / 2, W / 2, n.c2b_w, n.c2b_b));
  h2 = cross_attention(t, h2, context, n.a2_q, n.a2_k, n.a2_v, n.a2_o, collect_maps ? &p2 : nullptr);

  ad::Var u = ad::concat_cols(ad::upsample2(h2, H / 2, W / 2), h1);
  ad::Var h3 = ad::silu(ad::add_row(conv_block(t, u, H, W, n.c3_w, n.c3_b), ad::matmul(temb, t.param(n.c3_t))));
  out.eps = conv_block(t, h3, H, W, n.out_w, n.out_b);
  if (collect_maps) {
    out.maps.push_back(CrossAttentionMap{0, 0, H, W, p1});
    out.maps.push_back(CrossAttentionMap{1, 0, H / 2, W / 2, p2});
  }
  return out;
}

ad::Matrix denoise_eps(const Denoiser& denoiser, const ad::Matrix& z_t, int t, const ad::Matrix& context) {
  ad::Tape tape(false);
  auto& n = const_cast<Denoiser&>(denoiser);  // a no-grad tape never writes to parameters
  return denoise(tape, n, tape.constant(z_t), t, tape.constant(context)).eps.value();
}

ad::Matrix cfg_combine(const ad::Matrix& eps_cond, const ad::Matrix& eps_uncond, double guidance_scale) {
  if (eps_cond.rows() != eps_uncond.rows() || eps_cond.cols() != eps_uncond.cols()) {
    throw ShapeError("cfg_combine: branch shapes differ");
  }
  return eps_cond + (guidance_scale - 1.0) * (eps_cond - eps_uncond);
}

ad::Matrix ddim_step(const ad::Matrix& z_t, const ad::Matrix& eps_hat, int t, int t_prev, const NoiseSchedule& schedule,
                     bool clip_x0) {
  if (t_prev > t) throw TimestepError("ddim_step: t_prev must not exceed t");
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  ad::Matrix x0 = (z_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
  if (!clip_x0) return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_hat;
  x0 = BlockAutoencoder::clamp_to_range(x0);
  if (ab >= 1.0) return x0;
  const ad::Matrix eps = (z_t - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
  return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
}

std::vector<int> ddim_timesteps(int steps, int train_timesteps) {
  if (steps < 1 || steps > train_timesteps) {
    throw ConfigError("steps must be in [1, " + std::to_string(train_timesteps) + "], got " + std::to_string(steps));
  }
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) ts.push_back((steps - i) * train_timesteps / steps - 1);
  return ts;
}

ad::Matrix initial_noise(const LatentShape& shape, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x6e6f697365ULL}));
  ad::Matrix z(static_cast<Eigen::Index>(shape.height) * shape.width, shape.channels);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
  return z;
}

ad::Matrix sample_latent(const Denoiser& denoiser, const NoiseSchedule& schedule, const StepConditions& conditions,
                         const SamplerConfig& config, const std::function<void(int, const ad::Matrix&)>& on_step_eps) {
  if (config.guidance_scale < 0.0) throw ConfigError("guidance_scale must be >= 0");
  if (config.merge_step < 0 || config.merge_step > config.steps) {
    throw ConfigError("merge_step must be in [0, " + std::to_string(config.steps) + "], got " +
                      std::to_string(config.merge_step));
  }
  const auto ts = ddim_timesteps(config.steps, schedule.timesteps());
  ad::Matrix z = initial_noise(denoiser.config.latent, config.seed);
  const ad::Matrix uncond = ad::Matrix::Zero(1, denoiser.config.context_dim);
  for (int i = 0; i < config.steps; ++i) {
    const int t = ts[static_cast<std::size_t>(i)];
    const int t_prev = i + 1 < config.steps ? ts[static_cast<std::size_t>(i + 1)] : 0;
    const ad::Matrix& ctx = i < config.merge_step ? conditions.before : conditions.after;
    const ad::Matrix eps_c = denoise_eps(denoiser, z, t, ctx);
    const ad::Matrix eps_u = denoise_eps(denoiser, z, t, uncond);
    const ad::Matrix eps = cfg_combine(eps_c, eps_u, config.guidance_scale);
    if (on_step_eps) on_step_eps(i, eps);
    z = ddim_step(z, eps, t, t_prev, schedule);
  }
  return z;
}

Image sample(const Denoiser& denoiser, const NoiseSchedule& schedule, const StepConditions& conditions,
             const SamplerConfig& config) {
  Image img = decode_latent(sample_latent(denoiser, schedule, conditions, config), denoiser.config.latent.height,
                            denoiser.config.latent.width);
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace cid
