#include "consistentid/training.hpp"

#include "consistentid/digest.hpp"
#include "consistentid/errors.hpp"
#include "consistentid/face_parsing.hpp"

#include <cmath>

namespace cid {

std::vector<TrainingExample> examples_from_faces(const std::vector<SyntheticFace>& faces, const Captioner& captioner) {
  std::vector<TrainingExample> out;
  out.reserve(faces.size());
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const auto& f = faces[i];
    const std::string id = face_id(f);
    out.push_back(TrainingExample{id, f.image, f.masks, describe_regions(f.image, f.masks, captioner, id)});
  }
  return out;
}

TrainingConfig TrainingConfig::pretrain_defaults() {
  TrainingConfig c;
  c.lr = 1e-3;
  c.bg_drop_prob = 0.0;
  c.steps = 3000;
  c.trainable_set = TrainableSet::denoiser_only;
  c.prompt_mode = PromptMode::descriptive;
  return c;
}

void TrainingConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must be in [0, 1]");
  };
  prob(bg_drop_prob, "bg_drop_prob");
  prob(zero_text_prob, "zero_text_prob");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
}

nlohmann::json TrainingConfig::to_json() const {
  return {{"lambda", lambda},
          {"lr", lr},
          {"batch_size", batch_size},
          {"bg_drop_prob", bg_drop_prob},
          {"zero_text_prob", zero_text_prob},
          {"steps", steps},
          {"seed", seed},
          {"trainable_set", trainable_set == TrainableSet::denoiser_only ? "denoiser_only" : "consistentid_modules"},
          {"prompt_mode", prompt_mode == PromptMode::descriptive ? "descriptive" : "fixed_phrase"}};
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j, TrainingConfig c) {
  if (!j.is_object()) throw ConfigError("training: expected an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "lambda") c.lambda = v.get<double>();
      else if (k == "lr") c.lr = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "bg_drop_prob") c.bg_drop_prob = v.get<double>();
      else if (k == "zero_text_prob") c.zero_text_prob = v.get<double>();
      else if (k == "steps") c.steps = v.get<int>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "trainable_set") {
        const auto s = v.get<std::string>();
        if (s == "denoiser_only") c.trainable_set = TrainableSet::denoiser_only;
        else if (s == "consistentid_modules") c.trainable_set = TrainableSet::consistentid_modules;
        else throw ConfigError("training.trainable_set: unknown value '" + s + "'");
      } else if (k == "prompt_mode") {
        const auto s = v.get<std::string>();
        if (s == "descriptive") c.prompt_mode = PromptMode::descriptive;
        else if (s == "fixed_phrase") c.prompt_mode = PromptMode::fixed_phrase;
        else throw ConfigError("training.prompt_mode: unknown value '" + s + "'");
      } else {
        throw ConfigError("training: unknown key '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
  c.validate();
  return c;
}

void Adam::step(const std::vector<ad::Parameter*>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, t_);
  const double c2 = 1.0 - std::pow(beta2, t_);
  for (ad::Parameter* p : params) {
    if (!p->trainable) continue;
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    auto [it, inserted] = moments_.try_emplace(p->name);
    auto& [m, v] = it->second;
    if (inserted) {
      m = ad::Matrix::Zero(p->value.rows(), p->value.cols());
      v = ad::Matrix::Zero(p->value.rows(), p->value.cols());
    }
    m = beta1 * m + (1.0 - beta1) * p->grad;
    v = beta2 * v + (1.0 - beta2) * p->grad.cwiseAbs2();
    p->value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    p->zero_grad();
  }
}

nlohmann::json LossRecord::to_json() const {
  return {{"step", step},
          {"l_noise", loss.l_noise},
          {"l_facial", loss.l_facial},
          {"l_total", loss.l_total},
          {"lambda", loss.lambda},
          {"skipped_regions", skipped_regions}};
}

Checkpoint TrainState::to_checkpoint(const TrainingConfig& config) const {
  Checkpoint c;
  c.module = "train_state";
  c.seed = config.seed;
  nlohmann::json log_json = nlohmann::json::array();
  for (const auto& r : log) log_json.push_back(r.to_json());
  c.config = {{"step", step}, {"adam_t", optimizer.steps_taken()}, {"training", config.to_json()}, {"log", log_json}};
  for (const auto& [name, mv] : optimizer.moments()) {
    c.tensors.emplace_back("m:" + name, mv.first);
    c.tensors.emplace_back("v:" + name, mv.second);
  }
  return c;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.module != "train_state") throw CheckpointMismatch("expected a train_state checkpoint, got '" + ckpt.module + "'");
  TrainState s;
  try {
    s.step = ckpt.config.at("step").get<int>();
    s.optimizer.set_steps_taken(ckpt.config.at("adam_t").get<int>());
    for (const auto& r : ckpt.config.at("log")) {
      LossRecord rec;
      rec.step = r.at("step").get<int>();
      rec.loss = LossBreakdown{r.at("l_noise").get<double>(), r.at("l_facial").get<double>(),
                               r.at("l_total").get<double>(), r.at("lambda").get<double>()};
      rec.skipped_regions = r.at("skipped_regions").get<int>();
      s.log.push_back(rec);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("train_state header: ") + e.what());
  }
  for (const auto& [name, m] : ckpt.tensors) {
    const bool is_m = name.rfind("m:", 0) == 0;
    const bool is_v = name.rfind("v:", 0) == 0;
    if (!is_m && !is_v) throw CheckpointMismatch("unexpected train_state tensor '" + name + "'");
    auto& slot = s.optimizer.moments()[name.substr(2)];
    (is_m ? slot.first : slot.second) = m;
  }
  return s;
}

SampleDraw draw_sample(const TrainingConfig& config, int step, int sample, int n_examples, const LatentShape& shape,
                       int timesteps) {
  if (n_examples < 1) throw ConfigError("training data is empty");
  Rng rng(derive_seed({config.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(sample)}));
  SampleDraw d;
  d.example = rng.uniform_int(0, n_examples - 1);
  d.drop_background = rng.bernoulli(config.bg_drop_prob);
  d.zero_text = rng.bernoulli(config.zero_text_prob);
  d.t = rng.uniform_int(1, timesteps);
  d.eps.resize(static_cast<Eigen::Index>(shape.height) * shape.width, shape.channels);
  for (Eigen::Index i = 0; i < d.eps.size(); ++i) d.eps.data()[i] = rng.normal();
  return d;
}

Image fill_background(const Image& image, const Mask& face_mask) {
  if (face_mask.height != image.height || face_mask.width != image.width) {
    throw ShapeError("fill_background: mask/image size mismatch");
  }
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (face_mask.at(y, x)) continue;
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = kNeutralGray;
    }
  }
  return out;
}

Image apply_background_dropout(const Image& image, const Mask& face_mask, Rng& rng, double bg_drop_prob) {
  return rng.bernoulli(bg_drop_prob) ? fill_background(image, face_mask) : image;
}

MultimodalPrompt training_prompt(const TrainingExample& example, PromptMode mode) {
  if (mode == PromptMode::descriptive) return substitute_delimiters(example.descriptions, example.masks.presence);
  const RegionDescriptions fixed = FixedPhraseCaptioner{}.describe(example.image, example.masks, example.image_id);
  return substitute_delimiters(fixed, example.masks.presence);
}

std::string base_fingerprint(const Models& models) {
  Checkpoint c;
  c.add(models.text.table);
  for (const auto* p : models.denoiser.parameters()) c.add(*p);
  return sha256_hex(c.serialize());
}

namespace {

void check_finite(double v, int step) {
  if (!std::isfinite(v)) throw DivergenceError("loss became non-finite at step " + std::to_string(step));
}

std::vector<ad::Parameter*> concat(std::vector<ad::Parameter*> a, const std::vector<ad::Parameter*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct StageBCache {
  std::vector<ad::Matrix> z0;
  std::vector<MultimodalPrompt> prompts;
  std::vector<ad::Matrix> text;
  std::vector<FacialInputs> inputs;
};

StageBCache build_cache(const Models& models, const std::vector<TrainingExample>& data, PromptMode mode) {
  const Encoders encoders = Encoders::create(models.config.encoders);
  StageBCache c;
  for (const auto& ex : data) {
    c.z0.push_back(encode_latent(ex.image));
    c.prompts.push_back(training_prompt(ex, mode));
    c.text.push_back(encode_text(c.prompts.back(), models.text));
    c.inputs.push_back(facial_inputs(ex.image, ex.masks, encoders));
  }
  return c;
}

}  // namespace

TrainState pretrain_denoiser(Models& models, const std::vector<TrainingExample>& data, const TrainingConfig& config,
                             TrainState state, const TrainingHooks& hooks) {
  config.validate();
  if (config.trainable_set != TrainableSet::denoiser_only) {
    throw ConfigError("pretrain_denoiser requires trainable_set = denoiser_only");
  }
  if (data.empty()) throw ConfigError("training data is empty");
  models.denoiser.set_trainable(true);
  models.text.table.trainable = true;
  const auto params = concat(models.denoiser.parameters(), models.text.parameters());
  for (auto* p : params) p->zero_grad();
  state.optimizer.lr = config.lr;

  std::vector<ad::Matrix> z0;
  std::vector<MultimodalPrompt> prompts;
  for (const auto& ex : data) {
    z0.push_back(encode_latent(ex.image));
    prompts.push_back(compose_prompt(ex.descriptions, ex.masks.presence));
  }
  const NoiseSchedule schedule(models.config.timesteps);
  const auto& shape = models.denoiser.config.latent;
  const int L = models.config.text.max_length;
  const int D = models.config.text.embed_dim;

  for (; state.step < config.steps; ++state.step) {
    double l_noise = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const SampleDraw d = draw_sample(config, state.step, b, static_cast<int>(data.size()), shape, schedule.timesteps());
      const auto e = static_cast<std::size_t>(d.example);
      const ad::Matrix& base = z0[e];
      const ad::Matrix target =
          d.drop_background ? encode_latent(fill_background(data[e].image, data[e].masks.union_mask())) : base;
      ad::Tape tape;
      ad::Var ctx = d.zero_text ? tape.constant(ad::Matrix::Zero(L, D)) : encode_text(tape, prompts[e], models.text);
      if (hooks.on_condition) hooks.on_condition(state.step, b, ctx.value());
      const auto out = denoise(tape, models.denoiser, tape.constant(add_noise(target, d.t, d.eps, schedule)), d.t, ctx);
      ad::Var ln = noise_loss(tape.constant(d.eps), out.eps);
      l_noise += ln.value()(0, 0);
      tape.backward(ad::scale(ln, 1.0 / config.batch_size));
    }
    l_noise /= config.batch_size;
    check_finite(l_noise, state.step);
    state.optimizer.step(params);
    LossRecord rec{state.step, total_loss(l_noise, 0.0, 0.0), 0};
    state.log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
  }
  return state;
}

TrainState train_consistentid(Models& models, const std::vector<TrainingExample>& data, const TrainingConfig& config,
                              TrainState state, const TrainingHooks& hooks) {
  config.validate();
  if (config.trainable_set != TrainableSet::consistentid_modules) {
    throw ConfigError("train_consistentid requires trainable_set = consistentid_modules");
  }
  if (data.empty()) throw ConfigError("training data is empty");
  if (!models.facial) models.facial = FacialEncoder::create(models.config.facial, derive_seed({models.seed, 3}));
  models.denoiser.set_trainable(false);
  models.text.table.trainable = false;
  const std::string frozen_before = base_fingerprint(models);

  FacialEncoder& facial = *models.facial;
  const auto params = facial.parameters();
  for (auto* p : params) {
    p->trainable = true;
    p->zero_grad();
  }
  state.optimizer.lr = config.lr;

  const StageBCache cache = build_cache(models, data, config.prompt_mode);
  const NoiseSchedule schedule(models.config.timesteps);
  const auto& shape = models.denoiser.config.latent;
  const int L = models.config.text.max_length;
  const int D = models.config.text.embed_dim;

  for (; state.step < config.steps; ++state.step) {
    std::vector<SampleDraw> draws;
    int with_text = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      draws.push_back(draw_sample(config, state.step, b, static_cast<int>(data.size()), shape, schedule.timesteps()));
      if (!draws.back().zero_text) ++with_text;
    }
    double l_noise = 0.0;
    double l_facial = 0.0;
    int skipped = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      const SampleDraw& d = draws[static_cast<std::size_t>(b)];
      const auto e = static_cast<std::size_t>(d.example);
      const ad::Matrix target =
          d.drop_background ? encode_latent(fill_background(data[e].image, data[e].masks.union_mask())) : cache.z0[e];
      ad::Tape tape;
      ad::Var ctx = d.zero_text ? tape.constant(ad::Matrix::Zero(L + 1, D))
                                : build_condition(tape, tape.constant(cache.text[e]), cache.prompts[e], cache.inputs[e], facial);
      if (hooks.on_condition) hooks.on_condition(state.step, b, ctx.value());
      const auto out =
          denoise(tape, models.denoiser, tape.constant(add_noise(target, d.t, d.eps, schedule)), d.t, ctx, !d.zero_text);
      ad::Var ln = noise_loss(tape.constant(d.eps), out.eps);
      l_noise += ln.value()(0, 0);
      ad::Var objective = ad::scale(ln, 1.0 / config.batch_size);
      if (!d.zero_text) {
        const auto tokens = facial_tokens(cache.prompts[e].facial_positions, cache.prompts[e].facial_regions);
        const FacialLoss fl = facial_attention_loss(tape, out.maps, data[e].masks, tokens);
        skipped += fl.skipped;
        l_facial += fl.value.value()(0, 0);
        if (config.lambda > 0.0) objective = ad::add(objective, ad::scale(fl.value, config.lambda / with_text));
      }
      tape.backward(objective);
    }
    l_noise /= config.batch_size;
    if (with_text > 0) l_facial /= with_text;
    const LossBreakdown loss = total_loss(l_noise, l_facial, config.lambda);
    check_finite(loss.l_total, state.step);
    state.optimizer.step(params);
    LossRecord rec{state.step, loss, skipped};
    state.log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
  }

  if (base_fingerprint(models) != frozen_before) {
    throw FrozenViolation("base model parameters changed during ConsistentID training");
  }
  return state;
}

double heldout_noise_loss(const Models& models, const std::vector<TrainingExample>& data, std::uint64_t seed,
                          int draws) {
  if (data.empty() || draws < 1) return 0.0;
  TrainingConfig cfg;
  cfg.seed = seed;
  cfg.zero_text_prob = 0.0;
  cfg.bg_drop_prob = 0.0;
  const NoiseSchedule schedule(models.config.timesteps);
  double acc = 0.0;
  for (int i = 0; i < draws; ++i) {
    const SampleDraw d =
        draw_sample(cfg, -1, i, static_cast<int>(data.size()), models.denoiser.config.latent, schedule.timesteps());
    const auto& ex = data[static_cast<std::size_t>(d.example)];
    const ad::Matrix ctx = encode_text(compose_prompt(ex.descriptions, ex.masks.presence), models.text);
    const ad::Matrix zt = add_noise(encode_latent(ex.image), d.t, d.eps, schedule);
    acc += noise_loss(d.eps, denoise_eps(models.denoiser, zt, d.t, ctx));
  }
  return acc / draws;
}

LocalizationStats evaluate_localization(const Models& models, const std::vector<TrainingExample>& data,
                                        const TrainingConfig& config, std::uint64_t seed, int draws) {
  if (!models.facial) throw CheckpointMismatch("localization needs a facial encoder");
  if (data.empty() || draws < 1) return {};
  TrainingConfig cfg = config;
  cfg.seed = seed;
  cfg.zero_text_prob = 0.0;
  cfg.bg_drop_prob = 0.0;
  const Encoders encoders = Encoders::create(models.config.encoders);
  const NoiseSchedule schedule(models.config.timesteps);
  auto& m = const_cast<Models&>(models);  // no-grad tapes leave parameters untouched
  LocalizationStats s;
  for (int i = 0; i < draws; ++i) {
    const SampleDraw d =
        draw_sample(cfg, -1, i, static_cast<int>(data.size()), models.denoiser.config.latent, schedule.timesteps());
    const auto& ex = data[static_cast<std::size_t>(d.example)];
    const MultimodalPrompt prompt = training_prompt(ex, cfg.prompt_mode);
    const FacialInputs inputs = facial_inputs(ex.image, ex.masks, encoders);
    ad::Tape tape(false);
    ad::Var ctx = build_condition(tape, tape.constant(encode_text(prompt, models.text)), prompt, inputs, *m.facial);
    const ad::Matrix zt = add_noise(encode_latent(ex.image), d.t, d.eps, schedule);
    const auto out = denoise(tape, m.denoiser, tape.constant(zt), d.t, ctx, true);
    const auto tokens = facial_tokens(prompt.facial_positions, prompt.facial_regions);
    std::vector<PlainMap> maps;
    for (const auto& map : out.maps) maps.push_back(PlainMap{map.height, map.width, map.probs.value()});
    s.l_facial += facial_attention_loss(maps, ex.masks, tokens);
    s.mass_in_masks += attention_mass_in_masks(maps, ex.masks, tokens);
  }
  s.l_facial /= draws;
  s.mass_in_masks /= draws;
  return s;
}

}  // namespace cid
