#include "consistentid/errors.hpp"
#include "consistentid/training.hpp"
#include "small_models.hpp"

#include <doctest.h>

#include <limits>

using namespace cid;
using namespace cid::testing;

namespace {

Models pretrained(const std::vector<TrainingExample>& data, int steps = 2) {
  Models m = Models::create(small_config(), 0);
  pretrain_denoiser(m, data, small_training(TrainableSet::denoiser_only, steps));
  return m;
}

}  // namespace

TEST_CASE("training config validates ranges and rejects unknown keys") {
  TrainingConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(TrainingConfig::from_json(c.to_json(), TrainingConfig::pretrain_defaults()).to_json() == c.to_json());
  CHECK(TrainingConfig::from_json({{"lr", 0.5}}, c).lr == 0.5);
  CHECK_THROWS_AS(TrainingConfig::from_json({{"learning_rate", 0.5}}, c), ConfigError);
  CHECK_THROWS_AS(TrainingConfig::from_json({{"bg_drop_prob", 1.5}}, c), ConfigError);
  CHECK_THROWS_AS(TrainingConfig::from_json({{"trainable_set", "all"}}, c), ConfigError);
  CHECK_THROWS_AS(TrainingConfig::from_json({{"steps", "many"}}, c), ConfigError);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const TrainingConfig a = TrainingConfig::pretrain_defaults();
  CHECK(a.trainable_set == TrainableSet::denoiser_only);
  CHECK(a.bg_drop_prob == 0.0);
}

TEST_CASE("sample draws are a pure function of seed, step and sample") {
  TrainingConfig c;
  const LatentShape shape;
  const SampleDraw a = draw_sample(c, 3, 1, 10, shape, 100);
  const SampleDraw b = draw_sample(c, 3, 1, 10, shape, 100);
  CHECK(a.example == b.example);
  CHECK(a.t == b.t);
  CHECK(a.eps == b.eps);
  CHECK(draw_sample(c, 3, 2, 10, shape, 100).eps != a.eps);
  c.seed = 1;
  CHECK(draw_sample(c, 3, 1, 10, shape, 100).eps != a.eps);
  CHECK_THROWS_AS(draw_sample(c, 0, 0, 0, shape, 100), ConfigError);
}

TEST_CASE("augmentation rates match the configured probabilities") {
  const TrainingConfig c;  // bg 0.5, zero text 0.1
  const LatentShape shape{1, 1, 1};
  const int n = 10000;
  int bg = 0, zt = 0, t_min = 1000, t_max = 0;
  for (int i = 0; i < n; ++i) {
    const SampleDraw d = draw_sample(c, i / 16, i % 16, 8, shape, 100);
    bg += d.drop_background;
    zt += d.zero_text;
    t_min = std::min(t_min, d.t);
    t_max = std::max(t_max, d.t);
  }
  CHECK(std::abs(bg / double(n) - 0.5) <= 0.02);
  CHECK(std::abs(zt / double(n) - 0.1) <= 0.02);
  CHECK(t_min == 1);
  CHECK(t_max == 100);

  const auto face = build_corpus(1, 1, 3)[0];
  Rng rng(11);
  int dropped = 0;
  for (int i = 0; i < n; ++i) {
    dropped += apply_background_dropout(face.image, face.masks.union_mask(), rng, 0.5).data != face.image.data;
  }
  CHECK(std::abs(dropped / double(n) - 0.5) <= 0.02);
}

TEST_CASE("background fill keeps face pixels and grays the rest") {
  const auto face = build_corpus(1, 1, 4)[0];
  const Mask m = face.masks.union_mask();
  const Image out = fill_background(face.image, m);
  int inside = 0;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        if (m.at(y, x)) {
          CHECK(out.at(y, x, c) == face.image.at(y, x, c));
        } else {
          CHECK(out.at(y, x, c) == kNeutralGray);
        }
      }
      inside += m.at(y, x);
    }
  }
  CHECK(inside > 0);
  CHECK_THROWS_AS(fill_background(face.image, Mask(32, 32)), ShapeError);
}

TEST_CASE("background dropout at probability 0 and 1") {
  const auto face = build_corpus(1, 1, 5)[0];
  const Mask m = face.masks.union_mask();
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    CHECK(apply_background_dropout(face.image, m, rng, 0.0).data == face.image.data);
    CHECK(apply_background_dropout(face.image, m, rng, 1.0).data == fill_background(face.image, m).data);
  }
}

TEST_CASE("adam moves trainable parameters only and zeroes grads") {
  ad::Parameter a{"a", ad::Matrix::Ones(2, 2)};
  ad::Parameter b{"b", ad::Matrix::Ones(2, 2)};
  b.trainable = false;
  a.grad = ad::Matrix::Constant(2, 2, 3.0);
  b.grad = ad::Matrix::Constant(2, 2, 3.0);
  Adam opt;
  opt.lr = 0.1;
  opt.step({&a, &b});
  // first bias-corrected step is lr * sign(g)
  CHECK(a.value(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(b.value == ad::Matrix::Ones(2, 2));
  CHECK(a.grad.isZero());
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("zero-step training leaves the models at initialisation") {
  const auto data = small_data();
  Models m = Models::create(small_config(), 0);
  const std::string init = m.checksum();
  const TrainState s = pretrain_denoiser(m, data, small_training(TrainableSet::denoiser_only, 0));
  CHECK(s.step == 0);
  CHECK(s.log.empty());
  CHECK(m.checksum() == init);
}

TEST_CASE("pretraining updates the base model and replays deterministically") {
  const auto data = small_data();
  Models a = Models::create(small_config(), 0);
  Models b = Models::create(small_config(), 0);
  const std::string init = a.checksum();
  const auto cfg = small_training(TrainableSet::denoiser_only, 3);
  const TrainState sa = pretrain_denoiser(a, data, cfg);
  const TrainState sb = pretrain_denoiser(b, data, cfg);
  CHECK(a.checksum() != init);
  CHECK(a.checksum() == b.checksum());
  REQUIRE(sa.log.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(sa.log[i].loss.l_noise == sb.log[i].loss.l_noise);
    CHECK(sa.log[i].loss.l_facial == 0.0);
  }
  CHECK_THROWS_AS(train_consistentid(a, data, cfg), ConfigError);
  CHECK_THROWS_AS(pretrain_denoiser(a, {}, cfg), ConfigError);
}

TEST_CASE("stage B trains only the facial modules") {
  const auto data = small_data();
  Models m = pretrained(data);
  const std::string base = base_fingerprint(m);
  Checkpoint before = m.to_checkpoint();
  auto cfg = small_training(TrainableSet::consistentid_modules, 2);
  train_consistentid(m, data, cfg);
  REQUIRE(m.facial);
  CHECK(base_fingerprint(m) == base);
  for (const auto* p : m.denoiser.parameters()) {
    CHECK(*before.find(p->name) == p->value);
    CHECK(!p->trainable);
  }
  CHECK(*before.find(m.text.table.name) == m.text.table.value);
  const FacialEncoder fresh = FacialEncoder::create(m.config.facial, derive_seed({m.seed, 3}));
  bool moved = false;
  const auto trained = m.facial->parameters();
  const auto init = fresh.parameters();
  for (std::size_t i = 0; i < trained.size(); ++i) moved |= trained[i]->value != init[i]->value;
  CHECK(moved);
}

TEST_CASE("zero_text_prob = 1 feeds an all-zero context on every sample") {
  const auto data = small_data();
  Models m = pretrained(data);
  auto cfg = small_training(TrainableSet::consistentid_modules, 2);
  cfg.zero_text_prob = 1.0;
  int seen = 0;
  TrainingHooks hooks;
  hooks.on_condition = [&](int, int, const ad::Matrix& ctx) {
    ++seen;
    CHECK(ctx.isZero(0.0));
    CHECK(ctx.rows() == m.config.text.max_length + 1);
  };
  const TrainState s = train_consistentid(m, data, cfg, {}, hooks);
  CHECK(seen == 4);
  for (const auto& r : s.log) CHECK(r.loss.l_facial == 0.0);

  cfg.zero_text_prob = 0.0;
  hooks.on_condition = [&](int, int, const ad::Matrix& ctx) { CHECK(!ctx.isZero(0.0)); };
  train_consistentid(m, data, cfg, {}, hooks);

  Models base = Models::create(small_config(), 0);
  auto pre = small_training(TrainableSet::denoiser_only, 1);
  pre.zero_text_prob = 1.0;
  hooks.on_condition = [&](int, int, const ad::Matrix& ctx) {
    CHECK(ctx.isZero(0.0));
    CHECK(ctx.rows() == base.config.text.max_length);
  };
  pretrain_denoiser(base, data, pre, {}, hooks);
}

TEST_CASE("logged total loss is l_noise + lambda * l_facial") {
  const auto data = small_data();
  Models m = pretrained(data);
  auto cfg = small_training(TrainableSet::consistentid_modules, 3);
  int calls = 0;
  TrainingHooks hooks;
  hooks.on_step = [&](const LossRecord& r) {
    ++calls;
    CHECK(r.loss.lambda == 0.01);
    CHECK(r.loss.l_total == doctest::Approx(r.loss.l_noise + 0.01 * r.loss.l_facial).epsilon(1e-12));
  };
  const TrainState s = train_consistentid(m, data, cfg, {}, hooks);
  CHECK(calls == 3);
  CHECK(s.log.back().step == 2);
}

TEST_CASE("the facial loss term changes the facial-encoder update") {
  const auto data = small_data();
  const Models base = pretrained(data);
  auto cfg = small_training(TrainableSet::consistentid_modules, 1);
  cfg.zero_text_prob = 0.0;
  Models a = base, b = base;
  cfg.lambda = 0.0;
  const TrainState sa = train_consistentid(a, data, cfg);
  cfg.lambda = 1.0;
  const TrainState sb = train_consistentid(b, data, cfg);
  // identical draws and initial weights, so only the loss term differs
  CHECK(sa.log[0].loss.l_noise == sb.log[0].loss.l_noise);
  CHECK(sa.log[0].loss.l_facial == sb.log[0].loss.l_facial);
  CHECK(a.checksum() != b.checksum());
}

TEST_CASE("resuming from a saved train state continues bit-identically") {
  const auto data = small_data();
  const Models base = pretrained(data);
  auto cfg = small_training(TrainableSet::consistentid_modules, 4);

  Models straight = base;
  const TrainState full = train_consistentid(straight, data, cfg);

  Models first = base;
  auto half = cfg;
  half.steps = 2;
  const TrainState mid = train_consistentid(first, data, half);
  Models resumed = Models::from_checkpoint(Checkpoint::deserialize(first.to_checkpoint().serialize()));
  const TrainState restored = TrainState::from_checkpoint(Checkpoint::deserialize(mid.to_checkpoint(half).serialize()));
  CHECK(restored.step == 2);
  CHECK(restored.optimizer.steps_taken() == 2);
  const TrainState rest = train_consistentid(resumed, data, cfg, restored);

  CHECK(resumed.checksum() == straight.checksum());
  REQUIRE(rest.log.size() == full.log.size());
  for (std::size_t i = 0; i < full.log.size(); ++i) CHECK(rest.log[i].loss.l_total == full.log[i].loss.l_total);
  Checkpoint wrong = mid.to_checkpoint(half);
  wrong.module = "base";
  CHECK_THROWS_AS(TrainState::from_checkpoint(wrong), CheckpointMismatch);
}

TEST_CASE("touching the base model during stage B raises FrozenViolation") {
  const auto data = small_data();
  Models m = pretrained(data);
  TrainingHooks hooks;
  hooks.on_step = [&](const LossRecord&) { m.denoiser.out_b.value(0, 0) += 1.0; };
  CHECK_THROWS_AS(train_consistentid(m, data, small_training(TrainableSet::consistentid_modules, 1), {}, hooks),
                  FrozenViolation);
}

TEST_CASE("a non-finite loss raises DivergenceError") {
  const auto data = small_data();
  Models m = Models::create(small_config(), 0);
  m.denoiser.out_b.value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(pretrain_denoiser(m, data, small_training(TrainableSet::denoiser_only, 1)), DivergenceError);
}

TEST_CASE("held-out noise loss and localization stats are deterministic") {
  const auto data = small_data();
  Models m = pretrained(data);
  train_consistentid(m, data, small_training(TrainableSet::consistentid_modules, 1));
  CHECK(heldout_noise_loss(m, data, 3, 4) == heldout_noise_loss(m, data, 3, 4));
  const TrainingConfig cfg;
  const LocalizationStats a = evaluate_localization(m, data, cfg, 3, 4);
  const LocalizationStats b = evaluate_localization(m, data, cfg, 3, 4);
  CHECK(a.l_facial == b.l_facial);
  CHECK(a.mass_in_masks == b.mass_in_masks);
  CHECK(a.mass_in_masks >= 0.0);
  CHECK(a.mass_in_masks <= 1.0);
  CHECK_THROWS_AS(evaluate_localization(Models::create(small_config(), 0), data, cfg, 3, 4), CheckpointMismatch);
}
