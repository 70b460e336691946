#include "consistentid/errors.hpp"
#include "consistentid/evaluation.hpp"
#include "small_models.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace cid;
using namespace cid::testing;

namespace {

Image random_image(std::uint64_t seed) {
  Rng rng(seed);
  Image im(64, 64, 3);
  for (auto& v : im.data) v = rng.uniform();
  return im;
}

// Keeps only the listed regions.
RegionMaskSet keep_regions(const RegionMaskSet& src, const std::vector<int>& keep) {
  std::array<Mask, kRegionCount> masks;
  for (int j = 0; j < kRegionCount; ++j) masks[static_cast<std::size_t>(j)] = Mask(src.height(), src.width());
  for (int j : keep) masks[static_cast<std::size_t>(j)] = src.masks[static_cast<std::size_t>(j)];
  return RegionMaskSet::from_masks(masks);
}

Vector region_embedding(const Image& im, const RegionMaskSet& m, int j, const Encoders& enc) {
  return stub_dino(crop_regions(im, m).crops[static_cast<std::size_t>(j)], enc);
}

// Generated image whose region-j crop embedding has cosine targets[j] with the reference.
// Crops and the stub are linear, so a region only needs ref + beta * (q - c * ref) inside its
// mask, with q - c * ref orthogonal to ref in embedding space.
Image with_region_cosines(const Image& ref, const RegionMaskSet& m, const std::vector<int>& regions,
                          const std::vector<double>& targets, const Encoders& enc) {
  Image out(ref.height, ref.width, ref.channels);
  const Image q = random_image(99);
  for (std::size_t k = 0; k < regions.size(); ++k) {
    const int j = regions[k];
    const Vector er = region_embedding(ref, m, j, enc);
    const Vector eq = region_embedding(q, m, j, enc);
    const double c = er.dot(eq) / er.dot(er);
    const double orth_norm = (eq - c * er).norm();
    const double t = targets[k];
    double alpha = 1.0, beta = 0.0;
    if (t == 0.0) {
      alpha = 0.0;
      beta = 1.0;
    } else if (t < 1.0) {
      beta = std::sqrt(1.0 / (t * t) - 1.0) * er.norm() / orth_norm;
    }
    const Mask& mask = m.masks[static_cast<std::size_t>(j)];
    for (int y = 0; y < ref.height; ++y) {
      for (int x = 0; x < ref.width; ++x) {
        if (!mask.at(y, x)) continue;
        for (int ch = 0; ch < 3; ++ch) {
          out.at(y, x, ch) = alpha * ref.at(y, x, ch) + beta * (q.at(y, x, ch) - c * ref.at(y, x, ch));
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("fgis of an image with itself is 1") {
  const Encoders enc = Encoders::create();
  for (const auto& f : build_corpus(4, 1, 2)) {
    CHECK(fgis(f.image, f.masks, f.image, ReferenceAlignedParser(f.masks), enc) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("fgis averages per-region cosines over shared regions") {
  const Encoders enc = Encoders::create();
  const auto f = build_corpus(1, 1, 7)[0];
  const std::vector<int> regions{0, 1, 2};
  const RegionMaskSet m = keep_regions(f.masks, regions);
  REQUIRE(m.present_count() == 3);

  const Image orth = with_region_cosines(f.image, m, regions, {0.0, 0.0, 0.0}, enc);
  CHECK(std::abs(fgis(f.image, m, orth, ReferenceAlignedParser(m), enc)) < 1e-9);

  const Image mixed = with_region_cosines(f.image, m, regions, {1.0, 0.5, 0.0}, enc);
  const auto per = fgis_regions(f.image, m, mixed, m, enc);
  CHECK(per[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(per[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(std::abs(per[2]) < 1e-9);
  for (int j = 3; j < kRegionCount; ++j) CHECK(std::isnan(per[static_cast<std::size_t>(j)]));
  CHECK(fgis(f.image, m, mixed, ReferenceAlignedParser(m), enc) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("fgis with no shared regions raises NoCommonRegions") {
  const Encoders enc = Encoders::create();
  const auto f = build_corpus(1, 1, 7)[0];
  const RegionMaskSet a = keep_regions(f.masks, {0});
  const RegionMaskSet b = keep_regions(f.masks, {1});
  CHECK_THROWS_AS(fgis(f.image, a, f.image, ReferenceAlignedParser(b), enc), NoCommonRegions);
  CHECK_NOTHROW(fgis(f.image, a, f.image, ReferenceAlignedParser(f.masks), enc));
}

TEST_CASE("whole-image metrics: self similarity and symmetry") {
  const Encoders enc = Encoders::create();
  const auto faces = build_corpus(2, 1, 3);
  const Image& a = faces[0].image;
  const Image& b = faces[1].image;
  CHECK(clip_i(a, a, enc) == doctest::Approx(1.0));
  CHECK(dino_i(a, a, enc) == doctest::Approx(1.0));
  CHECK(clip_i(a, b, enc) == doctest::Approx(clip_i(b, a, enc)));
  const Mask m = faces[0].masks.union_mask();
  CHECK(face_sim(a, a, m, enc) == doctest::Approx(1.0));
  CHECK(face_sim(a, b, m, enc) == doctest::Approx(face_sim(b, a, m, enc)));
  CHECK(face_sim(a, b, m, enc) < 1.0);
  CHECK_THROWS_AS(face_sim(a, b, Mask(8, 8), enc), ShapeError);
  const double t = clip_t("a man wearing a red hat", a, enc);
  CHECK(t >= -1.0);
  CHECK(t <= 1.0);
}

TEST_CASE("evaluation prompt table has 45 prompts in four categories with the class slot") {
  const EvalPromptSet& p = EvalPromptSet::builtin();
  CHECK(p.size() == 45);
  REQUIRE(p.categories.size() == 4);
  CHECK(p.categories[0].templates.size() == 10);
  CHECK(p.categories[1].templates.size() == 10);
  CHECK(p.categories[2].templates.size() == 15);
  CHECK(p.categories[3].templates.size() == 10);
  for (const auto& t : p.templates()) CHECK(t.find(p.class_slot) != std::string::npos);
  for (const auto& t : p.instantiate("woman")) {
    CHECK(t.find(p.class_slot) == std::string::npos);
    CHECK(t.find("woman") != std::string::npos);
  }
  CHECK_THROWS_AS(EvalPromptSet::parse(R"({"version":"x","class_slot":"<c>","categories":[{"name":"a","prompts":["no slot"]}]})"),
                  ConfigError);
  CHECK_THROWS_AS(EvalPromptSet::parse("not json"), ConfigError);
}

TEST_CASE("published reference numbers are recorded verbatim") {
  CHECK(PublishedReference::clip_t == 31.1);
  CHECK(PublishedReference::clip_i == 76.7);
  CHECK(PublishedReference::dino == 78.5);
  CHECK(PublishedReference::face_sim == 77.2);
  CHECK(PublishedReference::fgis == 81.4);
}

TEST_CASE("benchmark produces one row per identity and prompt, deterministically") {
  TempDir dir("bench");
  Models m = Models::create(small_config(), 0);
  m.facial = FacialEncoder::create(m.config.facial, 5);
  const auto refs = build_corpus(2, 1, 0);
  const EvalPromptSet prompts = EvalPromptSet::parse(
      R"({"version":"t","class_slot":"<c>","categories":[{"name":"a","prompts":["a <c>","a <c> in snow"]},)"
      R"({"name":"b","prompts":["a <c> running"]}]})");
  BenchmarkConfig cfg;
  cfg.steps = 4;
  cfg.merge_step = 1;
  const EvalReport r = run_benchmark(m, refs, prompts, cfg, dir.path());
  REQUIRE(r.rows.size() == 6);
  CHECK(r.rows[2].category == "b");
  CHECK(r.rows[3].identity == 1);
  CHECK(r.rows[0].prompt == "a " + class_word(refs[0].identity));
  CHECK(r.metrics.size() == 5);
  CHECK(r.per_identity.size() == 2);
  double mean = 0.0;
  for (const auto& row : r.rows) mean += row.fgis;
  CHECK(r.metrics.at("fgis").mean == doctest::Approx(mean / 6));

  const EvalReport again = run_benchmark(m, refs, prompts, cfg);
  for (std::size_t i = 0; i < 6; ++i) CHECK(again.rows[i].face_sim == r.rows[i].face_sim);
  CHECK(again.config_fingerprint == r.config_fingerprint);

  std::ifstream csv(dir.path() / "metrics.csv");
  int lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 7);
  CHECK(std::filesystem::exists(dir.path() / "report.json"));
  CHECK(std::filesystem::exists(dir.path() / r.rows[5].image));
  CHECK_THROWS_AS(run_benchmark(Models::create(small_config(), 0), refs, prompts, cfg), CheckpointMismatch);
}
