// Hot paths of training and generation at the reference model size.

#include "consistentid/evaluation.hpp"
#include "consistentid/fgid_pipeline.hpp"
#include "consistentid/inference.hpp"
#include "consistentid/objectives.hpp"
#include "consistentid/training.hpp"

#include <benchmark/benchmark.h>

#include <filesystem>

using namespace cid;

namespace {

ad::Matrix noise(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  ad::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Models reference_models() {
  Models m = Models::create(ModelConfig{}, 0);
  m.facial = FacialEncoder::create(m.config.facial, 1);
  return m;
}

void BM_DenoiseForward(benchmark::State& state) {
  Denoiser d = Denoiser::create({}, 0);
  const ad::Matrix z = noise(256, 4, 1);
  const ad::Matrix ctx = noise(33, 64, 2);
  for (auto _ : state) benchmark::DoNotOptimize(denoise_eps(d, z, 50, ctx));
}
BENCHMARK(BM_DenoiseForward)->Unit(benchmark::kMillisecond);

void BM_DenoiseForwardBackward(benchmark::State& state) {
  Denoiser d = Denoiser::create({}, 0);
  const ad::Matrix z = noise(256, 4, 1);
  const ad::Matrix ctx = noise(33, 64, 2);
  const ad::Matrix eps = noise(256, 4, 3);
  for (auto _ : state) {
    ad::Tape t;
    const auto out = denoise(t, d, t.constant(z), 50, t.leaf(ctx), true);
    t.backward(noise_loss(t.constant(eps), out.eps));
  }
}
BENCHMARK(BM_DenoiseForwardBackward)->Unit(benchmark::kMillisecond);

void BM_StageBStep(benchmark::State& state) {
  const auto data = examples_from_faces(build_corpus(4, 1, 0), TemplateCaptioner{});
  Models m = reference_models();
  TrainingConfig cfg;
  cfg.batch_size = static_cast<int>(state.range(0));
  int step = 0;
  for (auto _ : state) {
    cfg.steps = ++step;
    TrainState s;
    s.step = step - 1;
    train_consistentid(m, data, cfg, s);
  }
}
BENCHMARK(BM_StageBStep)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_FacialLoss(benchmark::State& state) {
  const auto face = build_corpus(1, 1, 0)[0];
  std::vector<PlainMap> maps{{16, 16, noise(256, 33, 4).cwiseAbs()}, {8, 8, noise(64, 33, 5).cwiseAbs()}};
  std::vector<FacialToken> toks;
  for (int j = 0; j < kRegionCount; ++j) toks.push_back({10 + j, kRegionOrder[static_cast<std::size_t>(j)]});
  for (auto _ : state) benchmark::DoNotOptimize(facial_attention_loss(maps, face.masks, toks));
}
BENCHMARK(BM_FacialLoss);

void BM_Generate(benchmark::State& state) {
  const Models m = reference_models();
  const auto face = build_corpus(1, 1, 0)[0];
  GenerationRequest r;
  r.reference_face = face.image;
  r.steps = static_cast<int>(state.range(0));
  r.merge_step = r.steps / 5;
  for (auto _ : state) benchmark::DoNotOptimize(generate(r, m, face.masks));
}
BENCHMARK(BM_Generate)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_Fgis(benchmark::State& state) {
  const Encoders enc = Encoders::create();
  const auto faces = build_corpus(2, 1, 0);
  const ReferenceAlignedParser parser(faces[0].masks);
  for (auto _ : state) benchmark::DoNotOptimize(fgis(faces[0].image, faces[0].masks, faces[1].image, parser, enc));
}
BENCHMARK(BM_Fgis);

void BM_ManifestLoad(benchmark::State& state) {
  const auto dir = std::filesystem::temp_directory_path() / "cid_bench_manifest";
  std::filesystem::create_directories(dir);
  const auto faces = build_corpus(8, 1, 0);
  write_corpus(faces, {8, 1, 0}, dir / "corpus");
  const FileMaskParser parser({dir / "corpus" / "masks"});
  build_dataset(dir / "corpus", dir / "fgid", parser, Encoders::create(), TemplateCaptioner{});
  std::vector<FgidRecord> records;
  const auto one = load_manifest(dir / "fgid" / "manifest.jsonl");
  for (int i = 0; i < 256; ++i) records.push_back(one[static_cast<std::size_t>(i % 8)]);
  write_manifest(records, dir / "big.jsonl");
  for (auto _ : state) benchmark::DoNotOptimize(load_manifest(dir / "big.jsonl"));
  std::filesystem::remove_all(dir);
}
BENCHMARK(BM_ManifestLoad)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
