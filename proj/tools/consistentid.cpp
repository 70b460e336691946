// consistentid command-line tool.

#include "consistentid/errors.hpp"
#include "consistentid/evaluation.hpp"
#include "consistentid/fgid_pipeline.hpp"
#include "consistentid/inference.hpp"
#include "consistentid/run_config.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path cache_dir() {
  if (const char* env = std::getenv("CONSISTENTID_CACHE"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".cache" / "consistentid";
  return fs::path(".consistentid-cache");
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw cid::IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw cid::MissingFile("not found: " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw cid::ConfigError(path.string() + ": " + e.what());
  }
}

fs::path sidecar(const fs::path& p, const std::string& suffix) {
  fs::path s = p;
  s += suffix;
  return s;
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  // synth
  int identities = 64;
  int poses = 4;
  std::string out;
  // build-fgid
  std::string in;
  std::string parser = "stub";
  std::string captioner = "template";
  std::string captioner_url;
  // training
  std::string data;
  std::string base;
  std::optional<int> train_steps;
  std::optional<double> lambda;
  std::optional<double> lr;
  // generation
  std::string ckpt;
  std::string ref;
  std::string masks_dir;
  std::string prompt = std::string(cid::kFixedPhrase);
  std::optional<int> steps;
  std::optional<double> scale;
  std::optional<int> merge_step;
  std::vector<int> merge_steps = {0, 10, 25, 40, 50};
  // eval
  int eval_identities = 15;
  // replay
  std::string metadata;
};

cid::RunConfig resolve_config(const Options& o) {
  cid::RunConfig rc = cid::load_run_config(o.config_path.empty() ? std::nullopt
                                                                 : std::optional<fs::path>(o.config_path));
  json flags = json::object();
  if (o.seed) flags["seed"] = *o.seed;
  if (o.steps) flags["sampler"]["steps"] = *o.steps;
  if (o.scale) flags["sampler"]["guidance_scale"] = *o.scale;
  if (o.merge_step) flags["sampler"]["merge_step"] = *o.merge_step;
  return rc.merged(flags);
}

json run_metadata(const std::string& command, const std::vector<std::string>& argv, const cid::RunConfig& rc) {
  return {{"format", "consistentid-run/1"}, {"command", command}, {"argv", argv}, {"run_config", rc.to_json()}};
}

fs::path default_ckpt(const std::string& name) { return cache_dir() / name; }

cid::Models load_models(const std::string& path) {
  return cid::Models::from_checkpoint(cid::load_checkpoint(path.empty() ? default_ckpt("consistentid.ckpt") : fs::path(path)));
}

std::unique_ptr<cid::Captioner> make_captioner(const Options& o) {
  if (o.captioner == "template") return std::make_unique<cid::TemplateCaptioner>();
  if (o.captioner == "fixed") return std::make_unique<cid::FixedPhraseCaptioner>();
  if (o.captioner == "service") {
    if (o.captioner_url.empty()) throw cid::ConfigError("--captioner service needs --captioner-url");
    return std::make_unique<cid::ServiceCaptioner>(cid::http_transport(o.captioner_url));
  }
  throw cid::ConfigError("unknown captioner '" + o.captioner + "'");
}

cid::RegionMaskSet reference_masks(const Options& o, const cid::Image& image) {
  const fs::path ref(o.ref);
  std::vector<fs::path> dirs;
  if (!o.masks_dir.empty()) dirs.push_back(o.masks_dir);
  dirs.push_back(ref.parent_path().empty() ? fs::path(".") : ref.parent_path());
  dirs.push_back(ref.parent_path().parent_path() / "masks");
  return cid::parse_face(image, cid::FileMaskParser(dirs), ref.stem().string());
}

void print_json_line(const json& j) { std::cout << j.dump() << std::endl; }

void cmd_synth(const Options& o, const cid::RunConfig& rc, const json& meta) {
  const auto faces = cid::build_corpus(o.identities, o.poses, rc.seed);
  cid::write_corpus(faces, {o.identities, o.poses, rc.seed}, o.out);
  write_json(fs::path(o.out) / "metadata.json", meta);
  print_json_line({{"images", faces.size()}, {"out", o.out}});
}

void cmd_build_fgid(const Options& o, const json& meta) {
  const fs::path in(o.in);
  std::unique_ptr<cid::FaceParser> parser;
  if (o.parser == "stub") {
    const cid::CorpusInfo info = cid::read_corpus_info(in);
    auto stub = std::make_unique<cid::GroundTruthStub>();
    for (auto f : cid::build_corpus(info.identities, info.poses, info.seed)) {
      f.image = cid::quantize8(f.image);
      stub->add(f);
    }
    parser = std::move(stub);
  } else if (o.parser == "files") {
    parser = std::make_unique<cid::FileMaskParser>(std::vector<fs::path>{in / "masks"});
  } else {
    throw cid::ConfigError("unknown parser '" + o.parser + "'");
  }
  const auto captioner = make_captioner(o);
  const auto records =
      cid::build_dataset(in, o.out, *parser, cid::Encoders::create(cid::RunConfig{}.model.encoders), *captioner);
  write_json(fs::path(o.out) / "metadata.json", meta);
  print_json_line({{"records", records.size()}, {"out", o.out}});
}

void write_log(const fs::path& path, const cid::TrainState& state) {
  std::ofstream f(path);
  if (!f) throw cid::IoError("cannot write " + path.string());
  for (const auto& r : state.log) f << r.to_json().dump() << "\n";
}

void cmd_pretrain(const Options& o, cid::RunConfig rc, json meta) {
  if (o.train_steps) rc.pretrain.steps = *o.train_steps;
  if (o.lr) rc.pretrain.lr = *o.lr;
  rc.validate();
  meta["run_config"] = rc.to_json();
  const auto data = cid::load_training_examples(o.data);
  cid::Models models = cid::Models::create(rc.model, rc.seed);
  const auto state = cid::pretrain_denoiser(models, data, rc.pretrain_config());
  const fs::path out = o.out.empty() ? default_ckpt("base.ckpt") : fs::path(o.out);
  cid::save_checkpoint(out, models.to_checkpoint());
  cid::save_checkpoint(sidecar(out, ".state"), state.to_checkpoint(rc.pretrain_config()));
  write_log(sidecar(out, ".log.jsonl"), state);
  meta["checkpoint_sha256"] = models.checksum();
  write_json(sidecar(out, ".json"), meta);
  print_json_line({{"steps", state.step}, {"out", out.string()}, {"final", state.log.empty() ? json() : state.log.back().to_json()}});
}

void cmd_train(const Options& o, cid::RunConfig rc, json meta) {
  if (o.train_steps) rc.train.steps = *o.train_steps;
  if (o.lambda) rc.train.lambda = *o.lambda;
  if (o.lr) rc.train.lr = *o.lr;
  rc.validate();
  meta["run_config"] = rc.to_json();
  const auto data = cid::load_training_examples(o.data);
  cid::Models models =
      cid::Models::from_checkpoint(cid::load_checkpoint(o.base.empty() ? default_ckpt("base.ckpt") : fs::path(o.base)));
  models.facial.reset();
  const auto state = cid::train_consistentid(models, data, rc.train_config());
  const fs::path out = o.out.empty() ? default_ckpt("consistentid.ckpt") : fs::path(o.out);
  cid::save_checkpoint(out, models.to_checkpoint());
  cid::save_checkpoint(sidecar(out, ".state"), state.to_checkpoint(rc.train_config()));
  write_log(sidecar(out, ".log.jsonl"), state);
  meta["checkpoint_sha256"] = models.checksum();
  write_json(sidecar(out, ".json"), meta);
  print_json_line({{"steps", state.step}, {"out", out.string()}, {"final", state.log.empty() ? json() : state.log.back().to_json()}});
}

cid::GenerationRequest make_request(const Options& o, const cid::RunConfig& rc) {
  cid::GenerationRequest r;
  r.reference_face = cid::read_png(o.ref);
  r.reference_path = fs::absolute(o.ref).string();
  r.prompt_text = o.prompt;
  r.steps = rc.steps;
  r.guidance_scale = rc.guidance_scale;
  r.merge_step = rc.merge_step;
  r.seed = rc.seed;
  return r;
}

void cmd_generate(const Options& o, const cid::RunConfig& rc) {
  const cid::Models models = load_models(o.ckpt);
  const cid::GenerationRequest req = make_request(o, rc);
  const auto masks = reference_masks(o, req.reference_face);
  cid::GenerationResult result = cid::generate(req, models, masks);
  result.metadata["masks_dir"] = o.masks_dir;
  cid::write_generation(o.out, result);
  print_json_line({{"out", o.out}, {"image_sha256", result.metadata["image_sha256"]}});
}

void cmd_sweep(const Options& o, const cid::RunConfig& rc, json meta) {
  const cid::Models models = load_models(o.ckpt);
  const cid::GenerationRequest req = make_request(o, rc);
  const auto masks = reference_masks(o, req.reference_face);
  for (int v : o.merge_steps) {
    if (v < 0 || v > req.steps) throw cid::ConfigError("merge step " + std::to_string(v) + " outside [0, steps]");
  }
  const cid::SweepResult sweep = cid::sweep_merge_step(req, o.merge_steps, models, masks);
  const fs::path out(o.out);
  fs::create_directories(out);
  for (std::size_t i = 0; i < sweep.images.size(); ++i) {
    cid::write_png(out / ("merge_" + std::to_string(o.merge_steps[i]) + ".png"), sweep.images[i]);
  }
  cid::write_png(out / "grid.png", cid::image_grid(sweep.images));
  std::ofstream(out / "sweep.csv") << sweep.csv();
  meta["checkpoint_sha256"] = models.checksum();
  write_json(out / "metadata.json", meta);
  print_json_line({{"rows", sweep.rows.size()}, {"out", o.out}});
}

void cmd_eval(const Options& o, const cid::RunConfig& rc, json meta) {
  const cid::Models models = load_models(o.ckpt);
  // Held-out identities, disjoint from the training corpus seeds.
  const auto refs = cid::build_corpus(o.eval_identities, 1, cid::derive_seed({rc.seed, 0x6576616c}));
  cid::BenchmarkConfig bc{rc.steps, rc.guidance_scale, rc.merge_step, rc.seed};
  const cid::EvalReport report = cid::run_benchmark(models, refs, cid::EvalPromptSet::builtin(), bc, fs::path(o.out));
  meta["checkpoint_sha256"] = models.checksum();
  write_json(fs::path(o.out) / "metadata.json", meta);
  print_json_line({{"images", report.rows.size()}, {"metrics", report.to_json()["metrics"]}});
}

int dispatch(std::vector<std::string> args);

void cmd_replay(const Options& o) {
  const json meta = read_json(o.metadata);
  const std::string format = meta.value("format", "");
  if (format == "consistentid-generation/1") {
    const cid::Models models = load_models(o.ckpt);
    const std::string masks_dir = meta.value("masks_dir", "");
    const fs::path ref = meta.at("request").at("reference_path").get<std::string>();
    std::vector<fs::path> dirs;
    if (!masks_dir.empty()) dirs.push_back(masks_dir);
    dirs.push_back(ref.parent_path());
    dirs.push_back(ref.parent_path().parent_path() / "masks");
    const cid::GenerationResult r = cid::replay(meta, models, cid::FileMaskParser(dirs));
    const bool same = r.metadata["image_sha256"] == meta["image_sha256"];
    if (!o.out.empty()) cid::write_generation(o.out, r);
    print_json_line({{"identical", same}, {"image_sha256", r.metadata["image_sha256"]}});
    if (!same) throw cid::CheckpointMismatch("replayed image differs from the recorded one");
  } else if (format == "consistentid-run/1") {
    std::vector<std::string> argv = meta.at("argv").get<std::vector<std::string>>();
    if (dispatch(argv) != 0) throw cid::Error("ReplayFailed", "replayed command failed");
  } else {
    throw cid::ConfigError("unrecognized metadata format '" + format + "'");
  }
}

int dispatch(std::vector<std::string> args) {
  CLI::App app{"consistentid: fine-grained identity-preserving generation on a synthetic face corpus"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config_path, "JSON run config; flags override it")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "global seed");

  auto* synth = app.add_subcommand("synth", "render a synthetic face corpus");
  synth->add_option("--identities", o.identities)->check(CLI::PositiveNumber);
  synth->add_option("--poses", o.poses)->check(CLI::PositiveNumber);
  synth->add_option("--out", o.out)->required();

  auto* build = app.add_subcommand("build-fgid", "build an FGID dataset from a corpus");
  build->add_option("--in", o.in)->required()->check(CLI::ExistingDirectory);
  build->add_option("--out", o.out)->required();
  build->add_option("--parser", o.parser)->check(CLI::IsMember({"stub", "files"}));
  build->add_option("--captioner", o.captioner)->check(CLI::IsMember({"template", "fixed", "service"}));
  build->add_option("--captioner-url", o.captioner_url);

  auto* pretrain = app.add_subcommand("pretrain", "fit the text-conditioned base denoiser");
  pretrain->add_option("--data", o.data)->required()->check(CLI::ExistingDirectory);
  pretrain->add_option("--steps", o.train_steps)->check(CLI::NonNegativeNumber);
  pretrain->add_option("--lr", o.lr);
  pretrain->add_option("--out", o.out);

  auto* train = app.add_subcommand("train", "fit the facial encoder on a frozen base");
  train->add_option("--data", o.data)->required()->check(CLI::ExistingDirectory);
  train->add_option("--base", o.base);
  train->add_option("--steps", o.train_steps)->check(CLI::NonNegativeNumber);
  train->add_option("--lambda", o.lambda);
  train->add_option("--lr", o.lr);
  train->add_option("--out", o.out);

  auto add_gen = [&](CLI::App* c) {
    c->add_option("--ckpt", o.ckpt);
    c->add_option("--ref", o.ref)->required()->check(CLI::ExistingFile);
    c->add_option("--masks", o.masks_dir, "directory with <stem>.mask.<region>.pgm files");
    c->add_option("--prompt", o.prompt);
    c->add_option("--steps", o.steps);
    c->add_option("--scale", o.scale);
    c->add_option("--out", o.out)->required();
  };
  auto* gen = app.add_subcommand("generate", "generate one image from a reference face");
  add_gen(gen);
  gen->add_option("--merge-step", o.merge_step);
  auto* sweep = app.add_subcommand("sweep", "generate across merge steps");
  add_gen(sweep);
  sweep->add_option("--merge-steps", o.merge_steps)->delimiter(',');

  auto* eval = app.add_subcommand("eval", "run the 45-prompt benchmark");
  eval->add_option("--ckpt", o.ckpt);
  eval->add_option("--identities", o.eval_identities)->check(CLI::PositiveNumber);
  eval->add_option("--steps", o.steps);
  eval->add_option("--scale", o.scale);
  eval->add_option("--merge-step", o.merge_step);
  eval->add_option("--out", o.out)->required();

  auto* replay = app.add_subcommand("replay", "re-run a command from its metadata");
  replay->add_option("metadata", o.metadata)->required()->check(CLI::ExistingFile);
  replay->add_option("--ckpt", o.ckpt);
  replay->add_option("--out", o.out);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "UsageError"}, {"message", e.what()}}.dump() << std::endl;
    return 2;
  }

  const cid::RunConfig rc = resolve_config(o);
  CLI::App* sub = app.get_subcommands().front();
  const json meta = run_metadata(sub->get_name(), args, rc);
  if (sub == synth) cmd_synth(o, rc, meta);
  else if (sub == build) cmd_build_fgid(o, meta);
  else if (sub == pretrain) cmd_pretrain(o, rc, meta);
  else if (sub == train) cmd_train(o, rc, meta);
  else if (sub == gen) cmd_generate(o, rc);
  else if (sub == sweep) cmd_sweep(o, rc, meta);
  else if (sub == eval) cmd_eval(o, rc, meta);
  else if (sub == replay) cmd_replay(o);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return dispatch(args);
  } catch (const cid::Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << std::endl;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "InternalError"}, {"message", e.what()}}.dump() << std::endl;
  }
  return 1;
}
