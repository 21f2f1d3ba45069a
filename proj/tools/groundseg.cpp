// Command-line entry point.

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <pthread.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "groundseg/coco.hpp"
#include "groundseg/engine.hpp"
#include "groundseg/evaluation.hpp"
#include "groundseg/hashing.hpp"
#include "groundseg/model/io.hpp"
#include "groundseg/review.hpp"
#include "groundseg/training.hpp"

namespace fs = std::filesystem;
using namespace groundseg;

namespace {

/// Bad invocation detected after parsing; exits 2 like a parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalOptions {
  double threshold = evaluation::kDefaultThreshold;
  int workers = 1;
};

struct ReviewOptions {
  std::string host = "127.0.0.1";
  int lease_minutes = 10;
  fs::path ui_dir;
};

struct CliConfig {
  engine::EngineConfig engine;
  model::ModelConfig model;
  training::TrainConfig train;
  EvalOptions eval;
  ReviewOptions review;
};

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* key : keys) ok = ok || k == key;
    if (!ok) throw Error("unknown key " + where + "." + k);
  }
}

CliConfig config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"engine", "model", "train", "eval", "review"}, "config");
  CliConfig c;
  if (j.contains("engine")) c.engine = engine::engine_config_from_json(j.at("engine"));
  if (j.contains("model")) c.model = model::model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = training::train_config_from_json(j.at("train"));
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"threshold", "workers"}, "eval");
    c.eval.threshold = e.value("threshold", c.eval.threshold);
    c.eval.workers = e.value("workers", c.eval.workers);
  }
  if (j.contains("review")) {
    const auto& r = j.at("review");
    reject_unknown(r, {"host", "lease_minutes", "ui_dir"}, "review");
    c.review.host = r.value("host", c.review.host);
    c.review.lease_minutes = r.value("lease_minutes", c.review.lease_minutes);
    c.review.ui_dir = r.value("ui_dir", c.review.ui_dir.string());
  }
  return c;
}

nlohmann::ordered_json to_json(const CliConfig& c) {
  nlohmann::ordered_json j;
  j["engine"] = engine::to_json(c.engine);
  j["model"] = model::to_json(c.model);
  j["train"] = training::to_json(c.train);
  j["eval"] = {{"threshold", c.eval.threshold}, {"workers", c.eval.workers}};
  j["review"] = {{"host", c.review.host}, {"lease_minutes", c.review.lease_minutes}, {"ui_dir", c.review.ui_dir.string()}};
  return j;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

/// Parsed flags shared by the subcommands.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string images;
  std::string out;
  std::string manifest;
  int phase = 1;
  std::string init_checkpoint;
  std::string checkpoint;
  std::optional<double> threshold;
  int port = 8701;
  std::string fixtures;
  std::string input;
  std::string provenance = "coco_instances";
  std::string split = "train";
};

CliConfig resolve(const Flags& f) {
  CliConfig c;
  if (!f.config.empty()) {
    try {
      c = config_from_json(read_json(f.config));
    } catch (const Error& e) {
      throw UsageError("invalid config " + f.config + ": " + e.what());
    }
  }
  if (f.seed) {
    c.engine.seed = *f.seed;
    c.engine.vlm.seed = *f.seed;
    c.model.seed = *f.seed;
    c.train.seed = *f.seed;
  }
  if (f.threshold) c.eval.threshold = *f.threshold;
  if (!f.fixtures.empty()) {
    c.engine.vlm.kind = "mock";
    c.engine.vlm.fixtures_dir = f.fixtures;
    c.engine.detector.kind = "mock";
    if (c.engine.segmenter.kind == "http") c.engine.segmenter.kind = "flood_fill";
  }
  c.engine.validate();
  c.model.validate();
  if (c.eval.workers < 1) throw Error("eval.workers must be >= 1");
  if (c.review.lease_minutes < 1) throw Error("review.lease_minutes must be >= 1");
  return c;
}

void log_config(const CliConfig& c, const std::optional<fs::path>& out_dir) {
  const auto j = to_json(c);
  std::cerr << "resolved config: " << j.dump() << "\n";
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_file_atomic(*out_dir / "resolved_config.json", j.dump(2) + "\n");
  }
}

fs::path templates_root(const fs::path& configured) {
  if (configured.is_absolute() || fs::exists(configured)) return configured;
#ifdef GROUNDSEG_SOURCE_TEMPLATES
  if (configured == "templates") return GROUNDSEG_SOURCE_TEMPLATES;
#endif
  return configured;
}

// ---- engine ----------------------------------------------------------------------------

int engine_run_impl(const nlohmann::json& invocation, const fs::path& out) {
  const CliConfig cfg = config_from_json(invocation.at("config"));
  log_config(cfg, out);
  auto inputs = engine::scan_images(invocation.at("images").get<std::string>());
  if (inputs.images.empty()) throw Error("no images found in " + invocation.at("images").get<std::string>());
  const auto seeds_path = invocation.value("manifest", std::string());
  if (!seeds_path.empty()) inputs.seeds = engine::seeds_from_manifest(load_manifest(seeds_path));

  const auto templates = engine::TemplateRegistry::load(templates_root(cfg.engine.templates_dir));
  auto scenes = std::make_shared<backends::SceneBook>();
  const auto fixtures = invocation.value("fixtures", std::string());
  if (!fixtures.empty() && fs::exists(fs::path(fixtures) / "scenes")) scenes->load_directory(fs::path(fixtures) / "scenes");
  auto vlm = backends::make_vlm(cfg.engine.vlm, scenes);
  auto detector = backends::make_detector(cfg.engine.detector, scenes);
  auto segmenter = backends::make_segmenter(cfg.engine.segmenter);
  const auto summary = engine::run_pipeline(inputs, cfg.engine, templates, {vlm.get(), detector.get(), segmenter.get()}, out);
  std::cout << engine::to_json(summary).dump(2) << "\n";
  return summary.images_failed == 0 ? 0 : 1;
}

int engine_run(const Flags& f) {
  if (f.images.empty() || f.out.empty()) throw UsageError("engine run needs --images and --out");
  const CliConfig cfg = resolve(f);
  nlohmann::ordered_json inv;
  inv["images"] = fs::absolute(f.images).string();
  inv["fixtures"] = f.fixtures.empty() ? "" : fs::absolute(f.fixtures).string();
  inv["manifest"] = f.manifest.empty() ? "" : fs::absolute(f.manifest).string();
  inv["config"] = to_json(cfg);
  fs::create_directories(f.out);
  write_file_atomic(fs::path(f.out) / "invocation.json", inv.dump(2) + "\n");
  return engine_run_impl(nlohmann::json::parse(inv.dump()), f.out);
}

int engine_resume(const Flags& f) {
  if (f.out.empty()) throw UsageError("engine resume needs --out");
  const fs::path inv = fs::path(f.out) / "invocation.json";
  if (!fs::exists(inv)) throw Error(f.out + " holds no engine run to resume");
  return engine_run_impl(read_json(inv), f.out);
}

// ---- dataset ------------------------------------------------------------------------------

int dataset_stats(const Flags& f) {
  if (f.manifest.empty()) throw UsageError("dataset stats needs --manifest");
  std::cout << stats_to_json(manifest_stats(load_manifest(f.manifest))).dump(2) << "\n";
  return 0;
}

int dataset_convert(const Flags& f) {
  if (f.input.empty() || f.out.empty()) throw UsageError("dataset convert-coco needs an annotation file and --out");
  coco::ConvertOptions opt;
  opt.provenance = provenance_from_string(f.provenance);
  opt.split = split_from_string(f.split);
  const auto m = coco::convert(read_json(f.input), opt);
  const fs::path out(f.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_manifest(m, out);
  std::cout << stats_to_json(manifest_stats(m)).dump(2) << "\n";
  return 0;
}

// ---- training and evaluation -------------------------------------------------------------------

std::optional<model::ModelConfig> archived_config(const fs::path& p) {
  const auto a = model::read_archive(p);
  if (!a.metadata.contains("model_config")) return std::nullopt;
  return model::model_config_from_json(nlohmann::json::parse(a.metadata["model_config"].dump()));
}

int train(const Flags& f) {
  if (f.phase != 1 && f.phase != 2) throw UsageError("--phase must be 1 or 2");
  if (f.phase == 2 && f.init_checkpoint.empty()) throw UsageError("train --phase 2 requires --init-checkpoint");
  if (f.manifest.empty() || f.images.empty() || f.out.empty()) throw UsageError("train needs --manifest, --images and --out");
  CliConfig cfg = resolve(f);
  cfg.train.phase = f.phase;
  cfg.train.validate();
  // The architecture always follows the checkpoint we start from.
  const std::string start = !f.checkpoint.empty() ? f.checkpoint : f.init_checkpoint;
  if (!start.empty()) {
    if (auto mc = archived_config(start)) cfg.model = *mc;
  }
  const fs::path out(f.out);
  log_config(cfg, out);

  const auto manifest = load_manifest(f.manifest);
  model::SegmentationModel<float> m(cfg.model);
  training::Trainer trainer(m, cfg.train, training::group_samples(manifest.samples), training::directory_images(f.images));
  if (!f.checkpoint.empty()) {
    trainer.resume_from(f.checkpoint);
  } else if (!f.init_checkpoint.empty()) {
    trainer.init_from(f.init_checkpoint);
  }
  trainer.run_to_end(out / "checkpoints");
  trainer.save_checkpoint(out / "final.ckpt");
  training::write_loss_csv(trainer.loss_log(), out / "loss.csv");
  std::cout << nlohmann::ordered_json{{"phase", f.phase},
                                      {"steps", trainer.step()},
                                      {"loss_ema", trainer.loss_ema()},
                                      {"checkpoint", (out / "final.ckpt").string()}}
                   .dump(2)
            << "\n";
  return 0;
}

int eval(const Flags& f) {
  if (f.checkpoint.empty() || f.manifest.empty() || f.images.empty() || f.out.empty()) {
    throw UsageError("eval needs --checkpoint, --manifest, --images and --out");
  }
  const CliConfig cfg = resolve(f);
  const fs::path out(f.out);
  log_config(cfg, out);
  const auto m = model::load_model<float>(fs::path(f.checkpoint));
  const auto manifest = load_manifest(f.manifest);
  const auto model_id = fs::path(f.checkpoint).filename().string() + "@" +
                        sha256_hex(model::model_archive(*m).metadata.dump()).substr(0, 12);
  const auto preds = evaluation::predict_dataset(*m, model_id, manifest, training::directory_images(f.images),
                                                 cfg.eval.threshold, cfg.eval.workers);
  evaluation::save_predictions(preds, out / "predictions.jsonl");
  for (const auto& e : preds.errors) std::cerr << "prediction error " << e.sample_id << ": " << e.message << "\n";
  const auto result = evaluation::evaluate_predictions(preds, manifest);
  evaluation::write_reports(result, out);
  std::cout << evaluation::result_to_text(result);
  return 0;
}

int report(const Flags& f) {
  if (f.input.empty() || f.manifest.empty() || f.out.empty()) {
    throw UsageError("report needs a predictions file, --manifest and --out");
  }
  const auto result = evaluation::evaluate_predictions(evaluation::load_predictions(f.input), load_manifest(f.manifest));
  evaluation::write_reports(result, f.out);
  std::cout << evaluation::result_to_text(result);
  return 0;
}

// ---- review service ---------------------------------------------------------------------------

bool looks_like_candidates(const fs::path& p) {
  std::ifstream in(p);
  std::string first;
  std::getline(in, first);
  try {
    return nlohmann::json::parse(first).contains("candidate_id");
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

int serve(const Flags& f) {
  if (f.manifest.empty() || f.out.empty()) throw UsageError("serve needs --manifest and --out");
  if (f.port < 0 || f.port > 65535) throw UsageError("--port must be in 0..65535");
  const CliConfig cfg = resolve(f);
  const fs::path out(f.out);
  log_config(cfg, out);

  std::vector<review::Candidate> candidates;
  if (looks_like_candidates(f.manifest)) {
    candidates = review::load_candidates(f.manifest);
  } else {
    if (f.images.empty()) throw UsageError("serve needs --images when --manifest is a dataset manifest");
    candidates = review::candidates_from_manifest(load_manifest(f.manifest), f.images, out / "overlays");
    review::save_candidates(candidates, out / "candidates.jsonl");
  }
  review::StoreOptions so;
  so.lease_ms = static_cast<std::int64_t>(cfg.review.lease_minutes) * 60 * 1000;
  review::ReviewStore store(std::move(candidates), out / "verdicts.jsonl", so);

  // Signals are taken by a dedicated thread so stop() runs outside a handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  fs::path ui_dir = cfg.review.ui_dir;
#ifdef GROUNDSEG_SOURCE_UI
  if (ui_dir.empty() && fs::is_directory(GROUNDSEG_SOURCE_UI)) ui_dir = GROUNDSEG_SOURCE_UI;
#endif
  review::ReviewServer server(store, {ui_dir, out / "accepted.jsonl"});
  const int port = server.bind(cfg.review.host, f.port);
  std::cerr << "review service on http://" << cfg.review.host << ":" << port << " with " << store.candidates().size()
            << " candidates\n";
  std::jthread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  server.listen();
  pthread_kill(waiter.native_handle(), SIGTERM);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"groundseg: language-conditioned segmentation data engine, training and evaluation"};
  app.require_subcommand(1);
  Flags f;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "Seed for every stochastic component");
  };

  auto* eng = app.add_subcommand("engine", "Data engine");
  eng->require_subcommand(1);
  auto* run = eng->add_subcommand("run", "Run the engine over a directory of images");
  add_config(run);
  run->add_option("--images", f.images, "Image directory")->required();
  run->add_option("--out", f.out, "Output directory")->required();
  run->add_option("--manifest", f.manifest, "Seed-mask manifest (benchmark curation mode)");
  run->add_option("--fixtures", f.fixtures, "Fixture directory; switches the VLM and detector to mocks");
  auto* resume = eng->add_subcommand("resume", "Continue an interrupted engine run");
  resume->add_option("--out", f.out, "Output directory of the run")->required();

  auto* ds = app.add_subcommand("dataset", "Manifest utilities");
  ds->require_subcommand(1);
  auto* stats = ds->add_subcommand("stats", "Print split statistics as JSON");
  stats->add_option("--manifest", f.manifest, "Manifest file")->required();
  auto* conv = ds->add_subcommand("convert-coco", "Convert COCO-style annotations to a manifest");
  conv->add_option("annotations", f.input, "COCO annotation JSON")->required();
  conv->add_option("--out", f.out, "Output manifest path")->required();
  conv->add_option("--provenance", f.provenance, "coco_instances, coco_panoptic or refcoco");
  conv->add_option("--split", f.split, "Split label for the samples");

  auto* tr = app.add_subcommand("train", "Train one curriculum phase");
  add_config(tr);
  tr->add_option("--phase", f.phase, "1 (pretraining) or 2 (conversational post-training)");
  tr->add_option("--manifest", f.manifest, "Training manifest");
  tr->add_option("--images", f.images, "Image root");
  tr->add_option("--out", f.out, "Output directory");
  tr->add_option("--init-checkpoint", f.init_checkpoint, "Weights to start from (required for phase 2)");
  tr->add_option("--checkpoint", f.checkpoint, "Training checkpoint to resume");

  auto* ev = app.add_subcommand("eval", "Predict and score a benchmark manifest");
  add_config(ev);
  ev->add_option("--checkpoint", f.checkpoint, "Model or training checkpoint")->required();
  ev->add_option("--manifest", f.manifest, "Benchmark manifest")->required();
  ev->add_option("--images", f.images, "Image root")->required();
  ev->add_option("--out", f.out, "Output directory")->required();
  ev->add_option("--threshold", f.threshold, "Probability threshold for binarization");

  auto* rep = app.add_subcommand("report", "Score an existing predictions.jsonl");
  rep->add_option("predictions", f.input, "predictions.jsonl")->required();
  rep->add_option("--manifest", f.manifest, "Benchmark manifest")->required();
  rep->add_option("--out", f.out, "Output directory")->required();

  auto* sv = app.add_subcommand("serve", "Run the human review service");
  add_config(sv);
  sv->add_option("--manifest", f.manifest, "Candidate manifest or candidates.jsonl")->required();
  sv->add_option("--images", f.images, "Image root for a dataset manifest");
  sv->add_option("--out", f.out, "State directory (verdict log, overlays, export)")->required();
  sv->add_option("--port", f.port, "Port, default 8701");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);
    return 2;
  }

  try {
    if (run->parsed()) return engine_run(f);
    if (resume->parsed()) return engine_resume(f);
    if (stats->parsed()) return dataset_stats(f);
    if (conv->parsed()) return dataset_convert(f);
    if (tr->parsed()) return train(f);
    if (ev->parsed()) return eval(f);
    if (rep->parsed()) return report(f);
    if (sv->parsed()) return serve(f);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << app.help();
  return 2;
}
