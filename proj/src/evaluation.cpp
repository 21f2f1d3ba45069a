#include "groundseg/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace groundseg::evaluation {

namespace {

MaskRLE empty_rle(const ImageRecord& image) { return rle_encode(BinaryMask(image.height, image.width)); }

}  // namespace

PredictionSet predict_dataset(const model::SegmentationModel<float>& model, const std::string& model_id,
                              const DatasetManifest& manifest, const training::ImageProvider& images, double threshold,
                              int workers) {
  if (workers < 1) throw Error("predict_dataset: workers must be >= 1");
  PredictionSet out;
  out.model_id = model_id;
  out.threshold = threshold;

  const auto& samples = manifest.samples;
  std::vector<MaskRLE> masks(samples.size());
  std::vector<std::string> failures(samples.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      const Sample& s = samples[i];
      try {
        const RgbImage img = images(s.image);
        if (img.height != s.image.height || img.width != s.image.width) {
          throw DimensionError("image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                               ", manifest says " + std::to_string(s.image.width) + "x" +
                               std::to_string(s.image.height));
        }
        masks[i] = rle_encode(model.forward(img, s.prompt).binarize(threshold));
      } catch (const std::exception& e) {
        masks[i] = empty_rle(s.image);
        failures[i] = e.what();
        if (failures[i].empty()) failures[i] = "unknown error";
      }
    }
  };
  const int n_threads = std::min<int>(workers, static_cast<int>(std::max<std::size_t>(1, samples.size())));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(work);
  }

  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.entries[samples[i].sample_id] = std::move(masks[i]);
    if (!failures[i].empty()) out.errors.push_back({samples[i].sample_id, failures[i]});
  }
  return out;
}

std::string serialize_predictions(const PredictionSet& preds) {
  nlohmann::ordered_json header;
  header["model_id"] = preds.model_id;
  header["threshold"] = preds.threshold;
  nlohmann::ordered_json errors = nlohmann::ordered_json::array();
  for (const auto& e : preds.errors) errors.push_back({{"sample_id", e.sample_id}, {"message", e.message}});
  header["errors"] = std::move(errors);
  std::string out = header.dump() + "\n";
  for (const auto& [id, rle] : preds.entries) {
    nlohmann::ordered_json line;
    line["sample_id"] = id;
    line["mask"] = rle_to_json(rle);
    out += line.dump() + "\n";
  }
  return out;
}

PredictionSet parse_predictions(std::string_view text) {
  PredictionSet preds;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!have_header) {
        preds.model_id = j.at("model_id").get<std::string>();
        preds.threshold = j.at("threshold").get<double>();
        for (const auto& e : j.value("errors", nlohmann::json::array())) {
          preds.errors.push_back({e.at("sample_id").get<std::string>(), e.at("message").get<std::string>()});
        }
        have_header = true;
        continue;
      }
      const auto id = j.at("sample_id").get<std::string>();
      if (!preds.entries.emplace(id, rle_from_json(j.at("mask"))).second) throw Error("duplicate sample_id " + id);
    } catch (const nlohmann::json::exception& e) {
      throw Error("predictions line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error("predictions line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw Error("predictions file has no header line");
  return preds;
}

void save_predictions(const PredictionSet& preds, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_predictions(preds));
}

PredictionSet load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_predictions(ss.str());
}

EvaluationResult evaluate_predictions(const PredictionSet& preds, const DatasetManifest& manifest) {
  EvaluationResult result;
  result.model_id = preds.model_id;
  result.threshold = preds.threshold;

  std::map<std::string, const Sample*> by_id;
  for (const auto& s : manifest.samples) by_id.emplace(s.sample_id, &s);
  for (const auto& [id, rle] : preds.entries) {
    if (!by_id.contains(id)) throw Error("prediction for unknown sample " + id);
  }
  if (manifest.samples.empty()) throw Error("cannot evaluate an empty manifest");

  std::vector<EvalPair> all;
  std::vector<EvalPair> positives;
  for (const auto& s : manifest.samples) {
    EvalPair p;
    p.sample_id = s.sample_id;
    p.concept_family = s.concept_family;
    p.gt = rle_decode(s.mask);
    const auto it = preds.entries.find(s.sample_id);
    if (it == preds.entries.end()) {
      result.warnings.push_back("missing prediction for " + s.sample_id + ", scored as empty");
      p.pred = BinaryMask(p.gt.height(), p.gt.width());
    } else {
      p.pred = rle_decode(it->second);
      if (!p.pred.same_shape(p.gt)) {
        result.warnings.push_back("prediction for " + s.sample_id + " has the wrong size, scored as empty");
        p.pred = BinaryMask(p.gt.height(), p.gt.width());
      }
    }
    if (!s.is_negative) positives.push_back(p);
    all.push_back(std::move(p));
  }
  result.with_negatives = per_concept_report(all);
  if (!positives.empty()) result.positives_only = per_concept_report(positives);
  return result;
}

nlohmann::ordered_json result_to_json(const EvaluationResult& result) {
  nlohmann::ordered_json j;
  j["model_id"] = result.model_id;
  j["threshold"] = result.threshold;
  j["with_negatives"] = report_to_json(result.with_negatives);
  j["positives_only"] = result.positives_only.n == 0 ? nlohmann::ordered_json(nullptr)
                                                     : report_to_json(result.positives_only);
  j["warnings"] = result.warnings;
  return j;
}

std::string result_to_text(const EvaluationResult& result) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "model %s, threshold %.2f\n\n", result.model_id.c_str(), result.threshold);
  std::string out = buf;
  out += report_to_table(result.with_negatives, "All samples");
  out += "\n";
  if (result.positives_only.n == 0) {
    out += "Positives only: no positive samples\n";
  } else {
    out += report_to_table(result.positives_only, "Positives");
  }
  if (!result.warnings.empty()) {
    out += "\n" + std::to_string(result.warnings.size()) + " warning(s):\n";
    for (const auto& w : result.warnings) out += "  " + w + "\n";
  }
  return out;
}

void write_reports(const EvaluationResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "report.json", result_to_json(result).dump(2) + "\n");
  write_file_atomic(dir / "report.txt", result_to_text(result));
}

}  // namespace groundseg::evaluation
