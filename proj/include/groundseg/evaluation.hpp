#pragma once

// Benchmark evaluation: run a model over a manifest, binarize, score, report.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "groundseg/core.hpp"
#include "groundseg/metrics.hpp"
#include "groundseg/model/model.hpp"
#include "groundseg/training.hpp"

namespace groundseg::evaluation {

inline constexpr double kDefaultThreshold = 0.5;

struct PredictionError {
  std::string sample_id;
  std::string message;

  friend bool operator==(const PredictionError&, const PredictionError&) = default;
};

struct PredictionSet {
  std::string model_id;
  double threshold = kDefaultThreshold;
  std::map<std::string, MaskRLE> entries;
  std::vector<PredictionError> errors;

  friend bool operator==(const PredictionSet&, const PredictionSet&) = default;
};

/// One forward pass per sample. Failures become empty masks plus an error row.
[[nodiscard]] PredictionSet predict_dataset(const model::SegmentationModel<float>& model, const std::string& model_id,
                                            const DatasetManifest& manifest, const training::ImageProvider& images,
                                            double threshold = kDefaultThreshold, int workers = 1);

/// predictions.jsonl: a header line {model_id, threshold, errors} then one
/// {sample_id, mask} line per entry in sample_id order.
[[nodiscard]] std::string serialize_predictions(const PredictionSet& preds);
[[nodiscard]] PredictionSet parse_predictions(std::string_view text);
void save_predictions(const PredictionSet& preds, const std::filesystem::path& path);
[[nodiscard]] PredictionSet load_predictions(const std::filesystem::path& path);

struct EvaluationResult {
  std::string model_id;
  double threshold = kDefaultThreshold;
  ConceptReport with_negatives;
  // Empty (n == 0) when the manifest holds no positive samples.
  ConceptReport positives_only;
  std::vector<std::string> warnings;
};

/// Throws Error when a prediction names a sample the manifest does not contain.
/// Missing predictions, and predictions of the wrong size, score as empty masks.
[[nodiscard]] EvaluationResult evaluate_predictions(const PredictionSet& preds, const DatasetManifest& manifest);

[[nodiscard]] nlohmann::ordered_json result_to_json(const EvaluationResult& result);
[[nodiscard]] std::string result_to_text(const EvaluationResult& result);

/// Writes report.json and report.txt into `dir`.
void write_reports(const EvaluationResult& result, const std::filesystem::path& dir);

}  // namespace groundseg::evaluation
