#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundseg/core.hpp"
#include "groundseg/model/model.hpp"

namespace groundseg::training {

using model::Matrix;

enum class DataGroup { literal, referring, open_vocab_regions, conversational_pos, conversational_neg };

/// What a single draw represents in the Phase 2 mixture.
enum class SampleCategory { pretrain, conversational_pos, conversational_neg };

[[nodiscard]] std::string to_string(DataGroup g);
[[nodiscard]] std::string to_string(SampleCategory c);

/// Group a manifest sample belongs to, decided by provenance and polarity.
[[nodiscard]] DataGroup group_of(const Sample& s);

using DataGroups = std::map<DataGroup, std::vector<Sample>>;

[[nodiscard]] DataGroups group_samples(const std::vector<Sample>& samples);

struct TrainConfig {
  int phase = 1;
  double lr_peak = 1e-4;
  double lr_min = 1e-6;
  int warmup_steps = 1000;
  int total_steps = 100000;
  int batch_size = 6;
  int grad_accum = 8;
  double lambda_dice = 0.25;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int erode_kernel = 5;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints

  void validate() const;
};

[[nodiscard]] nlohmann::ordered_json to_json(const TrainConfig& c);
/// Unknown keys are rejected; missing keys keep their defaults.
[[nodiscard]] TrainConfig train_config_from_json(const nlohmann::json& j);

inline constexpr double kDiceSmooth = 1.0;
inline constexpr double kProbClamp = 1e-7;

template <typename T>
struct LossValue {
  T total{};
  T bce{};
  T dice{};
  Matrix<T> grad;  // dL/dp, same shape as the probabilities
};

/// Mean per-pixel binary cross-entropy plus lambda times the smoothed Dice loss.
///
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before both terms. The
/// returned gradient is evaluated at the clamped values and passed straight
/// through the clamp, so saturated wrong pixels still receive a signal.
template <typename T>
[[nodiscard]] LossValue<T> segmentation_loss(const Matrix<T>& prob, const Matrix<T>& gt, double lambda_dice) {
  if (prob.rows() != gt.rows() || prob.cols() != gt.cols()) throw DimensionError("loss: prediction/target shape mismatch");
  const auto n = static_cast<double>(prob.size());
  LossValue<T> out;
  out.grad.resize(prob.rows(), prob.cols());
  double bce = 0.0;
  double inter = 0.0;
  double psum = 0.0;
  double gsum = 0.0;
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const double p = std::clamp(static_cast<double>(prob.data()[i]), kProbClamp, 1.0 - kProbClamp);
    const double g = gt.data()[i];
    bce -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
    inter += p * g;
    psum += p;
    gsum += g;
  }
  const double num = 2.0 * inter + kDiceSmooth;
  const double den = psum + gsum + kDiceSmooth;
  const double dice = 1.0 - num / den;
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const double p = std::clamp(static_cast<double>(prob.data()[i]), kProbClamp, 1.0 - kProbClamp);
    const double g = gt.data()[i];
    const double d_bce = (p - g) / (p * (1.0 - p) * n);
    const double d_dice = -(2.0 * g * den - num) / (den * den);
    out.grad.data()[i] = static_cast<T>(d_bce + lambda_dice * d_dice);
  }
  out.bce = static_cast<T>(bce / n);
  out.dice = static_cast<T>(dice);
  out.total = static_cast<T>(bce / n + lambda_dice * dice);
  return out;
}

/// Linear warmup to lr_peak, then cosine decay to lr_min at total_steps.
[[nodiscard]] double lr_at_step(const TrainConfig& cfg, int step);

struct Draw {
  const Sample* sample = nullptr;
  SampleCategory category = SampleCategory::pretrain;
};

/// Draws `n` samples with replacement according to the phase's mixture.
[[nodiscard]] std::vector<Draw> sample_batch(int phase, const DataGroups& groups, std::mt19937_64& rng, int n);

/// Decoupled-weight-decay Adam over the trainable parameters of a model.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const std::vector<model::NamedParam<float>>& params);

  /// One update with learning rate `lr`. Parameters without gradients are skipped.
  void step(std::vector<model::NamedParam<float>>& params, const TrainConfig& cfg, double lr);

  [[nodiscard]] std::int64_t steps_taken() const { return t_; }
  [[nodiscard]] std::map<std::string, Matrix<float>>& first_moments() { return m_; }
  [[nodiscard]] std::map<std::string, Matrix<float>>& second_moments() { return v_; }
  [[nodiscard]] const std::map<std::string, Matrix<float>>& first_moments() const { return m_; }
  [[nodiscard]] const std::map<std::string, Matrix<float>>& second_moments() const { return v_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }

 private:
  std::map<std::string, Matrix<float>> m_;
  std::map<std::string, Matrix<float>> v_;
  std::int64_t t_ = 0;
};

struct LossRow {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  SampleCategory category = SampleCategory::pretrain;
};

void write_loss_csv(const std::vector<LossRow>& rows, const std::filesystem::path& path);

using ImageProvider = std::function<RgbImage(const ImageRecord&)>;

/// Loads images from `root / uri`.
[[nodiscard]] ImageProvider directory_images(const std::filesystem::path& root);

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Owns the optimisation state for one phase. The model is borrowed.
class Trainer {
 public:
  Trainer(model::SegmentationModel<float>& model, TrainConfig cfg, DataGroups groups, ImageProvider images);

  /// Copies weights from a model or training archive, leaving optimiser state fresh.
  void init_from(const std::filesystem::path& checkpoint);
  /// Restores weights, optimiser moments, step counter and loss statistics.
  void resume_from(const std::filesystem::path& checkpoint);
  void save_checkpoint(const std::filesystem::path& path) const;

  /// Runs optimiser steps until `step()` reaches `until` (clamped to total_steps).
  /// Writes `ckpt_<step>.bin` into `checkpoint_dir` every checkpoint_every steps
  /// when a directory is given.
  void run(int until, const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);
  void run_to_end(const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt) {
    run(cfg_.total_steps, checkpoint_dir);
  }

  [[nodiscard]] int step() const { return step_; }
  [[nodiscard]] const std::vector<LossRow>& loss_log() const { return log_; }
  [[nodiscard]] double loss_ema() const { return loss_ema_; }
  [[nodiscard]] const TrainConfig& config() const { return cfg_; }

  /// Prepared image embedding and eroded target for one sample (cached).
  struct Prepared {
    model::ImageEmbedding<float> embedding;
    Matrix<float> target;
  };
  [[nodiscard]] const Prepared& prepare(const Sample& s);

 private:
  void train_step();

  model::SegmentationModel<float>& model_;
  TrainConfig cfg_;
  DataGroups groups_;
  ImageProvider images_;
  AdamW optimizer_;
  int step_ = 0;
  double loss_ema_ = 0.0;
  std::int64_t loss_count_ = 0;
  std::vector<LossRow> log_;
  std::map<std::string, model::PreparedImage> image_cache_;
  std::map<std::string, Prepared> sample_cache_;
};

}  // namespace groundseg::training
