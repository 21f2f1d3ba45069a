#include "groundseg/training.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "groundseg/model/io.hpp"

namespace groundseg::training {

std::string to_string(DataGroup g) {
  switch (g) {
    case DataGroup::literal: return "literal";
    case DataGroup::referring: return "referring";
    case DataGroup::open_vocab_regions: return "open_vocab_regions";
    case DataGroup::conversational_pos: return "conversational_pos";
    case DataGroup::conversational_neg: return "conversational_neg";
  }
  return "unknown";
}

std::string to_string(SampleCategory c) {
  switch (c) {
    case SampleCategory::pretrain: return "pretrain";
    case SampleCategory::conversational_pos: return "conversational_pos";
    case SampleCategory::conversational_neg: return "conversational_neg";
  }
  return "unknown";
}

DataGroup group_of(const Sample& s) {
  if (s.is_negative) return DataGroup::conversational_neg;
  switch (s.provenance) {
    case Provenance::coco_instances: return DataGroup::literal;
    case Provenance::refcoco: return DataGroup::referring;
    case Provenance::coco_panoptic: return DataGroup::open_vocab_regions;
    case Provenance::engine:
    case Provenance::synthetic_test: return DataGroup::conversational_pos;
  }
  return DataGroup::conversational_pos;
}

DataGroups group_samples(const std::vector<Sample>& samples) {
  DataGroups g;
  for (const auto& s : samples) g[group_of(s)].push_back(s);
  return g;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw Error("train config: " + msg);
  };
  need(phase == 1 || phase == 2, "phase must be 1 or 2");
  need(total_steps > 0, "total_steps must be positive");
  need(warmup_steps >= 0 && warmup_steps < total_steps, "warmup_steps must be in [0, total_steps)");
  need(batch_size >= 1 && grad_accum >= 1, "batch_size and grad_accum must be >= 1");
  need(lambda_dice >= 0.0, "lambda_dice must be >= 0");
  need(lr_peak > 0.0 && lr_min >= 0.0 && lr_min <= lr_peak, "need 0 <= lr_min <= lr_peak, lr_peak > 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(erode_kernel >= 1 && erode_kernel % 2 == 1, "erode_kernel must be a positive odd number");
  need(checkpoint_every >= 0, "checkpoint_every must be >= 0");
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["phase"] = c.phase;
  j["lr_peak"] = c.lr_peak;
  j["lr_min"] = c.lr_min;
  j["warmup_steps"] = c.warmup_steps;
  j["total_steps"] = c.total_steps;
  j["batch_size"] = c.batch_size;
  j["grad_accum"] = c.grad_accum;
  j["lambda_dice"] = c.lambda_dice;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  j["erode_kernel"] = c.erode_kernel;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("train config must be a JSON object");
  TrainConfig c;
  const nlohmann::ordered_json defaults = to_json(c);
  for (const auto& [k, _] : j.items()) {
    if (!defaults.contains(k)) throw Error("train config: unknown key '" + k + "'");
  }
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("phase", c.phase);
  get("lr_peak", c.lr_peak);
  get("lr_min", c.lr_min);
  get("warmup_steps", c.warmup_steps);
  get("total_steps", c.total_steps);
  get("batch_size", c.batch_size);
  get("grad_accum", c.grad_accum);
  get("lambda_dice", c.lambda_dice);
  get("weight_decay", c.weight_decay);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("seed", c.seed);
  get("erode_kernel", c.erode_kernel);
  get("checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

double lr_at_step(const TrainConfig& cfg, int step) {
  if (step < 0 || step > cfg.total_steps) {
    throw Error("lr_at_step: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  }
  if (step < cfg.warmup_steps) return cfg.lr_peak * step / cfg.warmup_steps;
  const double u = static_cast<double>(step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * u)) / 2.0;
}

namespace {

const std::vector<Sample>& group_or_empty(const DataGroups& groups, DataGroup g) {
  static const std::vector<Sample> kEmpty;
  const auto it = groups.find(g);
  return it == groups.end() ? kEmpty : it->second;
}

// Uniform pick over the concatenation of the three pretraining groups.
const Sample* pick_pretrain(const DataGroups& groups, std::mt19937_64& rng) {
  const std::array<const std::vector<Sample>*, 3> parts{&group_or_empty(groups, DataGroup::literal),
                                                        &group_or_empty(groups, DataGroup::referring),
                                                        &group_or_empty(groups, DataGroup::open_vocab_regions)};
  std::size_t total = 0;
  for (const auto* p : parts) total += p->size();
  std::uniform_int_distribution<std::size_t> dist(0, total - 1);
  std::size_t k = dist(rng);
  for (const auto* p : parts) {
    if (k < p->size()) return &(*p)[k];
    k -= p->size();
  }
  return nullptr;
}

const Sample* pick(const std::vector<Sample>& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, v.size() - 1);
  return &v[dist(rng)];
}

}  // namespace

std::vector<Draw> sample_batch(int phase, const DataGroups& groups, std::mt19937_64& rng, int n) {
  const std::size_t pretrain_size = group_or_empty(groups, DataGroup::literal).size() +
                                    group_or_empty(groups, DataGroup::referring).size() +
                                    group_or_empty(groups, DataGroup::open_vocab_regions).size();
  if (pretrain_size == 0) throw Error("sample_batch: pretraining groups 1-3 are empty");
  const auto& pos = group_or_empty(groups, DataGroup::conversational_pos);
  const auto& neg = group_or_empty(groups, DataGroup::conversational_neg);
  if (phase == 2 && (pos.empty() || neg.empty())) {
    throw Error("sample_batch: phase 2 needs conversational positives and negatives");
  }
  if (phase != 1 && phase != 2) throw Error("sample_batch: phase must be 1 or 2");

  std::vector<Draw> out;
  out.reserve(static_cast<std::size_t>(n));
  std::uniform_int_distribution<int> category(0, 2);
  for (int i = 0; i < n; ++i) {
    if (phase == 1) {
      out.push_back({pick_pretrain(groups, rng), SampleCategory::pretrain});
      continue;
    }
    switch (category(rng)) {
      case 0: out.push_back({pick_pretrain(groups, rng), SampleCategory::pretrain}); break;
      case 1: out.push_back({pick(pos, rng), SampleCategory::conversational_pos}); break;
      default: out.push_back({pick(neg, rng), SampleCategory::conversational_neg}); break;
    }
  }
  return out;
}

AdamW::AdamW(const std::vector<model::NamedParam<float>>& params) {
  for (const auto& p : params) {
    if (!p.var.requires_grad()) continue;
    m_[p.name] = Matrix<float>::Zero(p.var.rows(), p.var.cols());
    v_[p.name] = Matrix<float>::Zero(p.var.rows(), p.var.cols());
  }
}

void AdamW::step(std::vector<model::NamedParam<float>>& params, const TrainConfig& cfg, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto decay = static_cast<float>(1.0 - lr * cfg.weight_decay);
  const auto eps = static_cast<float>(cfg.adam_eps);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  for (auto& p : params) {
    if (!p.var.requires_grad() || !p.var.has_grad()) continue;
    auto& m = m_.at(p.name);
    auto& v = v_.at(p.name);
    const auto& g = p.var.grad();
    m = b1 * m + (1.0F - b1) * g;
    v = b2 * v + (1.0F - b2) * g.cwiseProduct(g);
    auto& w = p.var.mutable_value();
    w *= decay;
    w.array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
}

void write_loss_csv(const std::vector<LossRow>& rows, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "step,lr,loss,bce,dice,category\n";
  out.precision(9);
  for (const auto& r : rows) {
    out << r.step << ',' << r.lr << ',' << r.loss << ',' << r.bce << ',' << r.dice << ',' << to_string(r.category)
        << '\n';
  }
  write_file_atomic(path, out.str());
}

ImageProvider directory_images(const std::filesystem::path& root) {
  return [root](const ImageRecord& rec) { return load_image(root / rec.uri); };
}

Trainer::Trainer(model::SegmentationModel<float>& model, TrainConfig cfg, DataGroups groups, ImageProvider images)
    : model_(model), cfg_(std::move(cfg)), groups_(std::move(groups)), images_(std::move(images)) {
  cfg_.validate();
  optimizer_ = AdamW(model_.parameters().params());
}

const Trainer::Prepared& Trainer::prepare(const Sample& s) {
  if (const auto it = sample_cache_.find(s.sample_id); it != sample_cache_.end()) return it->second;
  const int size = model_.config().image_size;
  auto img_it = image_cache_.find(s.image.image_id);
  if (img_it == image_cache_.end()) {
    const RgbImage img = images_(s.image);
    if (img.height != s.image.height || img.width != s.image.width) {
      throw DimensionError("image " + s.image.image_id + " is " + std::to_string(img.height) + "x" +
                           std::to_string(img.width) + " but the manifest says " + std::to_string(s.image.height) +
                           "x" + std::to_string(s.image.width));
    }
    img_it = image_cache_.emplace(s.image.image_id, model::prepare_image(img, size)).first;
  }
  Prepared p;
  p.embedding = model_.encode_image_cached(img_it->second.padded, s.image.image_id);
  const BinaryMask target = model::prepare_target(rle_decode(s.mask), size, cfg_.erode_kernel);
  p.target.resize(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) p.target(r, c) = target.at(r, c) ? 1.0F : 0.0F;
  }
  return sample_cache_.emplace(s.sample_id, std::move(p)).first->second;
}

void Trainer::train_step() {
  auto& params = model_.parameters().params();
  for (auto& p : params) p.var.zero_grad();

  // The draw for step k depends only on (seed, k), so resuming replays it exactly.
  std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                    static_cast<std::uint32_t>(step_)};
  std::mt19937_64 rng(seq);
  const int n = cfg_.batch_size * cfg_.grad_accum;
  const auto draws = sample_batch(cfg_.phase, groups_, rng, n);
  const double lr = lr_at_step(cfg_, step_);
  const auto inv_n = static_cast<float>(1.0 / n);

  for (const auto& d : draws) {
    const Prepared& prep = prepare(*d.sample);
    const auto out = model_.forward_prepared(prep.embedding, d.sample->prompt);
    const auto loss = segmentation_loss(out.probabilities.value(), prep.target, cfg_.lambda_dice);
    if (!std::isfinite(loss.total)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step_) + " on sample " + d.sample->sample_id +
                          " (bce " + std::to_string(loss.bce) + ", dice " + std::to_string(loss.dice) + ")");
    }
    nn::backward(out.probabilities, Matrix<float>(loss.grad * inv_n));
    log_.push_back({step_, lr, loss.total, loss.bce, loss.dice, d.category});
    ++loss_count_;
    loss_ema_ = loss_count_ == 1 ? loss.total : 0.98 * loss_ema_ + 0.02 * loss.total;
  }
  optimizer_.step(params, cfg_, lr);
  ++step_;
}

void Trainer::run(int until, const std::optional<std::filesystem::path>& checkpoint_dir) {
  until = std::min(until, cfg_.total_steps);
  while (step_ < until) {
    train_step();
    if (checkpoint_dir && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) {
      std::filesystem::create_directories(*checkpoint_dir);
      save_checkpoint(*checkpoint_dir / ("ckpt_" + std::to_string(step_) + ".bin"));
    }
  }
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  model::Archive a = model::model_archive(model_);
  a.metadata["kind"] = "training";
  a.metadata["train_config"] = to_json(cfg_);
  a.metadata["step"] = step_;
  a.metadata["optimizer_steps"] = optimizer_.steps_taken();
  a.metadata["loss_stats"] = {{"ema", loss_ema_}, {"count", loss_count_}};
  for (const auto& [name, m] : optimizer_.first_moments()) {
    model::TensorRecord rec{"adam_m/" + name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                            std::vector<float>(m.data(), m.data() + m.size())};
    a.tensors.push_back(std::move(rec));
  }
  for (const auto& [name, v] : optimizer_.second_moments()) {
    model::TensorRecord rec{"adam_v/" + name, {static_cast<std::uint64_t>(v.rows()), static_cast<std::uint64_t>(v.cols())},
                            std::vector<float>(v.data(), v.data() + v.size())};
    a.tensors.push_back(std::move(rec));
  }
  write_archive(a, path);
}

void Trainer::init_from(const std::filesystem::path& checkpoint) {
  const model::Archive a = model::read_archive(checkpoint);
  model::import_tensors(model_.parameters().params(), "param/", a);
  model_.clear_cache();
  sample_cache_.clear();
}

void Trainer::resume_from(const std::filesystem::path& checkpoint) {
  const model::Archive a = model::read_archive(checkpoint);
  if (a.metadata.value("kind", "") != "training") throw Error(checkpoint.string() + " is not a training checkpoint");
  model::import_tensors(model_.parameters().params(), "param/", a);
  for (auto& [name, m] : optimizer_.first_moments()) {
    const auto* rec = a.find("adam_m/" + name);
    if (rec == nullptr || rec->data.size() != static_cast<std::size_t>(m.size())) {
      throw Error("checkpoint lacks optimiser state for " + name);
    }
    std::copy(rec->data.begin(), rec->data.end(), m.data());
  }
  for (auto& [name, v] : optimizer_.second_moments()) {
    const auto* rec = a.find("adam_v/" + name);
    if (rec == nullptr || rec->data.size() != static_cast<std::size_t>(v.size())) {
      throw Error("checkpoint lacks optimiser state for " + name);
    }
    std::copy(rec->data.begin(), rec->data.end(), v.data());
  }
  step_ = a.metadata.at("step").get<int>();
  optimizer_.set_steps_taken(a.metadata.at("optimizer_steps").get<std::int64_t>());
  loss_ema_ = a.metadata.at("loss_stats").at("ema").get<double>();
  loss_count_ = a.metadata.at("loss_stats").at("count").get<std::int64_t>();
  model_.clear_cache();
  sample_cache_.clear();
}

}  // namespace groundseg::training
