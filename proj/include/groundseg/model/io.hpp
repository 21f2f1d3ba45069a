#pragma once

#include <filesystem>
#include <memory>

#include "groundseg/model/checkpoint.hpp"
#include "groundseg/model/model.hpp"

namespace groundseg::model {

/// Archive holding only the model config and weights.
template <typename T>
[[nodiscard]] Archive model_archive(const SegmentationModel<T>& m) {
  Archive a;
  a.metadata["kind"] = "model";
  a.metadata["model_config"] = to_json(m.config());
  export_tensors(m.parameters().params(), "param/", a);
  return a;
}

template <typename T>
void save_model(const SegmentationModel<T>& m, const std::filesystem::path& path) {
  write_archive(model_archive(m), path);
}

/// Builds a model from any archive carrying a model config and "param/" tensors
/// (plain model files and training checkpoints alike).
template <typename T>
[[nodiscard]] std::unique_ptr<SegmentationModel<T>> load_model(const Archive& a) {
  if (!a.metadata.contains("model_config")) throw Error("archive has no model_config");
  auto m = std::make_unique<SegmentationModel<T>>(model_config_from_json(nlohmann::json::parse(a.metadata["model_config"].dump())));
  import_tensors(m->parameters().params(), "param/", a);
  return m;
}

template <typename T>
[[nodiscard]] std::unique_ptr<SegmentationModel<T>> load_model(const std::filesystem::path& path) {
  return load_model<T>(read_archive(path));
}

}  // namespace groundseg::model
