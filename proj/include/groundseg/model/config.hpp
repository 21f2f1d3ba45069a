#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace groundseg::model {

enum class ModelScale { tiny, full };

/// Architecture hyper-parameters. Defaults are the CPU-trainable tiny scale.
struct ModelConfig {
  int image_size = 256;
  int patch_stride = 16;
  int d_img = 32;
  int d_dec = 32;
  int d_t = 48;
  int decoder_blocks = 2;
  int decoder_heads = 4;
  int prompt_layers = 2;
  int prompt_heads = 4;
  int max_text_tokens = 96;  // context window including the end marker
  int lora_rank = 16;
  double lora_alpha = 32.0;
  ModelScale scale = ModelScale::tiny;
  bool text_only = false;                // prompt encoder sees no image tokens
  bool decoder_token_positions = false;  // learned position offsets on sparse tokens
  std::uint64_t seed = 0;

  [[nodiscard]] int grid_side() const { return image_size / patch_stride; }
  /// Side of the decoder's upscaled map (two stride-2 stages).
  [[nodiscard]] int upscaled_side() const { return 4 * grid_side(); }

  /// Throws groundseg::Error on the first violated invariant.
  void validate() const;
};

[[nodiscard]] nlohmann::ordered_json to_json(const ModelConfig& cfg);
/// Unknown keys are rejected; missing keys keep their defaults.
[[nodiscard]] ModelConfig model_config_from_json(const nlohmann::json& j);

[[nodiscard]] std::string to_string(ModelScale s);

}  // namespace groundseg::model
