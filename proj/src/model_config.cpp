#include "groundseg/model/config.hpp"

#include <set>

#include "groundseg/error.hpp"

namespace groundseg::model {

std::string to_string(ModelScale s) { return s == ModelScale::tiny ? "tiny" : "full"; }

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw Error("model config: " + msg);
  };
  need(image_size > 0 && patch_stride > 0, "image_size and patch_stride must be positive");
  need(image_size % patch_stride == 0, "image_size must be divisible by patch_stride");
  need(grid_side() % 2 == 0, "patch grid side must be even (2x2 token merge)");
  need(image_size % upscaled_side() == 0, "image_size must be a multiple of the upscaled map side");
  need(d_img > 0 && d_t > 0, "channel widths must be positive");
  need(d_dec > 0 && d_dec % 8 == 0, "d_dec must be a positive multiple of 8");
  need(decoder_heads > 0 && d_dec % decoder_heads == 0, "d_dec must be divisible by decoder_heads");
  need(prompt_heads > 0 && d_t % prompt_heads == 0, "d_t must be divisible by prompt_heads");
  need(decoder_blocks >= 1 && prompt_layers >= 1, "need at least one decoder block and prompt layer");
  need(max_text_tokens >= 2, "max_text_tokens must be >= 2");
  need(lora_rank >= 1 && lora_alpha > 0.0, "LoRA rank and alpha must be positive");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["patch_stride"] = c.patch_stride;
  j["d_img"] = c.d_img;
  j["d_dec"] = c.d_dec;
  j["d_t"] = c.d_t;
  j["decoder_blocks"] = c.decoder_blocks;
  j["decoder_heads"] = c.decoder_heads;
  j["prompt_layers"] = c.prompt_layers;
  j["prompt_heads"] = c.prompt_heads;
  j["max_text_tokens"] = c.max_text_tokens;
  j["lora_rank"] = c.lora_rank;
  j["lora_alpha"] = c.lora_alpha;
  j["scale"] = to_string(c.scale);
  j["text_only"] = c.text_only;
  j["decoder_token_positions"] = c.decoder_token_positions;
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{
      "image_size",    "patch_stride",    "d_img",      "d_dec",     "d_t",   "decoder_blocks",
      "decoder_heads", "prompt_layers",   "prompt_heads", "max_text_tokens", "lora_rank",
      "lora_alpha",    "scale",           "text_only",  "decoder_token_positions", "seed"};
  if (!j.is_object()) throw Error("model config must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!kKeys.contains(k)) throw Error("model config: unknown key '" + k + "'");
  }
  ModelConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("image_size", c.image_size);
  get("patch_stride", c.patch_stride);
  get("d_img", c.d_img);
  get("d_dec", c.d_dec);
  get("d_t", c.d_t);
  get("decoder_blocks", c.decoder_blocks);
  get("decoder_heads", c.decoder_heads);
  get("prompt_layers", c.prompt_layers);
  get("prompt_heads", c.prompt_heads);
  get("max_text_tokens", c.max_text_tokens);
  get("lora_rank", c.lora_rank);
  get("lora_alpha", c.lora_alpha);
  get("text_only", c.text_only);
  get("decoder_token_positions", c.decoder_token_positions);
  get("seed", c.seed);
  if (j.contains("scale")) {
    const auto s = j.at("scale").get<std::string>();
    if (s == "tiny") {
      c.scale = ModelScale::tiny;
    } else if (s == "full") {
      c.scale = ModelScale::full;
    } else {
      throw Error("model config: scale must be tiny or full");
    }
  }
  c.validate();
  return c;
}

}  // namespace groundseg::model
