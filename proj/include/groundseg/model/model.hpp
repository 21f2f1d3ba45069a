#pragma once

// Language-conditioned promptable segmentation model.
//
//   image  --> ImageEncoder (frozen) -------------------------------+
//     |                                                             v
//     +--> PromptEncoder(image tokens + text) --> adapters --> MaskDecoder --> logits
//
// The prompt encoder's final hidden states at text positions become sparse
// prompt tokens; the end-marker state becomes a dense vector added to every
// cell of the image grid before decoding.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "groundseg/hashing.hpp"
#include "groundseg/image.hpp"
#include "groundseg/model/config.hpp"
#include "groundseg/model/layers.hpp"

namespace groundseg::model {

/// Byte-level tokenizer with an explicit end marker.
struct TextTokenizer {
  static constexpr int kEndMarker = 256;
  static constexpr int kVocab = 257;

  /// Token ids of `text` followed by the end marker. Throws if the result
  /// exceeds `max_tokens` or the text is empty.
  [[nodiscard]] static std::vector<int> encode(std::string_view text, int max_tokens) {
    if (text.empty()) throw Error("prompt text must be non-empty");
    if (static_cast<int>(text.size()) + 1 > max_tokens) {
      throw Error("prompt of " + std::to_string(text.size()) + " bytes exceeds the context window of " +
                  std::to_string(max_tokens - 1));
    }
    std::vector<int> ids;
    ids.reserve(text.size() + 1);
    for (const unsigned char ch : text) ids.push_back(ch);
    ids.push_back(kEndMarker);
    return ids;
  }
};

/// Image resized so its longer side is image_size, then zero-padded to a square.
struct PreparedImage {
  RgbImage padded;
  int resized_height = 0;
  int resized_width = 0;
  int original_height = 0;
  int original_width = 0;
};

[[nodiscard]] inline PreparedImage prepare_image(const RgbImage& image, int image_size) {
  PreparedImage p;
  p.original_height = image.height;
  p.original_width = image.width;
  const RgbImage resized = resize_longest_side(image, image_size);
  p.resized_height = resized.height;
  p.resized_width = resized.width;
  p.padded = pad_to_square(resized, image_size);
  return p;
}

/// Ground truth in model space: resize (nearest), pad, binarise, erode.
[[nodiscard]] inline BinaryMask prepare_target(const BinaryMask& mask, int image_size, int erode_kernel) {
  BinaryMask m = pad_to_square(resize_longest_side(mask, image_size), image_size);
  if (erode_kernel > 1) m = erode(m, erode_kernel, 1);
  return m;
}

template <typename T>
struct ImageEmbedding {
  Matrix<T> grid;  // (side*side) x d_img, row-major over the patch grid
  int side = 0;
};

template <typename T>
struct PromptEncoding {
  Var<T> text_states;  // T x d_t
  Var<T> eos_state;    // 1 x d_t
  int text_token_count = 0;
};

template <typename T>
struct AdaptedPrompt {
  Var<T> sparse;  // T x d_dec
  Var<T> dense;   // 1 x d_dec
};

/// Graph outputs at model resolution (image_size x image_size).
template <typename T>
struct MaskOutput {
  Var<T> logits;
  Var<T> probabilities;
};

/// Probabilities and logits at a caller-visible resolution.
struct MaskPrediction {
  int height = 0;
  int width = 0;
  std::vector<float> probabilities;
  std::vector<float> logits;

  [[nodiscard]] BinaryMask binarize(double threshold) const {
    BinaryMask m(height, width);
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        if (probabilities[static_cast<std::size_t>(r) * width + c] >= threshold) m.set(r, c);
      }
    }
    return m;
  }
};

template <typename T>
class SegmentationModel {
 public:
  explicit SegmentationModel(ModelConfig cfg) : cfg_(std::move(cfg)), store_(cfg_.seed) {
    cfg_.validate();
    build();
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] ParameterStore<T>& parameters() { return store_; }
  [[nodiscard]] const ParameterStore<T>& parameters() const { return store_; }

  /// Whether the optimiser may update parameters of `group` at this scale.
  [[nodiscard]] bool trainable(ParamGroup group) const {
    switch (group) {
      case ParamGroup::image_encoder: return false;
      case ParamGroup::prompt_encoder_base: return cfg_.scale == ModelScale::tiny;
      case ParamGroup::prompt_encoder_lora:
      case ParamGroup::adapter:
      case ParamGroup::decoder: return true;
    }
    return false;
  }

  // -- image encoder ---------------------------------------------------------

  /// Frozen patch encoder. Input must already be image_size x image_size.
  [[nodiscard]] ImageEmbedding<T> encode_image(const RgbImage& padded) const {
    if (padded.height != cfg_.image_size || padded.width != cfg_.image_size) {
      throw DimensionError("encode_image expects " + std::to_string(cfg_.image_size) + "x" +
                           std::to_string(cfg_.image_size) + " input, got " + std::to_string(padded.height) +
                           "x" + std::to_string(padded.width));
    }
    ++encode_image_calls_;
    const int side = cfg_.grid_side();
    const int s = cfg_.patch_stride;
    Matrix<T> patches(side * side, s * s * 3);
    static constexpr double kMean[3] = {0.485, 0.456, 0.406};
    static constexpr double kStd[3] = {0.229, 0.224, 0.225};
    for (int pi = 0; pi < side; ++pi) {
      for (int pj = 0; pj < side; ++pj) {
        const auto row = static_cast<Eigen::Index>(pi) * side + pj;
        Eigen::Index col = 0;
        for (int dy = 0; dy < s; ++dy) {
          for (int dx = 0; dx < s; ++dx) {
            for (int ch = 0; ch < 3; ++ch) {
              const double v = padded.at(pi * s + dy, pj * s + dx, ch) / 255.0;
              patches(row, col++) = static_cast<T>((v - kMean[ch]) / kStd[ch]);
            }
          }
        }
      }
    }
    // Encoder leaves are frozen, so no backward graph is recorded here.
    Var<T> z = nn::add(patch_embed_(Var<T>(std::move(patches))), Var<T>(image_pos_));
    const auto detached = [](const Var<T>& v) { return Var<T>(v.value()); };
    z = nn::add(z, detached(img_mlp_(img_norm1_(z))));
    z = img_norm2_(z);
    return ImageEmbedding<T>{z.value(), side};
  }

  /// encode_image with a content-addressed cache keyed by the padded pixels.
  [[nodiscard]] ImageEmbedding<T> encode_image_cached(const RgbImage& padded, const std::string& key = {}) const {
    const std::string k = key.empty() ? image_digest(padded) : key;
    {
      std::lock_guard lock(cache_mutex_);
      if (const auto it = embed_cache_.find(k); it != embed_cache_.end()) {
        ++cache_hits_;
        return it->second;
      }
    }
    auto emb = encode_image(padded);
    std::lock_guard lock(cache_mutex_);
    embed_cache_.emplace(k, emb);
    return emb;
  }

  [[nodiscard]] std::size_t encode_image_calls() const { return encode_image_calls_.load(); }
  [[nodiscard]] std::size_t cache_hits() const { return cache_hits_.load(); }
  void clear_cache() {
    std::lock_guard lock(cache_mutex_);
    embed_cache_.clear();
  }

  // -- prompt encoder --------------------------------------------------------

  [[nodiscard]] PromptEncoding<T> encode_prompt(const ImageEmbedding<T>& image, std::string_view text) const {
    const auto ids = TextTokenizer::encode(text, cfg_.max_text_tokens);
    const int n_text = static_cast<int>(ids.size()) - 1;

    std::vector<int> positions(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
    Var<T> text_tokens = nn::add(nn::gather_rows(token_embed_, ids), nn::gather_rows(text_pos_, positions));

    Var<T> seq = text_tokens;
    int n_image = 0;
    if (!cfg_.text_only) {
      Var<T> vis = nn::add(vision_proj_(Var<T>(merge_2x2(image))), vision_pos_);
      n_image = static_cast<int>(vis.rows());
      seq = nn::concat_rows(std::vector<Var<T>>{vis, text_tokens});
    }
    const Var<T> mask(causal_mask(static_cast<int>(seq.rows())));
    for (const auto& layer : prompt_layers_) {
      const Var<T> h = layer.norm1(seq);
      seq = nn::add(seq, layer.attn(h, h, h, &mask));
      seq = nn::add(seq, layer.mlp(layer.norm2(seq)));
    }
    seq = prompt_final_norm_(seq);
    PromptEncoding<T> enc;
    enc.text_token_count = n_text;
    enc.text_states = nn::slice_rows(seq, n_image, n_text);
    enc.eos_state = nn::slice_rows(seq, n_image + n_text, 1);
    return enc;
  }

  // -- adapters --------------------------------------------------------------

  [[nodiscard]] AdaptedPrompt<T> adapt_prompt(const PromptEncoding<T>& enc) const {
    return AdaptedPrompt<T>{sparse_proj_(sparse_norm_(enc.text_states)), dense_mlp_(enc.eos_state)};
  }

  // -- mask decoder ----------------------------------------------------------

  [[nodiscard]] MaskOutput<T> decode_mask(const ImageEmbedding<T>& image, const AdaptedPrompt<T>& prompt) const {
    const int side = cfg_.grid_side();
    if (image.side != side || image.grid.cols() != cfg_.d_img) throw DimensionError("image embedding shape mismatch");
    if (prompt.sparse.cols() != cfg_.d_dec || prompt.dense.rows() != 1 || prompt.dense.cols() != cfg_.d_dec) {
      throw DimensionError("adapted prompt shape mismatch");
    }
    Var<T> keys = nn::add_row(neck_(Var<T>(image.grid)), prompt.dense);
    const Var<T> key_pe(decoder_pe_);

    Var<T> sparse = prompt.sparse;
    if (cfg_.decoder_token_positions) {
      sparse = nn::add(sparse, nn::slice_rows(token_pos_, 0, sparse.rows()));
    }
    Var<T> queries = nn::concat_rows(std::vector<Var<T>>{output_token_, sparse});
    const Var<T> query_pe = queries;

    for (const auto& b : blocks_) {
      Var<T> q = nn::add(queries, query_pe);
      queries = b.norm1(nn::add(queries, b.self_attn(q, q, queries)));
      q = nn::add(queries, query_pe);
      Var<T> k = nn::add(keys, key_pe);
      queries = b.norm2(nn::add(queries, b.token_to_image(q, k, keys)));
      queries = b.norm3(nn::add(queries, b.mlp(queries)));
      q = nn::add(queries, query_pe);
      k = nn::add(keys, key_pe);
      keys = b.norm4(nn::add(keys, b.image_to_token(k, q, queries)));
    }
    {
      const Var<T> q = nn::add(queries, query_pe);
      const Var<T> k = nn::add(keys, key_pe);
      queries = final_norm_(nn::add(queries, final_attn_(q, k, keys)));
    }
    const Var<T> out_token = nn::slice_rows(queries, 0, 1);

    Var<T> up = nn::conv_transpose_2x2(keys, side, side, up1_weight_, up1_bias_);
    up = nn::gelu(up_norm_(up));
    up = nn::gelu(nn::conv_transpose_2x2(up, 2 * side, 2 * side, up2_weight_, up2_bias_));
    const Var<T> weights = hyper_mlp_(out_token);  // 1 x (d_dec/8)
    const int up_side = cfg_.upscaled_side();
    Var<T> low = nn::reshape(nn::matmul_nt(up, weights), up_side, up_side);
    Var<T> logits = nn::resize_map(low, cfg_.image_size, cfg_.image_size);
    return MaskOutput<T>{logits, nn::sigmoid(logits)};
  }

  /// Full pipeline on a prepared image, at model resolution. Builds a graph
  /// when any trainable parameter participates.
  [[nodiscard]] MaskOutput<T> forward_prepared(const ImageEmbedding<T>& image, std::string_view text) const {
    return decode_mask(image, adapt_prompt(encode_prompt(image, text)));
  }

  /// Inference on an arbitrary image: output resized back to the original size.
  [[nodiscard]] MaskPrediction forward(const RgbImage& image, std::string_view text, bool use_cache = true) const {
    const PreparedImage prep = prepare_image(image, cfg_.image_size);
    const ImageEmbedding<T> emb = use_cache ? encode_image_cached(prep.padded) : encode_image(prep.padded);
    const MaskOutput<T> out = forward_prepared(emb, text);
    return restore(out, prep);
  }

  /// Crops the padding and resizes model-resolution logits to the original image.
  [[nodiscard]] MaskPrediction restore(const MaskOutput<T>& out, const PreparedImage& prep) const {
    std::vector<float> crop(static_cast<std::size_t>(prep.resized_height) * prep.resized_width);
    for (int r = 0; r < prep.resized_height; ++r) {
      for (int c = 0; c < prep.resized_width; ++c) {
        crop[static_cast<std::size_t>(r) * prep.resized_width + c] = static_cast<float>(out.logits.value()(r, c));
      }
    }
    MaskPrediction pred;
    pred.height = prep.original_height;
    pred.width = prep.original_width;
    pred.logits = resize_bilinear(crop, prep.resized_height, prep.resized_width, pred.height, pred.width);
    pred.probabilities.resize(pred.logits.size());
    for (std::size_t i = 0; i < pred.logits.size(); ++i) {
      pred.probabilities[i] = 1.0F / (1.0F + std::exp(-pred.logits[i]));
    }
    return pred;
  }

 private:
  struct PromptLayer {
    LayerNorm<T> norm1;
    Attention<T> attn;
    LayerNorm<T> norm2;
    Mlp<T> mlp;
  };

  struct DecoderBlock {
    Attention<T> self_attn;
    LayerNorm<T> norm1;
    Attention<T> token_to_image;
    LayerNorm<T> norm2;
    Mlp<T> mlp;
    LayerNorm<T> norm3;
    Attention<T> image_to_token;
    LayerNorm<T> norm4;
  };

  void build() {
    auto& st = store_;
    const int patch_dim = cfg_.patch_stride * cfg_.patch_stride * 3;
    const int side = cfg_.grid_side();

    // image encoder
    patch_embed_ = Linear<T>(st, "image_encoder.patch", ParamGroup::image_encoder, patch_dim, cfg_.d_img);
    image_pos_ = sinusoid_grid<T>(side, cfg_.d_img);
    img_norm1_ = LayerNorm<T>(st, "image_encoder.norm1", ParamGroup::image_encoder, cfg_.d_img);
    img_mlp_ = Mlp<T>(st, "image_encoder.mlp", ParamGroup::image_encoder, {cfg_.d_img, 2 * cfg_.d_img, cfg_.d_img},
                      Mlp<T>::Act::gelu);
    img_norm2_ = LayerNorm<T>(st, "image_encoder.norm2", ParamGroup::image_encoder, cfg_.d_img);

    // prompt encoder
    const auto base = ParamGroup::prompt_encoder_base;
    token_embed_ = st.normal("prompt_encoder.token_embed", base, TextTokenizer::kVocab, cfg_.d_t, 0.02 * 25);
    text_pos_ = st.normal("prompt_encoder.text_pos", base, cfg_.max_text_tokens, cfg_.d_t, 0.02 * 25);
    vision_proj_ = Linear<T>(st, "prompt_encoder.vision_proj", base, cfg_.d_img, cfg_.d_t);
    vision_pos_ = st.normal("prompt_encoder.vision_pos", base, (side / 2) * (side / 2), cfg_.d_t, 0.02 * 25);
    for (int l = 0; l < cfg_.prompt_layers; ++l) {
      const std::string n = "prompt_encoder.layers." + std::to_string(l);
      PromptLayer layer;
      layer.norm1 = LayerNorm<T>(st, n + ".norm1", base, cfg_.d_t);
      layer.attn = Attention<T>(st, n + ".attn", base, cfg_.d_t, cfg_.prompt_heads);
      layer.attn.attach_lora(st, n + ".attn", cfg_.lora_rank, cfg_.lora_alpha);
      layer.norm2 = LayerNorm<T>(st, n + ".norm2", base, cfg_.d_t);
      layer.mlp = Mlp<T>(st, n + ".mlp", base, {cfg_.d_t, 2 * cfg_.d_t, cfg_.d_t}, Mlp<T>::Act::gelu);
      prompt_layers_.push_back(std::move(layer));
    }
    prompt_final_norm_ = LayerNorm<T>(st, "prompt_encoder.final_norm", base, cfg_.d_t);

    // adapters
    sparse_norm_ = LayerNorm<T>(st, "adapter.sparse.norm", ParamGroup::adapter, cfg_.d_t);
    sparse_proj_ = Linear<T>(st, "adapter.sparse.proj", ParamGroup::adapter, cfg_.d_t, cfg_.d_dec);
    dense_mlp_ = Mlp<T>(st, "adapter.dense", ParamGroup::adapter, {cfg_.d_t, cfg_.d_dec, cfg_.d_dec}, Mlp<T>::Act::silu);

    // decoder
    const auto dec = ParamGroup::decoder;
    const int d = cfg_.d_dec;
    neck_ = Linear<T>(st, "decoder.neck", dec, cfg_.d_img, d);
    decoder_pe_ = sinusoid_grid<T>(side, d);
    output_token_ = st.normal("decoder.output_token", dec, 1, d, 1.0);
    if (cfg_.decoder_token_positions) token_pos_ = st.normal("decoder.token_pos", dec, cfg_.max_text_tokens, d, 0.5);
    for (int b = 0; b < cfg_.decoder_blocks; ++b) {
      const std::string n = "decoder.blocks." + std::to_string(b);
      DecoderBlock blk;
      blk.self_attn = Attention<T>(st, n + ".self_attn", dec, d, cfg_.decoder_heads);
      blk.norm1 = LayerNorm<T>(st, n + ".norm1", dec, d);
      blk.token_to_image = Attention<T>(st, n + ".token_to_image", dec, d, cfg_.decoder_heads);
      blk.norm2 = LayerNorm<T>(st, n + ".norm2", dec, d);
      blk.mlp = Mlp<T>(st, n + ".mlp", dec, {d, 2 * d, d}, Mlp<T>::Act::relu);
      blk.norm3 = LayerNorm<T>(st, n + ".norm3", dec, d);
      blk.image_to_token = Attention<T>(st, n + ".image_to_token", dec, d, cfg_.decoder_heads);
      blk.norm4 = LayerNorm<T>(st, n + ".norm4", dec, d);
      blocks_.push_back(std::move(blk));
    }
    final_attn_ = Attention<T>(st, "decoder.final_attn", dec, d, cfg_.decoder_heads);
    final_norm_ = LayerNorm<T>(st, "decoder.final_norm", dec, d);
    const int c4 = d / 4;
    const int c8 = d / 8;
    up1_weight_ = st.uniform("decoder.upscale1.weight", dec, d, 4 * c4, 1.0 / std::sqrt(static_cast<double>(d)));
    up1_bias_ = st.constant("decoder.upscale1.bias", dec, 1, c4, 0.0);
    up_norm_ = LayerNorm<T>(st, "decoder.upscale_norm", dec, c4);
    up2_weight_ = st.uniform("decoder.upscale2.weight", dec, c4, 4 * c8, 1.0 / std::sqrt(static_cast<double>(c4)));
    up2_bias_ = st.constant("decoder.upscale2.bias", dec, 1, c8, 0.0);
    hyper_mlp_ = Mlp<T>(st, "decoder.hyper", dec, {d, d, d, c8}, Mlp<T>::Act::relu);

    for (auto& p : st.params()) p.var.set_requires_grad(trainable(p.group));
  }

  // Averages 2x2 neighbourhoods of the patch grid into one vision token each.
  [[nodiscard]] Matrix<T> merge_2x2(const ImageEmbedding<T>& image) const {
    const int side = image.side;
    const int half = side / 2;
    Matrix<T> out(half * half, image.grid.cols());
    for (int i = 0; i < half; ++i) {
      for (int j = 0; j < half; ++j) {
        const auto r00 = static_cast<Eigen::Index>(2 * i) * side + 2 * j;
        const auto r10 = r00 + side;
        out.row(static_cast<Eigen::Index>(i) * half + j) =
            (image.grid.row(r00) + image.grid.row(r00 + 1) + image.grid.row(r10) + image.grid.row(r10 + 1)) * T(0.25);
      }
    }
    return out;
  }

  [[nodiscard]] static Matrix<T> causal_mask(int n) {
    Matrix<T> m = Matrix<T>::Zero(n, n);
    for (int r = 0; r < n; ++r) {
      for (int c = r + 1; c < n; ++c) m(r, c) = static_cast<T>(-1e9);
    }
    return m;
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;

  Linear<T> patch_embed_;
  Matrix<T> image_pos_;
  LayerNorm<T> img_norm1_;
  Mlp<T> img_mlp_;
  LayerNorm<T> img_norm2_;

  Var<T> token_embed_;
  Var<T> text_pos_;
  Linear<T> vision_proj_;
  Var<T> vision_pos_;
  std::vector<PromptLayer> prompt_layers_;
  LayerNorm<T> prompt_final_norm_;

  LayerNorm<T> sparse_norm_;
  Linear<T> sparse_proj_;
  Mlp<T> dense_mlp_;

  Linear<T> neck_;
  Matrix<T> decoder_pe_;
  Var<T> output_token_;
  Var<T> token_pos_;
  std::vector<DecoderBlock> blocks_;
  Attention<T> final_attn_;
  LayerNorm<T> final_norm_;
  Var<T> up1_weight_;
  Var<T> up1_bias_;
  LayerNorm<T> up_norm_;
  Var<T> up2_weight_;
  Var<T> up2_bias_;
  Mlp<T> hyper_mlp_;

  mutable std::atomic<std::size_t> encode_image_calls_{0};
  mutable std::atomic<std::size_t> cache_hits_{0};
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, ImageEmbedding<T>> embed_cache_;
};

}  // namespace groundseg::model
