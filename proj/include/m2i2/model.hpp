#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m2i2/config.hpp"
#include "m2i2/rng.hpp"
#include "m2i2/tensor.hpp"
#include "m2i2/text.hpp"
#include "m2i2/vision.hpp"

namespace m2i2 {

struct TransformerConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;  // 0 is allowed: the stack is then the identity
  std::size_t mlp_ratio = 4;
  std::size_t max_seq = 0;
  double dropout_rate = 0.0;

  std::size_t head_dim() const { return dim / heads; }
};

enum class AnswerMemory { full, cls };

// Shapes of every sub-network, derived from a TrainConfig and the vocabulary.
struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t vocab_size = 0;
  std::size_t text_len = 24;
  std::size_t answer_len = 8;
  std::size_t proj_dim = 64;
  double init_std = 0.02;
  double temperature = 0.07;
  AnswerMemory answer_memory = AnswerMemory::full;
  TransformerConfig image_encoder;
  TransformerConfig text_encoder;
  TransformerConfig fusion;
  TransformerConfig image_decoder;
  TransformerConfig answer_decoder;

  PatchGrid grid() const {
    return {image_size / patch_size, image_size / patch_size};
  }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

ModelConfig model_config(const TrainConfig& cfg, std::size_t vocab_size);

struct LinearWeights {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

struct NormWeights {
  Tensor gain;
  Tensor bias;
};

struct AttentionWeights {
  LinearWeights q, k, v, o;
};

struct BlockWeights {
  NormWeights ln_self;
  AttentionWeights self;
  bool has_cross = false;
  NormWeights ln_cross;
  AttentionWeights cross;
  NormWeights ln_mlp;
  LinearWeights fc1, fc2;
};

struct StackWeights {
  std::vector<BlockWeights> blocks;
  NormWeights ln_final;
};

struct ImageEncoderWeights {
  LinearWeights patch_embed;
  Tensor cls;  // [1, dim]
  Tensor pos;  // [1 + grid, dim], row 0 is the CLS slot
  StackWeights stack;
};

struct TextEncoderWeights {
  Tensor tok;  // [vocab, dim]
  Tensor pos;  // [text_len, dim]
  StackWeights stack;
};

struct FusionWeights {
  StackWeights stack;  // self + cross attention blocks
};

struct ImageDecoderWeights {
  LinearWeights embed;
  Tensor mask_token;  // [1, dim]
  Tensor pos;         // [1 + grid, dim]
  StackWeights stack;
  LinearWeights pixel_head;  // dim -> patch_dim
};

struct AnswerDecoderWeights {
  Tensor tok;  // [vocab, dim]
  Tensor pos;  // [answer_len + 1, dim]
  StackWeights stack;  // causal self + cross attention blocks
  LinearWeights vocab_head;
};

struct ModelParams {
  ImageEncoderWeights image_encoder;
  TextEncoderWeights text_encoder;
  FusionWeights fusion;
  ImageDecoderWeights image_decoder;
  AnswerDecoderWeights answer_decoder;
  LinearWeights itc_image;  // dim -> proj_dim
  LinearWeights itc_text;
  LinearWeights itm_head;  // dim -> 2
  LinearWeights mlm_head;  // dim -> vocab
  Tensor temperature;      // [1]
};

// Slow-moving copy of the unimodal encoders and the contrastive heads.
struct MomentumParams {
  ImageEncoderWeights image_encoder;
  TextEncoderWeights text_encoder;
  LinearWeights itc_image;
  LinearWeights itc_text;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Parameter visitors; names are dotted paths ("image_encoder.stack.0.fc1.w").
template <typename F>
void visit(const std::string& p, LinearWeights& w, F&& f) {
  f(p + ".w", w.w);
  f(p + ".b", w.b);
}
template <typename F>
void visit(const std::string& p, NormWeights& w, F&& f) {
  f(p + ".gain", w.gain);
  f(p + ".bias", w.bias);
}
template <typename F>
void visit(const std::string& p, AttentionWeights& w, F&& f) {
  visit(p + ".q", w.q, f);
  visit(p + ".k", w.k, f);
  visit(p + ".v", w.v, f);
  visit(p + ".o", w.o, f);
}
template <typename F>
void visit(const std::string& p, BlockWeights& w, F&& f) {
  visit(p + ".ln_self", w.ln_self, f);
  visit(p + ".self", w.self, f);
  if (w.has_cross) {
    visit(p + ".ln_cross", w.ln_cross, f);
    visit(p + ".cross", w.cross, f);
  }
  visit(p + ".ln_mlp", w.ln_mlp, f);
  visit(p + ".fc1", w.fc1, f);
  visit(p + ".fc2", w.fc2, f);
}
template <typename F>
void visit(const std::string& p, StackWeights& w, F&& f) {
  for (std::size_t i = 0; i < w.blocks.size(); ++i)
    visit(p + "." + std::to_string(i), w.blocks[i], f);
  visit(p + ".ln_final", w.ln_final, f);
}
template <typename F>
void visit(const std::string& p, ImageEncoderWeights& w, F&& f) {
  visit(p + ".patch_embed", w.patch_embed, f);
  f(p + ".cls", w.cls);
  f(p + ".pos", w.pos);
  visit(p + ".stack", w.stack, f);
}
template <typename F>
void visit(const std::string& p, TextEncoderWeights& w, F&& f) {
  f(p + ".tok", w.tok);
  f(p + ".pos", w.pos);
  visit(p + ".stack", w.stack, f);
}
template <typename F>
void visit(const std::string& p, FusionWeights& w, F&& f) {
  visit(p + ".stack", w.stack, f);
}
template <typename F>
void visit(const std::string& p, ImageDecoderWeights& w, F&& f) {
  visit(p + ".embed", w.embed, f);
  f(p + ".mask_token", w.mask_token);
  f(p + ".pos", w.pos);
  visit(p + ".stack", w.stack, f);
  visit(p + ".pixel_head", w.pixel_head, f);
}
template <typename F>
void visit(const std::string& p, AnswerDecoderWeights& w, F&& f) {
  f(p + ".tok", w.tok);
  f(p + ".pos", w.pos);
  visit(p + ".stack", w.stack, f);
  visit(p + ".vocab_head", w.vocab_head, f);
}
template <typename F>
void visit_params(ModelParams& m, F&& f) {
  visit("image_encoder", m.image_encoder, f);
  visit("text_encoder", m.text_encoder, f);
  visit("fusion", m.fusion, f);
  visit("image_decoder", m.image_decoder, f);
  visit("answer_decoder", m.answer_decoder, f);
  visit("itc_image", m.itc_image, f);
  visit("itc_text", m.itc_text, f);
  visit("itm_head", m.itm_head, f);
  visit("mlm_head", m.mlm_head, f);
  f(std::string("temperature"), m.temperature);
}
// Momentum tensors carry the same names as their online sources.
template <typename F>
void visit_momentum(MomentumParams& m, F&& f) {
  visit("image_encoder", m.image_encoder, f);
  visit("text_encoder", m.text_encoder, f);
  visit("itc_image", m.itc_image, f);
  visit("itc_text", m.itc_text, f);
}

std::vector<NamedTensor> named_params(ModelParams& params);
std::vector<NamedTensor> named_momentum(MomentumParams& momentum);

// Truncated-normal (std init_std, cut at 2 std) weights, zero biases, unit
// norm gains; every tensor requires a gradient.
ModelParams init_params(const ModelConfig& cfg, Rng& rng);
AnswerDecoderWeights init_answer_decoder(const ModelConfig& cfg, Rng& rng);
// Deep copy of the momentum subset, detached from gradient tracking.
MomentumParams make_momentum(const ModelParams& params);

struct Model {
  ModelConfig config;
  Vocab vocab;
  ModelParams params;
};

// Per-layer, per-head attention probabilities captured during a forward.
struct AttentionCapture {
  std::vector<std::vector<Tensor>> layers;  // [layer][head] -> [queries, keys]
};

struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;  // required when train and dropout > 0
  AttentionCapture* cross_capture = nullptr;
};

// Keep-mask for masked_softmax: queries x keys, key j usable iff key_valid[j].
std::vector<std::uint8_t> key_padding_mask(std::size_t queries,
                                           std::span<const std::uint8_t> key_valid);
// Lower-triangular mask combined with key validity.
std::vector<std::uint8_t> causal_mask(std::size_t n);

// Multi-head scaled dot-product attention (1/sqrt(head_dim) scaling).
Tensor multi_head_attention(const AttentionWeights& w, const Tensor& queries,
                            const Tensor& keys_values, std::size_t heads,
                            std::span<const std::uint8_t> keep,
                            std::vector<Tensor>* capture);

// Pre-norm transformer stack. `memory` (may be undefined) feeds the cross
// attention of blocks that have one.
Tensor run_stack(const StackWeights& w, const TransformerConfig& cfg, Tensor x,
                 std::span<const std::uint8_t> self_keep, const Tensor& memory,
                 std::span<const std::uint8_t> memory_keep, ForwardContext& ctx);

// [1 + N_vis, dim]; row 0 is the image summary.
Tensor encode_image(const ImageEncoderWeights& w, const ModelConfig& cfg,
                    const Tensor& visible_patches,
                    std::span<const std::size_t> positions, ForwardContext& ctx);

// Predicted pixels [n_masked, patch_dim] for the masked grid positions.
Tensor decode_image(const ImageDecoderWeights& w, const ModelConfig& cfg,
                    const Tensor& encoder_features,
                    std::span<const std::size_t> visible_positions,
                    std::span<const std::size_t> mask_positions,
                    ForwardContext& ctx);

// [L, dim]; PAD keys are masked out. Row 0 (CLS) is the text summary.
Tensor encode_text(const TextEncoderWeights& w, const ModelConfig& cfg,
                   std::span<const TokenId> ids, ForwardContext& ctx);

std::vector<std::uint8_t> text_key_valid(std::span<const TokenId> ids);

// Text stream with self attention plus cross attention to image features.
Tensor fuse(const FusionWeights& w, const ModelConfig& cfg,
            const Tensor& text_features, std::span<const std::uint8_t> text_valid,
            const Tensor& image_features, ForwardContext& ctx);

// Teacher-forced logits [prefix_len, vocab]; row j predicts token j + 1.
Tensor decode_answer_sequence(const AnswerDecoderWeights& w,
                              const ModelConfig& cfg, const Tensor& fused,
                              std::span<const std::uint8_t> fused_valid,
                              std::span<const TokenId> prefix,
                              ForwardContext& ctx);

// Next-token logits [vocab] for a prefix starting with BOS.
Tensor decode_answer(const AnswerDecoderWeights& w, const ModelConfig& cfg,
                     const Tensor& fused, std::span<const std::uint8_t> fused_valid,
                     std::span<const TokenId> prefix, ForwardContext& ctx);

// Bilinear resampling of a [1 + r*c, dim] grid embedding; row 0 is copied.
Tensor interpolate_positional(const Tensor& pos, PatchGrid old_grid,
                              PatchGrid new_grid);

// Switches the model to a new input resolution, resampling both grid
// positional tables.
void resize_image_positional(ModelParams& params, ModelConfig& cfg,
                             std::size_t new_image_size);

}  // namespace m2i2
