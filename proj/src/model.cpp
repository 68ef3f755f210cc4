#include "m2i2/model.hpp"

#include <algorithm>
#include <cmath>

#include "m2i2/error.hpp"
#include "m2i2/ops.hpp"

namespace m2i2 {

namespace {

TransformerConfig stack_config(const TrainConfig& c, std::size_t depth,
                               std::size_t max_seq) {
  TransformerConfig t;
  t.dim = c.dim;
  t.heads = c.heads;
  t.depth = depth;
  t.mlp_ratio = c.mlp_ratio;
  t.max_seq = max_seq;
  t.dropout_rate = c.dropout;
  return t;
}

Tensor trunc_normal(Shape shape, double std, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    x = z * std;
  }
  return Tensor(std::move(shape), std::move(v), true);
}

LinearWeights init_linear(std::size_t in, std::size_t out, double std, Rng& rng) {
  return {trunc_normal({in, out}, std, rng), Tensor::zeros({out}, true)};
}

NormWeights init_norm(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

AttentionWeights init_attention(std::size_t d, double std, Rng& rng) {
  AttentionWeights a;
  a.q = init_linear(d, d, std, rng);
  a.k = init_linear(d, d, std, rng);
  a.v = init_linear(d, d, std, rng);
  a.o = init_linear(d, d, std, rng);
  return a;
}

StackWeights init_stack(const TransformerConfig& t, bool cross, double std,
                        Rng& rng) {
  StackWeights s;
  const auto d = t.dim;
  for (std::size_t i = 0; i < t.depth; ++i) {
    BlockWeights b;
    b.ln_self = init_norm(d);
    b.self = init_attention(d, std, rng);
    b.has_cross = cross;
    if (cross) {
      b.ln_cross = init_norm(d);
      b.cross = init_attention(d, std, rng);
    }
    b.ln_mlp = init_norm(d);
    b.fc1 = init_linear(d, d * t.mlp_ratio, std, rng);
    b.fc2 = init_linear(d * t.mlp_ratio, d, std, rng);
    s.blocks.push_back(std::move(b));
  }
  s.ln_final = init_norm(d);
  return s;
}

ImageEncoderWeights init_image_encoder(const ModelConfig& c, Rng& rng) {
  const auto d = c.image_encoder.dim;
  ImageEncoderWeights w;
  w.patch_embed = init_linear(c.patch_dim(), d, c.init_std, rng);
  w.cls = trunc_normal({1, d}, c.init_std, rng);
  w.pos = trunc_normal({1 + c.grid().count(), d}, c.init_std, rng);
  w.stack = init_stack(c.image_encoder, false, c.init_std, rng);
  return w;
}

TextEncoderWeights init_text_encoder(const ModelConfig& c, Rng& rng) {
  const auto d = c.text_encoder.dim;
  TextEncoderWeights w;
  w.tok = trunc_normal({c.vocab_size, d}, c.init_std, rng);
  w.pos = trunc_normal({c.text_len, d}, c.init_std, rng);
  w.stack = init_stack(c.text_encoder, false, c.init_std, rng);
  return w;
}

ImageDecoderWeights init_image_decoder(const ModelConfig& c, Rng& rng) {
  const auto d = c.image_decoder.dim;
  ImageDecoderWeights w;
  w.embed = init_linear(c.image_encoder.dim, d, c.init_std, rng);
  w.mask_token = trunc_normal({1, d}, c.init_std, rng);
  w.pos = trunc_normal({1 + c.grid().count(), d}, c.init_std, rng);
  w.stack = init_stack(c.image_decoder, false, c.init_std, rng);
  w.pixel_head = init_linear(d, c.patch_dim(), c.init_std, rng);
  return w;
}

std::size_t checked_dim(const Tensor& x, std::size_t expected, const char* who) {
  if (x.rank() != 2 || x.cols() != expected) {
    throw ContractError(std::string(who) + ": features " + shape_str(x.shape()) +
                        " do not have width " + std::to_string(expected));
  }
  return x.rows();
}

Tensor maybe_dropout(const Tensor& x, const TransformerConfig& cfg,
                     ForwardContext& ctx) {
  if (!ctx.train || cfg.dropout_rate <= 0.0) return x;
  if (!ctx.rng) throw ContractError("dropout requires a forward rng");
  return ops::dropout(x, cfg.dropout_rate, *ctx.rng);
}

}  // namespace

ModelConfig model_config(const TrainConfig& c, std::size_t vocab_size) {
  ModelConfig m;
  m.image_size = c.image_size;
  m.patch_size = c.patch_size;
  m.channels = c.channels;
  m.vocab_size = vocab_size;
  m.text_len = c.text_len;
  m.answer_len = c.answer_len;
  m.proj_dim = c.proj_dim;
  m.init_std = c.init_std;
  m.temperature = c.temperature;
  m.answer_memory = c.answer_memory == "cls" ? AnswerMemory::cls : AnswerMemory::full;
  const auto grid = (c.image_size / c.patch_size) * (c.image_size / c.patch_size);
  m.image_encoder = stack_config(c, c.depth_image_encoder, 1 + grid);
  m.text_encoder = stack_config(c, c.depth_text_encoder, c.text_len);
  m.fusion = stack_config(c, c.depth_fusion, c.text_len);
  m.image_decoder = stack_config(c, c.depth_image_decoder, 1 + grid);
  m.answer_decoder = stack_config(c, c.depth_answer_decoder, c.answer_len + 1);
  return m;
}

std::vector<NamedTensor> named_params(ModelParams& params) {
  std::vector<NamedTensor> out;
  visit_params(params, [&](const std::string& name, Tensor& t) {
    out.push_back({name, t});
  });
  return out;
}

std::vector<NamedTensor> named_momentum(MomentumParams& momentum) {
  std::vector<NamedTensor> out;
  visit_momentum(momentum, [&](const std::string& name, Tensor& t) {
    out.push_back({name, t});
  });
  return out;
}

AnswerDecoderWeights init_answer_decoder(const ModelConfig& c, Rng& rng) {
  const auto d = c.answer_decoder.dim;
  AnswerDecoderWeights w;
  w.tok = trunc_normal({c.vocab_size, d}, c.init_std, rng);
  w.pos = trunc_normal({c.answer_len + 1, d}, c.init_std, rng);
  w.stack = init_stack(c.answer_decoder, true, c.init_std, rng);
  w.vocab_head = init_linear(d, c.vocab_size, c.init_std, rng);
  return w;
}

ModelParams init_params(const ModelConfig& c, Rng& rng) {
  if (c.vocab_size <= token::reserved_count) {
    throw ConfigError("init_params: vocabulary has no regular tokens");
  }
  ModelParams p;
  p.image_encoder = init_image_encoder(c, rng);
  p.text_encoder = init_text_encoder(c, rng);
  p.fusion.stack = init_stack(c.fusion, true, c.init_std, rng);
  p.image_decoder = init_image_decoder(c, rng);
  p.answer_decoder = init_answer_decoder(c, rng);
  const auto d = c.fusion.dim;
  p.itc_image = init_linear(c.image_encoder.dim, c.proj_dim, c.init_std, rng);
  p.itc_text = init_linear(c.text_encoder.dim, c.proj_dim, c.init_std, rng);
  p.itm_head = init_linear(d, 2, c.init_std, rng);
  p.mlm_head = init_linear(d, c.vocab_size, c.init_std, rng);
  p.temperature = Tensor::scalar(c.temperature, true);
  return p;
}

MomentumParams make_momentum(const ModelParams& params) {
  MomentumParams m;
  m.image_encoder = params.image_encoder;
  m.text_encoder = params.text_encoder;
  m.itc_image = params.itc_image;
  m.itc_text = params.itc_text;
  visit_momentum(m, [](const std::string&, Tensor& t) { t = t.detach(); });
  return m;
}

std::vector<std::uint8_t> key_padding_mask(std::size_t queries,
                                           std::span<const std::uint8_t> key_valid) {
  std::vector<std::uint8_t> keep(queries * key_valid.size());
  for (std::size_t i = 0; i < queries; ++i)
    std::copy(key_valid.begin(), key_valid.end(),
              keep.begin() + static_cast<std::ptrdiff_t>(i * key_valid.size()));
  return keep;
}

std::vector<std::uint8_t> causal_mask(std::size_t n) {
  std::vector<std::uint8_t> keep(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) keep[i * n + j] = 1;
  return keep;
}

Tensor multi_head_attention(const AttentionWeights& w, const Tensor& queries,
                            const Tensor& keys_values, std::size_t heads,
                            std::span<const std::uint8_t> keep,
                            std::vector<Tensor>* capture) {
  const auto d = queries.cols();
  if (keys_values.cols() != d) {
    throw ContractError("attention: query width " + std::to_string(d) +
                        " differs from key width " +
                        std::to_string(keys_values.cols()));
  }
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor q = ops::linear(queries, w.q.w, w.q.b);
  const Tensor k = ops::linear(keys_values, w.k.w, w.k.b);
  const Tensor v = ops::linear(keys_values, w.v.w, w.v.b);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = ops::slice_cols(q, h * dh, dh);
    const Tensor kh = ops::slice_cols(k, h * dh, dh);
    const Tensor vh = ops::slice_cols(v, h * dh, dh);
    const Tensor scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    const Tensor probs = ops::masked_softmax(scores, keep);
    if (capture) capture->push_back(probs);
    outs.push_back(ops::matmul(probs, vh));
  }
  const Tensor merged = heads == 1 ? outs.front() : ops::concat_cols(outs);
  return ops::linear(merged, w.o.w, w.o.b);
}

namespace {

Tensor run_stack_impl(const StackWeights& w, const TransformerConfig& cfg,
                      Tensor x, std::span<const std::uint8_t> self_keep,
                      const Tensor& memory,
                      std::span<const std::uint8_t> memory_keep,
                      ForwardContext& ctx, AttentionCapture* capture) {
  if (w.blocks.empty()) return x;
  for (const auto& b : w.blocks) {
    const Tensor h = ops::layer_norm(x, b.ln_self.gain, b.ln_self.bias);
    x = ops::add(x, maybe_dropout(multi_head_attention(b.self, h, h, cfg.heads,
                                                       self_keep, nullptr),
                                  cfg, ctx));
    if (b.has_cross) {
      if (!memory.defined()) {
        throw ContractError("run_stack: cross-attention block without memory");
      }
      std::vector<Tensor> heads;
      const Tensor hc = ops::layer_norm(x, b.ln_cross.gain, b.ln_cross.bias);
      x = ops::add(x, maybe_dropout(multi_head_attention(b.cross, hc, memory,
                                                         cfg.heads, memory_keep,
                                                         capture ? &heads : nullptr),
                                    cfg, ctx));
      if (capture) capture->layers.push_back(std::move(heads));
    }
    const Tensor hm = ops::layer_norm(x, b.ln_mlp.gain, b.ln_mlp.bias);
    const Tensor mlp =
        ops::linear(ops::gelu(ops::linear(hm, b.fc1.w, b.fc1.b)), b.fc2.w, b.fc2.b);
    x = ops::add(x, maybe_dropout(mlp, cfg, ctx));
  }
  return ops::layer_norm(x, w.ln_final.gain, w.ln_final.bias);
}

}  // namespace

Tensor run_stack(const StackWeights& w, const TransformerConfig& cfg, Tensor x,
                 std::span<const std::uint8_t> self_keep, const Tensor& memory,
                 std::span<const std::uint8_t> memory_keep, ForwardContext& ctx) {
  return run_stack_impl(w, cfg, std::move(x), self_keep, memory, memory_keep,
                        ctx, nullptr);
}

Tensor encode_image(const ImageEncoderWeights& w, const ModelConfig& cfg,
                    const Tensor& visible_patches,
                    std::span<const std::size_t> positions, ForwardContext& ctx) {
  const auto n_grid = w.pos.rows() - 1;
  if (visible_patches.rank() != 2 || visible_patches.rows() != positions.size() ||
      visible_patches.cols() != w.patch_embed.w.rows()) {
    throw DimensionError("encode_image: patches " +
                         shape_str(visible_patches.shape()) + " for " +
                         std::to_string(positions.size()) + " positions");
  }
  std::vector<std::size_t> pos_rows(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= n_grid) {
      throw IndexError("encode_image: position " + std::to_string(positions[i]) +
                       " outside a grid of " + std::to_string(n_grid));
    }
    pos_rows[i] = positions[i] + 1;
  }
  const std::size_t zero = 0;
  const Tensor cls = ops::add(w.cls, ops::gather_rows(w.pos, {&zero, 1}));
  std::vector<Tensor> parts = {cls};
  if (!positions.empty()) {
    parts.push_back(ops::add(
        ops::linear(visible_patches, w.patch_embed.w, w.patch_embed.b),
        ops::gather_rows(w.pos, pos_rows)));
  }
  const Tensor x = parts.size() == 1 ? cls : ops::concat_rows(parts);
  return run_stack(w.stack, cfg.image_encoder, x, {}, Tensor(), {}, ctx);
}

Tensor decode_image(const ImageDecoderWeights& w, const ModelConfig& cfg,
                    const Tensor& encoder_features,
                    std::span<const std::size_t> visible_positions,
                    std::span<const std::size_t> mask_positions,
                    ForwardContext& ctx) {
  const auto n_grid = w.pos.rows() - 1;
  const auto rows = checked_dim(encoder_features, w.embed.w.rows(), "decode_image");
  if (rows != 1 + visible_positions.size()) {
    throw ContractError("decode_image: " + std::to_string(rows) +
                        " feature rows for " +
                        std::to_string(visible_positions.size()) +
                        " visible positions");
  }
  const auto pdim = w.pixel_head.w.cols();
  if (mask_positions.empty()) return Tensor::zeros({0, pdim});
  std::vector<std::uint8_t> used(n_grid, 0);
  for (auto p : visible_positions) {
    if (p >= n_grid) throw IndexError("decode_image: visible position out of grid");
    used[p] = 1;
  }
  for (auto p : mask_positions) {
    if (p >= n_grid) throw IndexError("decode_image: mask position out of grid");
    if (used[p]) {
      throw ContractError("decode_image: mask position " + std::to_string(p) +
                          " is also visible");
    }
  }
  const Tensor projected = ops::linear(encoder_features, w.embed.w, w.embed.b);
  const std::vector<std::size_t> all_mask(1 + n_grid, 0);
  Tensor full = ops::gather_rows(w.mask_token, all_mask);
  std::vector<std::size_t> slots = {0};
  for (auto p : visible_positions) slots.push_back(p + 1);
  full = ops::scatter_rows(full, projected, slots);
  full = ops::add(full, w.pos);
  full = run_stack(w.stack, cfg.image_decoder, full, {}, Tensor(), {}, ctx);
  std::vector<std::size_t> out_rows;
  for (auto p : mask_positions) out_rows.push_back(p + 1);
  return ops::linear(ops::gather_rows(full, out_rows), w.pixel_head.w,
                     w.pixel_head.b);
}

std::vector<std::uint8_t> text_key_valid(std::span<const TokenId> ids) {
  std::vector<std::uint8_t> valid(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != token::pad || i == 0;
  return valid;
}

Tensor encode_text(const TextEncoderWeights& w, const ModelConfig& cfg,
                   std::span<const TokenId> ids, ForwardContext& ctx) {
  if (ids.empty()) throw ContractError("encode_text: empty sequence");
  if (ids.size() > w.pos.rows()) {
    throw DimensionError("encode_text: sequence of " + std::to_string(ids.size()) +
                         " exceeds " + std::to_string(w.pos.rows()) + " positions");
  }
  const auto vocab = w.tok.rows();
  for (auto id : ids) {
    if (id >= vocab) {
      throw IndexError("encode_text: token id " + std::to_string(id) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
  }
  std::vector<std::size_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  const Tensor x = ops::add(ops::gather_rows(w.tok, ids), ops::gather_rows(w.pos, pos));
  const auto valid = text_key_valid(ids);
  const auto keep = key_padding_mask(ids.size(), valid);
  return run_stack(w.stack, cfg.text_encoder, x, keep, Tensor(), {}, ctx);
}

Tensor fuse(const FusionWeights& w, const ModelConfig& cfg,
            const Tensor& text_features, std::span<const std::uint8_t> text_valid,
            const Tensor& image_features, ForwardContext& ctx) {
  const auto d = cfg.fusion.dim;
  const auto l = checked_dim(text_features, d, "fuse (text)");
  checked_dim(image_features, d, "fuse (image)");
  if (text_valid.size() != l) {
    throw ContractError("fuse: text mask length differs from text features");
  }
  const auto keep = key_padding_mask(l, text_valid);
  return run_stack_impl(w.stack, cfg.fusion, text_features, keep, image_features,
                        {}, ctx, ctx.cross_capture);
}

Tensor decode_answer_sequence(const AnswerDecoderWeights& w,
                              const ModelConfig& cfg, const Tensor& fused,
                              std::span<const std::uint8_t> fused_valid,
                              std::span<const TokenId> prefix,
                              ForwardContext& ctx) {
  if (prefix.empty()) throw ContractError("decode_answer: empty prefix");
  if (prefix.front() != token::bos) {
    throw ContractError("decode_answer: prefix must start with BOS");
  }
  if (prefix.size() > w.pos.rows()) {
    throw DimensionError("decode_answer: prefix of " + std::to_string(prefix.size()) +
                         " exceeds " + std::to_string(w.pos.rows()) + " positions");
  }
  const auto l = checked_dim(fused, cfg.answer_decoder.dim, "decode_answer");
  if (fused_valid.size() != l) {
    throw ContractError("decode_answer: context mask length differs from context");
  }
  const auto vocab = w.tok.rows();
  for (auto id : prefix) {
    if (id >= vocab) throw IndexError("decode_answer: token id outside vocabulary");
  }
  const std::size_t zero = 0;
  const Tensor cls = ops::gather_rows(fused, {&zero, 1});
  Tensor memory;
  std::vector<std::uint8_t> memory_valid;
  if (cfg.answer_memory == AnswerMemory::cls) {
    memory = cls;
    memory_valid = {1};
  } else {
    const std::vector<Tensor> parts = {cls, fused};
    memory = ops::concat_rows(parts);
    memory_valid.push_back(1);
    memory_valid.insert(memory_valid.end(), fused_valid.begin(), fused_valid.end());
  }
  std::vector<std::size_t> pos(prefix.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  const Tensor x =
      ops::add(ops::gather_rows(w.tok, prefix), ops::gather_rows(w.pos, pos));
  const auto self_keep = causal_mask(prefix.size());
  const auto mem_keep = key_padding_mask(prefix.size(), memory_valid);
  const Tensor h =
      run_stack(w.stack, cfg.answer_decoder, x, self_keep, memory, mem_keep, ctx);
  return ops::linear(h, w.vocab_head.w, w.vocab_head.b);
}

Tensor decode_answer(const AnswerDecoderWeights& w, const ModelConfig& cfg,
                     const Tensor& fused, std::span<const std::uint8_t> fused_valid,
                     std::span<const TokenId> prefix, ForwardContext& ctx) {
  const Tensor logits = decode_answer_sequence(w, cfg, fused, fused_valid, prefix, ctx);
  const std::size_t last = logits.rows() - 1;
  return ops::reshape(ops::gather_rows(logits, {&last, 1}), {logits.cols()});
}

Tensor interpolate_positional(const Tensor& pos, PatchGrid old_grid,
                              PatchGrid new_grid) {
  if (pos.rank() != 2 || pos.rows() != 1 + old_grid.count()) {
    throw ContractError("interpolate_positional: " + shape_str(pos.shape()) +
                        " is not 1 + " + std::to_string(old_grid.rows) + "x" +
                        std::to_string(old_grid.cols) + " rows");
  }
  if (old_grid.count() == 0 || new_grid.count() == 0) {
    throw ContractError("interpolate_positional: empty grid");
  }
  const auto d = pos.cols();
  const auto& src = pos.values();
  std::vector<double> out((1 + new_grid.count()) * d);
  std::copy_n(src.data(), d, out.data());
  auto cell = [&](std::size_t r, std::size_t c, std::size_t k) {
    return src[(1 + r * old_grid.cols + c) * d + k];
  };
  auto coord = [](std::size_t i, std::size_t n_old, std::size_t n_new) {
    const double f = (static_cast<double>(i) + 0.5) * static_cast<double>(n_old) /
                         static_cast<double>(n_new) - 0.5;
    return std::clamp(f, 0.0, static_cast<double>(n_old - 1));
  };
  for (std::size_t r = 0; r < new_grid.rows; ++r) {
    const double fy = coord(r, old_grid.rows, new_grid.rows);
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, old_grid.rows - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < new_grid.cols; ++c) {
      const double fx = coord(c, old_grid.cols, new_grid.cols);
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, old_grid.cols - 1);
      const double tx = fx - static_cast<double>(x0);
      double* dst = out.data() + (1 + r * new_grid.cols + c) * d;
      for (std::size_t k = 0; k < d; ++k) {
        const double a = cell(y0, x0, k), b = cell(y0, x1, k);
        const double cc = cell(y1, x0, k), dd = cell(y1, x1, k);
        const double top = a + tx * (b - a);
        const double bot = cc + tx * (dd - cc);
        dst[k] = top + ty * (bot - top);
      }
    }
  }
  return Tensor({1 + new_grid.count(), d}, std::move(out), pos.requires_grad());
}

void resize_image_positional(ModelParams& params, ModelConfig& cfg,
                             std::size_t new_image_size) {
  if (new_image_size % cfg.patch_size != 0) {
    throw ConfigError("image size " + std::to_string(new_image_size) +
                      " is not a multiple of the patch size");
  }
  const PatchGrid old_grid = cfg.grid();
  const PatchGrid new_grid = {new_image_size / cfg.patch_size,
                              new_image_size / cfg.patch_size};
  if (old_grid == new_grid) return;
  params.image_encoder.pos =
      interpolate_positional(params.image_encoder.pos, old_grid, new_grid);
  params.image_decoder.pos =
      interpolate_positional(params.image_decoder.pos, old_grid, new_grid);
  cfg.image_size = new_image_size;
  cfg.image_encoder.max_seq = 1 + new_grid.count();
  cfg.image_decoder.max_seq = 1 + new_grid.count();
}

}  // namespace m2i2
