#include "m2i2/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "m2i2/error.hpp"
#include "m2i2/ops.hpp"

namespace m2i2 {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kShuffleTag = 0x5f1;
constexpr std::uint64_t kSampleTag = 0x5a7;
constexpr std::uint64_t kDropTag = 0xd07;
constexpr std::uint64_t kNegativeTag = 0x4e6;
constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kProbeTag = 0x9b0;

AugmentOptions train_augment(const TrainConfig& cfg) {
  AugmentOptions a;
  a.train = true;
  a.crop = cfg.aug_crop;
  a.flip = cfg.aug_flip;
  a.brightness = cfg.aug_brightness;
  return a;
}

Image load_for_model(const fs::path& path, const TrainConfig& cfg) {
  return to_channels(load_image(path), cfg.channels);
}

Tensor first_row(const Tensor& x) {
  const std::size_t zero = 0;
  return ops::gather_rows(x, {&zero, 1});
}

Tensor project(const Tensor& cls_rows, const LinearWeights& head) {
  return ops::l2_normalize_rows(ops::linear(cls_rows, head.w, head.b));
}

void zero_grads(ModelParams& p) {
  visit_params(p, [](const std::string&, Tensor& t) { t.zero_grad(); });
}

bool starts_with(const std::string& s, std::string_view prefix) {
  return s.rfind(prefix, 0) == 0;
}

std::vector<std::string> exclusive_prefixes(const TrainConfig& cfg, bool itm_active) {
  std::vector<std::string> out;
  if (!cfg.mim) out.push_back("image_decoder.");
  if (!cfg.mlm) out.push_back("mlm_head.");
  if (!itm_active) out.push_back("itm_head.");
  if (!cfg.itc) {
    out.push_back("itc_image.");
    out.push_back("itc_text.");
    out.push_back("temperature");
  }
  return out;
}

std::vector<std::string> audit(ModelParams& p, const std::vector<std::string>& prefixes) {
  std::vector<std::string> bad;
  if (prefixes.empty()) return bad;
  visit_params(p, [&](const std::string& name, Tensor& t) {
    if (!t.has_grad()) return;
    const bool nonzero =
        std::any_of(t.grad().begin(), t.grad().end(), [](double g) { return g != 0.0; });
    if (!nonzero) return;
    for (const auto& pre : prefixes)
      if (starts_with(name, pre)) bad.push_back(name);
  });
  return bad;
}

AdamWOptions adam_options(const TrainConfig& cfg, double lr) {
  AdamWOptions o;
  o.lr = lr;
  o.weight_decay = cfg.weight_decay;
  o.beta1 = cfg.beta1;
  o.beta2 = cfg.beta2;
  o.eps = cfg.adam_eps;
  return o;
}

// Backward, clipping, optimizer step and temperature clamp shared by both
// phases. Returns the pre-clip gradient norm.
double apply_update(TrainingState& st, const Tensor& total, double lr) {
  if (!total.node_id()) return 0.0;  // nothing differentiable this step
  if (!std::isfinite(total.item())) {
    throw NumericError("non-finite loss at step " + std::to_string(st.step + 1));
  }
  auto named = named_params(st.model.params);
  const double norm = clip_grad_norm(named, st.config.grad_clip);
  st.optimizer.step(named, adam_options(st.config, lr));
  auto t = st.model.params.temperature.mutable_data();
  t[0] = std::clamp(t[0], st.config.temperature_min, st.config.temperature_max);
  return norm;
}

void copy_into(Tensor& dst, const Tensor& src) {
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

ModelParams params_for(const ModelConfig& mc, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kInitTag}));
  return init_params(mc, rng);
}

using Clock = std::chrono::steady_clock;

template <typename StepFn>
std::vector<StepRecord> run_loop(TrainingState& st, std::size_t n, std::size_t min_last,
                                 const RunOptions& opts, StepFn step_fn) {
  const auto& cfg = st.config;
  validate(cfg);
  if (n == 0) throw ConfigError("training dataset is empty");
  const auto per_epoch = steps_per_epoch(n, cfg.batch_size, min_last);
  if (per_epoch == 0) {
    throw ConfigError("dataset of " + std::to_string(n) + " samples yields no batch");
  }
  const auto total = per_epoch * cfg.epochs;
  const auto stop = cfg.stop_at_step == 0 ? total : std::min<std::size_t>(cfg.stop_at_step, total);

  std::ofstream metrics, timing;
  const bool write = !opts.out_dir.empty();
  if (write) {
    fs::create_directories(opts.out_dir);
    const auto mode = st.step == 0 ? std::ios::trunc : std::ios::app;
    metrics.open(opts.out_dir / "metrics.jsonl", std::ios::binary | mode);
    timing.open(opts.out_dir / "timing.jsonl", std::ios::binary | mode);
    if (!metrics || !timing) throw IoError("cannot write logs in " + opts.out_dir.string());
  }
  auto save = [&]() {
    if (write) save_checkpoint(checkpoint_from_state(st), opts.out_dir / "checkpoint.bin");
  };

  std::vector<StepRecord> history;
  while (st.step < stop) {
    const std::size_t epoch = st.step / per_epoch;
    const std::size_t k = st.step % per_epoch;
    const auto order = epoch_order(n, cfg.seed, epoch);
    const auto begin = k * cfg.batch_size;
    const auto end = std::min(n, begin + cfg.batch_size);
    const std::span<const std::size_t> batch(order.data() + begin, end - begin);
    const auto t0 = Clock::now();
    auto rec = step_fn(batch, epoch, total);
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    if (write) {
      metrics << metrics_line(rec, cfg.phase) << '\n';
      metrics.flush();
      timing << nlohmann::json{{"step", rec.step}, {"wall_ms", rec.wall_ms}}.dump() << '\n';
    }
    if (opts.on_step) opts.on_step(rec);
    history.push_back(std::move(rec));
    if (st.step % per_epoch == 0 || st.step == stop) save();
  }
  return history;
}

}  // namespace

Vocab build_training_vocab(const std::vector<std::string>& corpus, const TrainConfig& cfg) {
  return build_vocab(corpus, cfg.vocab_max_size, cfg.vocab_min_freq, kAsciiAlphabet);
}

std::vector<TokenId> text_ids(std::string_view text, const Vocab& vocab,
                              std::size_t max_len) {
  auto ids = tokenize(text, vocab, max_len);
  while (ids.size() > 1 && ids.back() == token::pad) ids.pop_back();
  return ids;
}

std::vector<TokenId> answer_targets(std::string_view answer, const Vocab& vocab,
                                    std::size_t max_len) {
  if (max_len == 0) throw ContractError("answer_targets: max_len must be >= 1");
  auto ids = encode_pieces(answer, vocab);
  if (ids.size() > max_len - 1) ids.resize(max_len - 1);
  ids.push_back(token::eos);
  return ids;
}

PretrainData prepare_pretrain_data(const CaptionDataset& ds, const Vocab& vocab,
                                   const TrainConfig& cfg) {
  PretrainData d;
  for (const auto& r : ds.records) {
    d.images.push_back(load_for_model(ds.root / r.image, cfg));
    d.captions.push_back(text_ids(r.caption, vocab, cfg.text_len));
  }
  return d;
}

FinetuneData prepare_finetune_data(const VqaDataset& ds, const Vocab& vocab,
                                   const TrainConfig& cfg) {
  FinetuneData d;
  for (const auto& s : ds.samples) {
    d.images.push_back(load_for_model(ds.root / s.image, cfg));
    d.questions.push_back(text_ids(s.question, vocab, cfg.text_len));
    d.answers.push_back(answer_targets(s.answer, vocab, cfg.answer_len));
  }
  return d;
}

TrainingState init_pretrain_state(const TrainConfig& cfg, const CaptionDataset& ds) {
  validate(cfg);
  if (ds.records.empty()) throw ConfigError("pretraining dataset is empty");
  std::vector<std::string> corpus;
  for (const auto& r : ds.records) corpus.push_back(r.caption);
  TrainingState st;
  st.config = cfg;
  st.model.vocab = build_training_vocab(corpus, cfg);
  st.model.config = model_config(cfg, st.model.vocab.size());
  st.model.params = params_for(st.model.config, cfg.seed);
  st.momentum = make_momentum(st.model.params);
  st.queue = FeatureQueue(cfg.queue_capacity, cfg.proj_dim);
  return st;
}

TrainingState init_finetune_state(const TrainConfig& cfg, const VqaDataset& ds,
                                  const Checkpoint* init) {
  validate(cfg);
  if (ds.samples.empty()) throw ConfigError("finetuning dataset is empty");
  TrainingState st;
  st.config = cfg;
  if (!init) {
    std::vector<std::string> corpus;
    for (const auto& s : ds.samples) {
      corpus.push_back(s.question);
      corpus.push_back(s.answer);
    }
    st.model.vocab = build_training_vocab(corpus, cfg);
    st.model.config = model_config(cfg, st.model.vocab.size());
    st.model.params = params_for(st.model.config, cfg.seed);
    return st;
  }

  const auto src_cfg = config_from_json(init->config_json, cfg);
  st.model.vocab = vocab_from_string(init->vocab);
  TrainConfig at_source = cfg;
  at_source.image_size = src_cfg.image_size;
  st.model.config = model_config(at_source, st.model.vocab.size());
  st.model.params = params_for(st.model.config, cfg.seed);

  std::vector<std::string> problems;
  visit_params(st.model.params, [&](const std::string& name, Tensor& t) {
    if (starts_with(name, "answer_decoder.")) return;
    const bool required = starts_with(name, "image_encoder.") ||
                          starts_with(name, "text_encoder.") ||
                          starts_with(name, "fusion.");
    const Tensor* src = init->find("p/" + name);
    if (!src) {
      if (required) problems.push_back(name + " (missing)");
      return;
    }
    if (src->shape() != t.shape()) {
      if (required) {
        problems.push_back(name + " " + shape_str(src->shape()) + " vs expected " +
                           shape_str(t.shape()));
      }
      return;
    }
    copy_into(t, *src);
  });
  if (!problems.empty()) {
    std::string msg = "checkpoint incompatible with configuration:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }
  if (cfg.image_size != st.model.config.image_size) {
    resize_image_positional(st.model.params, st.model.config, cfg.image_size);
  }
  return st;
}

Checkpoint checkpoint_from_state(TrainingState& st) {
  Checkpoint c;
  c.step = st.step;
  c.config_json = config_to_json(st.config);
  c.vocab = vocab_to_string(st.model.vocab);
  c.rng_state = "derived:" + std::to_string(st.config.seed);
  visit_params(st.model.params, [&](const std::string& name, Tensor& t) {
    c.tensors.push_back({"p/" + name, t.detach()});
  });
  for (const auto& [name, mo] : st.optimizer.moments()) {
    c.tensors.push_back({"m1/" + name, Tensor({mo.m1.size()}, mo.m1)});
    c.tensors.push_back({"m2/" + name, Tensor({mo.m2.size()}, mo.m2)});
  }
  c.tensors.push_back(
      {"adam/step", Tensor::scalar(static_cast<double>(st.optimizer.steps()))});
  if (st.momentum.image_encoder.pos.defined()) {
    visit_momentum(st.momentum, [&](const std::string& name, Tensor& t) {
      c.tensors.push_back({"mom/" + name, t.detach()});
    });
  }
  if (st.queue.capacity() > 0) {
    const auto cap = st.queue.capacity(), d = st.queue.dim();
    c.tensors.push_back({"queue/img", Tensor({cap, d}, st.queue.image_slots())});
    c.tensors.push_back({"queue/txt", Tensor({cap, d}, st.queue.text_slots())});
    c.tensors.push_back(
        {"queue/state", Tensor({2}, {static_cast<double>(st.queue.write_ptr()),
                                     static_cast<double>(st.queue.filled())})});
  }
  return c;
}

TrainingState state_from_checkpoint(const Checkpoint& ckpt) {
  TrainingState st;
  st.config = config_from_json(ckpt.config_json, TrainConfig{});
  st.step = ckpt.step;
  st.model.vocab = vocab_from_string(ckpt.vocab);
  st.model.config = model_config(st.config, st.model.vocab.size());
  st.model.params = params_for(st.model.config, st.config.seed);

  std::vector<std::string> problems;
  auto load = [&](const std::string& name, Tensor& t) {
    const Tensor* src = ckpt.find(name);
    if (!src) {
      problems.push_back(name + " (missing)");
    } else if (src->shape() != t.shape()) {
      problems.push_back(name + " " + shape_str(src->shape()) + " vs expected " +
                         shape_str(t.shape()));
    } else {
      copy_into(t, *src);
    }
  };
  visit_params(st.model.params,
               [&](const std::string& name, Tensor& t) { load("p/" + name, t); });

  std::map<std::string, AdamW::Moments> moments;
  visit_params(st.model.params, [&](const std::string& name, Tensor& t) {
    const Tensor* m1 = ckpt.find("m1/" + name);
    const Tensor* m2 = ckpt.find("m2/" + name);
    if (!m1 && !m2) return;
    if (!m1 || !m2 || m1->numel() != t.numel() || m2->numel() != t.numel()) {
      problems.push_back("optimizer moments of " + name);
      return;
    }
    moments[name] = {m1->values(), m2->values()};
  });
  const Tensor* adam_step = ckpt.find("adam/step");
  st.optimizer.restore(adam_step ? static_cast<std::uint64_t>(adam_step->item()) : 0,
                       std::move(moments));

  if (ckpt.find("mom/image_encoder.pos")) {
    st.momentum = make_momentum(st.model.params);
    visit_momentum(st.momentum,
                   [&](const std::string& name, Tensor& t) { load("mom/" + name, t); });
  }
  if (const Tensor* qs = ckpt.find("queue/state")) {
    const Tensor* qi = ckpt.find("queue/img");
    const Tensor* qt = ckpt.find("queue/txt");
    if (!qi || !qt || qi->rank() != 2 || qs->numel() != 2) {
      throw FormatError("checkpoint queue records are incomplete");
    }
    st.queue.restore(qi->rows(), qi->cols(), static_cast<std::size_t>(qs->data()[0]),
                     static_cast<std::size_t>(qs->data()[1]), qi->values(), qt->values());
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match its own configuration:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw FormatError(msg);
  }
  return st;
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch, std::size_t min_last) {
  if (batch == 0) throw ConfigError("batch_size must be positive");
  return n / batch + (n % batch >= std::max<std::size_t>(min_last, 1) ? 1 : 0);
}

std::size_t total_steps(const TrainConfig& cfg, std::size_t n) {
  return steps_per_epoch(n, cfg.batch_size, cfg.phase == "finetune" ? 1 : 2) * cfg.epochs;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {kShuffleTag, epoch}));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

StepRecord pretrain_step(TrainingState& st, const PretrainData& data,
                         std::span<const std::size_t> batch, std::size_t epoch,
                         std::size_t total) {
  const auto& cfg = st.config;
  const auto& mc = st.model.config;
  auto& p = st.model.params;
  const auto& vocab = st.model.vocab;
  const std::size_t b = batch.size();
  const bool itm_active = cfg.itm && b >= 2;
  const ObjectiveFlags flags{cfg.mim, cfg.mlm, itm_active, cfg.itc};
  if (!flags.any()) throw ConfigError("every pretraining objective is disabled");

  struct Sample {
    MaskedPatches patches;
    std::vector<std::size_t> visible;
    Tensor visible_patches;
    MaskedText text;
    std::vector<std::uint8_t> valid;
    // Unmasked views for the alignment objectives.
    Tensor full_patches;
    std::vector<std::size_t> all_positions;
    std::vector<TokenId> clean_ids;
    std::vector<std::uint8_t> clean_valid;
  };
  std::vector<Sample> samples(b);
  const auto aug = train_augment(cfg);
  for (std::size_t k = 0; k < b; ++k) {
    auto& s = samples[k];
    const auto idx = batch[k];
    Rng rng(derive_seed(cfg.seed, {kSampleTag, st.step, k}));
    const Image img = augment(data.images[idx], cfg.image_size, rng, aug);
    s.patches = patchify(img, cfg.patch_size);
    s.full_patches = s.patches.patches;
    s.all_positions = s.patches.visible_positions();
    if (cfg.mim) s.patches = mask_patches(std::move(s.patches), cfg.image_mask_rate, rng);
    s.visible = s.patches.visible_positions();
    s.visible_patches = s.patches.visible_patches();
    const auto& ids = data.captions[idx];
    if (cfg.mlm) {
      s.text = mask_tokens(ids, vocab, cfg.text_mask_rate, rng);
    } else {
      s.text.ids = ids;
      s.text.attn_len = ids.size();
    }
    s.valid = text_key_valid(s.text.ids);
    s.clean_ids = ids;
    s.clean_valid = text_key_valid(ids);
  }
  const bool align = cfg.itc || itm_active;

  zero_grads(p);
  Rng drop(derive_seed(cfg.seed, {kDropTag, st.step}));
  ForwardContext ctx{true, &drop, nullptr};
  Tape tape;
  LossTerms terms;
  Tensor img_m, txt_m;
  CombinedLoss combined;
  {
    TapeScope scope(tape);
    // Masked views feed the reconstruction objectives only. ITC, ITM and the
    // image side of MLM see clean views, so a masked attribute word or patch
    // never makes two pairs indistinguishable.
    std::vector<Tensor> img_masked, img_feats, txt_masked, txt_feats;
    for (auto& s : samples) {
      if (cfg.mim)
        img_masked.push_back(
            encode_image(p.image_encoder, mc, s.visible_patches, s.visible, ctx));
      if (cfg.mlm || align)
        img_feats.push_back(
            encode_image(p.image_encoder, mc, s.full_patches, s.all_positions, ctx));
      if (cfg.mlm) txt_masked.push_back(encode_text(p.text_encoder, mc, s.text.ids, ctx));
      if (align) txt_feats.push_back(encode_text(p.text_encoder, mc, s.clean_ids, ctx));
    }

    if (cfg.mim) {
      std::vector<Tensor> preds, targets;
      for (std::size_t k = 0; k < b; ++k) {
        preds.push_back(decode_image(p.image_decoder, mc, img_masked[k], samples[k].visible,
                                     samples[k].patches.mask_positions, ctx));
        targets.push_back(samples[k].patches.mask_targets);
      }
      terms.mim = mim_loss(ops::concat_rows(preds), ops::concat_rows(targets));
    }

    Tensor img_proj, txt_proj;
    if (cfg.itc) {
      std::vector<Tensor> ic, tc;
      for (std::size_t k = 0; k < b; ++k) {
        ic.push_back(first_row(img_feats[k]));
        tc.push_back(first_row(txt_feats[k]));
      }
      img_proj = project(ops::concat_rows(ic), p.itc_image);
      txt_proj = project(ops::concat_rows(tc), p.itc_text);
      {
        NoGradScope ng;
        ForwardContext mctx{false, nullptr, nullptr};
        std::vector<Tensor> mic, mtc;
        for (auto& s : samples) {
          mic.push_back(first_row(encode_image(st.momentum.image_encoder, mc,
                                               s.full_patches, s.all_positions, mctx)));
          mtc.push_back(first_row(encode_text(st.momentum.text_encoder, mc, s.clean_ids, mctx)));
        }
        img_m = project(ops::concat_rows(mic), st.momentum.itc_image);
        txt_m = project(ops::concat_rows(mtc), st.momentum.itc_text);
      }
      terms.itc = itc_loss(img_proj, txt_proj, img_m, txt_m, st.queue, p.temperature);
    }

    if (cfg.mlm) {
      std::vector<Tensor> fused(b);
      for (std::size_t k = 0; k < b; ++k)
        fused[k] = fuse(p.fusion, mc, txt_masked[k], samples[k].valid, img_feats[k], ctx);
      std::vector<Tensor> rows;
      std::vector<TokenId> labels;
      for (std::size_t k = 0; k < b; ++k) {
        const auto& t = samples[k].text;
        if (t.mask_positions.empty()) continue;
        rows.push_back(ops::gather_rows(fused[k], t.mask_positions));
        labels.insert(labels.end(), t.mask_labels.begin(), t.mask_labels.end());
      }
      terms.mlm = rows.empty()
                      ? Tensor::scalar(0.0)
                      : mlm_loss(ops::linear(ops::concat_rows(rows), p.mlm_head.w,
                                             p.mlm_head.b),
                                 labels);
    }

    if (itm_active) {
      auto strategy = parse_negative_strategy(cfg.itm_negatives);
      Tensor sims;
      if (strategy == NegativeStrategy::hard) {
        if (img_proj.defined()) {
          NoGradScope ng;
          sims = ops::matmul(img_proj.detach(), ops::transpose(txt_proj.detach()));
        } else {
          strategy = NegativeStrategy::uniform;
        }
      }
      Rng neg_rng(derive_seed(cfg.seed, {kNegativeTag, st.step}));
      const auto negatives =
          pair_negatives(b, strategy, sims, p.temperature.item(), neg_rng);
      std::vector<Tensor> cls;
      std::vector<std::size_t> labels;
      for (std::size_t k = 0; k < b; ++k) {
        cls.push_back(first_row(
            fuse(p.fusion, mc, txt_feats[k], samples[k].clean_valid, img_feats[k], ctx)));
        labels.push_back(itm_label::match);
      }
      for (const auto& [i, j] : negatives) {
        cls.push_back(first_row(
            fuse(p.fusion, mc, txt_feats[j], samples[j].clean_valid, img_feats[i], ctx)));
        labels.push_back(itm_label::no_match);
      }
      terms.itm = itm_loss(ops::concat_rows(cls), labels, p.itm_head);
    }

    combined = combined_loss(terms, flags,
                             {cfg.weight_mim, cfg.weight_mlm, cfg.weight_itm, cfg.weight_itc});
    if (combined.total.node_id()) tape.backward(combined.total);
  }

  StepRecord rec;
  rec.epoch = epoch;
  rec.losses = combined.report;
  rec.ablated_with_grad = audit(p, exclusive_prefixes(cfg, itm_active));
  if (cfg.grad_audit && !rec.ablated_with_grad.empty()) {
    throw ContractError("gradient audit: " + rec.ablated_with_grad.front() +
                        " received a gradient from a disabled objective");
  }
  rec.lr = cosine_lr(st.step, total, cfg.lr_init, cfg.lr_final);
  rec.grad_norm = apply_update(st, combined.total, rec.lr);
  rec.temperature = p.temperature.item();
  if (cfg.itc) {
    momentum_update(st.momentum, p, cfg.momentum);
    st.queue.enqueue(img_m, txt_m);
    rec.queue_updated = true;
  }
  ++st.step;
  rec.step = st.step;
  return rec;
}

Image eval_image(const Image& img, const ModelConfig& cfg) {
  Rng unused(0);
  AugmentOptions a;
  a.train = false;
  return augment(to_channels(img, cfg.channels), cfg.image_size, unused, a);
}

VqaContext encode_vqa_context(const Model& model, const Image& image,
                              std::span<const TokenId> question, ForwardContext& ctx) {
  const auto& mc = model.config;
  const auto& p = model.params;
  const auto patches = patchify(image, mc.patch_size);
  const auto positions = patches.visible_positions();
  const Tensor img = encode_image(p.image_encoder, mc, patches.patches, positions, ctx);
  const Tensor txt = encode_text(p.text_encoder, mc, question, ctx);
  VqaContext out;
  out.valid = text_key_valid(question);
  out.fused = fuse(p.fusion, mc, txt, out.valid, img, ctx);
  return out;
}

StepRecord finetune_step(TrainingState& st, const FinetuneData& data,
                         std::span<const std::size_t> batch, std::size_t epoch,
                         std::size_t total) {
  const auto& cfg = st.config;
  auto& p = st.model.params;
  const std::size_t b = batch.size();
  const auto aug = train_augment(cfg);

  zero_grads(p);
  Rng drop(derive_seed(cfg.seed, {kDropTag, st.step}));
  ForwardContext ctx{true, &drop, nullptr};
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    std::vector<Tensor> per_sample;
    for (std::size_t k = 0; k < b; ++k) {
      const auto idx = batch[k];
      Rng rng(derive_seed(cfg.seed, {kSampleTag, st.step, k}));
      const Image img = augment(data.images[idx], cfg.image_size, rng, aug);
      const auto vctx = encode_vqa_context(st.model, img, data.questions[idx], ctx);
      const auto& targets = data.answers[idx];
      std::vector<TokenId> prefix{token::bos};
      prefix.insert(prefix.end(), targets.begin(), targets.end() - 1);
      const Tensor logits = decode_answer_sequence(p.answer_decoder, st.model.config,
                                                   vctx.fused, vctx.valid, prefix, ctx);
      per_sample.push_back(cond_lm_loss(logits, targets));
    }
    loss = per_sample.front();
    for (std::size_t k = 1; k < b; ++k) loss = ops::add(loss, per_sample[k]);
    if (b > 1) loss = ops::scale(loss, 1.0 / static_cast<double>(b));
    tape.backward(loss);
  }
  StepRecord rec;
  rec.epoch = epoch;
  rec.losses.enabled = ObjectiveFlags{false, false, false, false};
  rec.losses.total = loss.item();
  rec.lr = cosine_lr(st.step, total, cfg.lr_init, cfg.lr_final);
  rec.grad_norm = apply_update(st, loss, rec.lr);
  ++st.step;
  rec.step = st.step;
  return rec;
}

std::vector<StepRecord> run_pretrain(TrainingState& st, const PretrainData& data,
                                     const RunOptions& opts) {
  if (st.config.phase != "pretrain") throw ConfigError("run_pretrain needs phase=pretrain");
  return run_loop(st, data.images.size(), 2, opts,
                  [&](std::span<const std::size_t> batch, std::size_t epoch, std::size_t total) {
                    return pretrain_step(st, data, batch, epoch, total);
                  });
}

std::vector<StepRecord> run_finetune(TrainingState& st, const FinetuneData& data,
                                     const RunOptions& opts) {
  if (st.config.phase != "finetune") throw ConfigError("run_finetune needs phase=finetune");
  return run_loop(st, data.images.size(), 1, opts,
                  [&](std::span<const std::size_t> batch, std::size_t epoch, std::size_t total) {
                    return finetune_step(st, data, batch, epoch, total);
                  });
}

std::string metrics_line(const StepRecord& r, const std::string& phase) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  if (phase == "finetune") {
    j["loss"] = r.losses.total;
  } else {
    j["mim"] = r.losses.mim;
    j["mlm"] = r.losses.mlm;
    j["itm"] = r.losses.itm;
    j["itc"] = r.losses.itc;
    j["total"] = r.losses.total;
    j["temperature"] = r.temperature;
  }
  return j.dump();
}

PretrainProbe probe_pretrain(TrainingState& st, const PretrainData& data,
                             std::uint64_t seed, std::size_t mask_draws) {
  NoGradScope ng;
  const auto& cfg = st.config;
  const auto& mc = st.model.config;
  auto& p = st.model.params;
  ForwardContext ctx{false, nullptr, nullptr};
  const std::size_t n = data.images.size();
  PretrainProbe out;
  double sq = 0.0;
  std::size_t sq_count = 0, correct = 0;
  std::vector<Tensor> ic, tc;
  for (std::size_t i = 0; i < n; ++i) {
    const Image img = eval_image(data.images[i], mc);
    const auto full = patchify(img, mc.patch_size);
    const auto all_pos = full.visible_positions();
    const Tensor img_full = encode_image(p.image_encoder, mc, full.patches, all_pos, ctx);

    Rng mrng(derive_seed(seed, {kProbeTag, i}));
    const auto masked = mask_patches(full, cfg.image_mask_rate, mrng);
    const auto vis = masked.visible_positions();
    const Tensor enc =
        encode_image(p.image_encoder, mc, masked.visible_patches(), vis, ctx);
    const Tensor pred =
        decode_image(p.image_decoder, mc, enc, vis, masked.mask_positions, ctx);
    const auto pv = pred.data();
    const auto tv = masked.mask_targets.data();
    for (std::size_t j = 0; j < pv.size(); ++j) sq += (pv[j] - tv[j]) * (pv[j] - tv[j]);
    sq_count += pv.size();

    for (std::size_t d = 0; d < mask_draws; ++d) {
      Rng trng(derive_seed(seed, {kProbeTag, i, d + 1}));
      const auto mt = mask_tokens(data.captions[i], st.model.vocab, cfg.text_mask_rate, trng);
      if (mt.mask_positions.empty()) continue;
      const Tensor txt = encode_text(p.text_encoder, mc, mt.ids, ctx);
      const Tensor fused = fuse(p.fusion, mc, txt, text_key_valid(mt.ids), img_full, ctx);
      const Tensor logits = ops::linear(ops::gather_rows(fused, mt.mask_positions),
                                        p.mlm_head.w, p.mlm_head.b);
      const auto v = logits.cols();
      for (std::size_t r = 0; r < mt.mask_positions.size(); ++r) {
        const auto row = logits.data().subspan(r * v, v);
        const auto best = static_cast<TokenId>(
            std::max_element(row.begin(), row.end()) - row.begin());
        correct += best == mt.mask_labels[r] ? 1 : 0;
        ++out.mlm_count;
      }
    }
    ic.push_back(first_row(img_full));
    tc.push_back(first_row(encode_text(p.text_encoder, mc, data.captions[i], ctx)));
  }
  out.mim_mse = sq_count ? sq / static_cast<double>(sq_count) : 0.0;
  out.mlm_accuracy =
      out.mlm_count ? static_cast<double>(correct) / static_cast<double>(out.mlm_count) : 0.0;
  const Tensor ip = project(ops::concat_rows(ic), p.itc_image);
  const Tensor tp = project(ops::concat_rows(tc), p.itc_text);
  const Tensor sims = ops::matmul(ip, ops::transpose(tp));
  double diag = 0.0, off = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += sims.at(i, j);
  out.matched_cos = diag / static_cast<double>(n);
  out.mismatched_cos = n > 1 ? off / static_cast<double>(n * (n - 1)) : 0.0;
  return out;
}

}  // namespace m2i2
