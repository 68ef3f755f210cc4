#include "m2i2/loss_check.hpp"

#include "m2i2/config.hpp"
#include "m2i2/model.hpp"
#include "m2i2/momentum.hpp"
#include "m2i2/objectives.hpp"
#include "m2i2/ops.hpp"

namespace m2i2 {

namespace {

struct ToySample {
  MaskedPatches patches;
  std::vector<std::size_t> visible;
  Tensor visible_patches;
  MaskedText text;
  std::vector<std::uint8_t> valid;
};

Tensor cls_row(const Tensor& x) {
  const std::size_t zero = 0;
  return ops::gather_rows(x, {&zero, 1});
}

GradCheckResult check_loss(const char* name, ModelParams& params,
                           const std::function<Tensor()>& loss, double tol,
                           std::size_t probes, Rng& rng) {
  std::vector<Tensor> reached;
  visit_params(params, [](const std::string&, Tensor& t) { t.zero_grad(); });
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
  }
  visit_params(params, [&](const std::string&, Tensor& t) {
    if (t.has_grad()) reached.push_back(t);
  });
  std::vector<std::vector<std::size_t>> idx(reached.size());
  for (std::size_t k = 0; k < probes; ++k) {
    const auto t = rng.below(reached.size());
    idx[t].push_back(rng.below(reached[t].numel()));
  }
  std::vector<Tensor> wrt;
  std::vector<std::vector<std::size_t>> used;
  for (std::size_t t = 0; t < reached.size(); ++t) {
    if (idx[t].empty()) continue;
    wrt.push_back(reached[t]);
    used.push_back(idx[t]);
  }
  auto res = check_gradients(name, loss, wrt, tol, used);
  visit_params(params, [](const std::string&, Tensor& t) { t.zero_grad(); });
  return res;
}

}  // namespace

std::vector<GradCheckResult> loss_gradcheck_suite(std::uint64_t seed, double tol,
                                                  std::size_t probes) {
  Rng rng(seed);
  auto cfg = make_preset("test");
  cfg.init_std = 0.1;
  const std::vector<std::string> corpus = {"a small dim circle in the upper left",
                                           "a large bright cross in the lower right"};
  const Vocab vocab = build_vocab(corpus, 64);
  const auto mc = model_config(cfg, vocab.size());
  ModelParams p = init_params(mc, rng);
  MomentumParams mom = make_momentum(p);
  ForwardContext ctx;

  std::vector<ToySample> samples(2);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    auto& s = samples[k];
    Image img(cfg.image_size, cfg.image_size, cfg.channels);
    for (auto& v : img.pixels) v = rng.uniform();
    s.patches = mask_patches(patchify(img, cfg.patch_size), 0.3, rng);
    s.visible = s.patches.visible_positions();
    s.visible_patches = s.patches.visible_patches();
    auto ids = tokenize(corpus[k], vocab, cfg.text_len);
    while (ids.back() == token::pad) ids.pop_back();
    s.text = mask_tokens(ids, vocab, 0.3, rng);
    s.valid = text_key_valid(s.text.ids);
  }

  auto encode = [&](std::vector<Tensor>& imgs, std::vector<Tensor>& txts) {
    for (auto& s : samples) {
      imgs.push_back(encode_image(p.image_encoder, mc, s.visible_patches, s.visible, ctx));
      txts.push_back(encode_text(p.text_encoder, mc, s.text.ids, ctx));
    }
  };

  auto mim = [&]() {
    std::vector<Tensor> imgs, txts, preds, targets;
    encode(imgs, txts);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      preds.push_back(decode_image(p.image_decoder, mc, imgs[k], samples[k].visible,
                                   samples[k].patches.mask_positions, ctx));
      targets.push_back(samples[k].patches.mask_targets);
    }
    return mim_loss(ops::concat_rows(preds), ops::concat_rows(targets));
  };

  auto mlm = [&]() {
    std::vector<Tensor> imgs, txts, rows;
    std::vector<TokenId> labels;
    encode(imgs, txts);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const Tensor f = fuse(p.fusion, mc, txts[k], samples[k].valid, imgs[k], ctx);
      rows.push_back(ops::gather_rows(f, samples[k].text.mask_positions));
      labels.insert(labels.end(), samples[k].text.mask_labels.begin(),
                    samples[k].text.mask_labels.end());
    }
    return mlm_loss(ops::linear(ops::concat_rows(rows), p.mlm_head.w, p.mlm_head.b),
                    labels);
  };

  auto itm = [&]() {
    std::vector<Tensor> imgs, txts, cls;
    encode(imgs, txts);
    for (std::size_t k = 0; k < 2; ++k)
      cls.push_back(cls_row(fuse(p.fusion, mc, txts[k], samples[k].valid, imgs[k], ctx)));
    for (std::size_t k = 0; k < 2; ++k)
      cls.push_back(
          cls_row(fuse(p.fusion, mc, txts[1 - k], samples[1 - k].valid, imgs[k], ctx)));
    const std::vector<std::size_t> labels = {itm_label::match, itm_label::match,
                                             itm_label::no_match, itm_label::no_match};
    return itm_loss(ops::concat_rows(cls), labels, p.itm_head);
  };

  Tensor img_m, txt_m;
  FeatureQueue queue(8, mc.proj_dim);
  {
    NoGradScope ng;
    std::vector<Tensor> ic, tc;
    for (auto& s : samples) {
      ic.push_back(cls_row(encode_image(mom.image_encoder, mc, s.visible_patches, s.visible, ctx)));
      tc.push_back(cls_row(encode_text(mom.text_encoder, mc, s.text.ids, ctx)));
    }
    img_m = ops::l2_normalize_rows(
        ops::linear(ops::concat_rows(ic), mom.itc_image.w, mom.itc_image.b));
    txt_m = ops::l2_normalize_rows(
        ops::linear(ops::concat_rows(tc), mom.itc_text.w, mom.itc_text.b));
    for (int r = 0; r < 2; ++r) {
      std::vector<double> a(2 * mc.proj_dim), b(2 * mc.proj_dim);
      for (auto& v : a) v = rng.normal();
      for (auto& v : b) v = rng.normal();
      queue.enqueue(ops::l2_normalize_rows(Tensor({2, mc.proj_dim}, a)),
                    ops::l2_normalize_rows(Tensor({2, mc.proj_dim}, b)));
    }
  }
  auto itc = [&]() {
    std::vector<Tensor> imgs, txts, ic, tc;
    encode(imgs, txts);
    for (std::size_t k = 0; k < 2; ++k) {
      ic.push_back(cls_row(imgs[k]));
      tc.push_back(cls_row(txts[k]));
    }
    const Tensor ip = ops::l2_normalize_rows(
        ops::linear(ops::concat_rows(ic), p.itc_image.w, p.itc_image.b));
    const Tensor tp = ops::l2_normalize_rows(
        ops::linear(ops::concat_rows(tc), p.itc_text.w, p.itc_text.b));
    return itc_loss(ip, tp, img_m, txt_m, queue, p.temperature);
  };

  auto combined = [&]() {
    LossTerms terms{mim(), mlm(), itm(), itc()};
    return combined_loss(terms, ObjectiveFlags{}).total;
  };

  AnswerDecoderWeights& dec = p.answer_decoder;
  const std::vector<TokenId> question = {token::cls, token::reserved_count,
                                         token::reserved_count + 1};
  const std::vector<TokenId> targets = {token::reserved_count + 2, token::eos};
  auto cond_lm = [&]() {
    Image img(cfg.image_size, cfg.image_size, cfg.channels, 0.5);
    const auto patches = patchify(img, cfg.patch_size);
    const auto pos = patches.visible_positions();
    const Tensor im = encode_image(p.image_encoder, mc, patches.patches, pos, ctx);
    const Tensor tx = encode_text(p.text_encoder, mc, question, ctx);
    const auto valid = text_key_valid(question);
    const Tensor f = fuse(p.fusion, mc, tx, valid, im, ctx);
    const std::vector<TokenId> prefix = {token::bos, targets[0]};
    return cond_lm_loss(decode_answer_sequence(dec, mc, f, valid, prefix, ctx), targets);
  };

  std::vector<GradCheckResult> out;
  out.push_back(check_loss("loss_mim", p, mim, tol, probes, rng));
  out.push_back(check_loss("loss_mlm", p, mlm, tol, probes, rng));
  out.push_back(check_loss("loss_itm", p, itm, tol, probes, rng));
  out.push_back(check_loss("loss_itc", p, itc, tol, probes, rng));
  out.push_back(check_loss("loss_combined", p, combined, tol, probes, rng));
  out.push_back(check_loss("loss_cond_lm", p, cond_lm, tol, probes, rng));
  return out;
}

}  // namespace m2i2
