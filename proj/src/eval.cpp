#include "m2i2/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "m2i2/error.hpp"
#include "m2i2/ops.hpp"
#include "m2i2/trainer.hpp"

namespace m2i2 {

namespace {

TokenId argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

double ratio(std::size_t a, std::size_t b) {
  return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
}

}  // namespace

std::vector<TokenId> generate_answer(const Model& model, const Image& image,
                                     std::span<const TokenId> question,
                                     std::size_t max_len) {
  NoGradScope ng;
  ForwardContext ctx;
  const auto vctx = encode_vqa_context(model, image, question, ctx);
  std::vector<TokenId> prefix{token::bos};
  std::vector<TokenId> out;
  while (out.size() < max_len) {
    const Tensor logits = decode_answer(model.params.answer_decoder, model.config,
                                        vctx.fused, vctx.valid, prefix, ctx);
    const TokenId next = argmax(logits.data());
    out.push_back(next);
    if (next == token::eos) break;
    prefix.push_back(next);
  }
  return out;
}

std::string normalize_answer(std::string_view answer) {
  std::string s = normalize_text(answer);
  while (!s.empty() && std::ispunct(static_cast<unsigned char>(s.back()))) s.pop_back();
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

FormFilter parse_form_filter(const std::string& name) {
  if (name == "freeform" || name == "free") return FormFilter::freeform;
  if (name == "all" || name == "free+para") return FormFilter::all;
  throw ConfigError("unknown question-form filter '" + name + "'");
}

EvalReport make_report(std::vector<Prediction> predictions) {
  EvalReport r;
  for (const auto& p : predictions) {
    if (p.answer_type == "closed") {
      ++r.closed_n;
      r.closed_correct += p.correct;
    } else if (p.answer_type == "open") {
      ++r.open_n;
      r.open_correct += p.correct;
    } else {
      throw FormatError("prediction " + p.id + " has answer_type '" + p.answer_type + "'");
    }
  }
  r.closed_acc = ratio(r.closed_correct, r.closed_n);
  r.open_acc = ratio(r.open_correct, r.open_n);
  r.overall_acc = ratio(r.closed_correct + r.open_correct, r.closed_n + r.open_n);
  r.predictions = std::move(predictions);
  return r;
}

EvalReport evaluate(const Model& model, const VqaDataset& ds, FormFilter filter) {
  std::vector<Prediction> preds;
  for (const auto& s : ds.samples) {
    if (filter == FormFilter::freeform && s.question_form != "freeform") continue;
    const Image img = eval_image(load_image(ds.root / s.image), model.config);
    const auto q = text_ids(s.question, model.vocab, model.config.text_len);
    const auto tokens = generate_answer(model, img, q, model.config.answer_len);
    Prediction p;
    p.id = s.id;
    p.question = s.question;
    p.gold = s.answer;
    p.predicted = detokenize(tokens, model.vocab);
    p.answer_type = s.answer_type;
    p.question_form = s.question_form;
    p.correct = normalize_answer(p.predicted) == normalize_answer(p.gold);
    preds.push_back(std::move(p));
  }
  if (preds.empty()) throw ConfigError("evaluation set is empty after filtering");
  return make_report(std::move(preds));
}

std::string format_report(const EvalReport& r, FormFilter filter) {
  std::string out = std::string("question forms: ") +
                    (filter == FormFilter::freeform ? "freeform" : "all") + "\n";
  char line[128];
  std::snprintf(line, sizeof line, "%-8s %8s %8s %9s\n", "type", "correct", "total",
                "accuracy");
  out += line;
  auto row = [&](const char* name, std::size_t c, std::size_t n, double acc) {
    std::snprintf(line, sizeof line, "%-8s %8zu %8zu %9.4f\n", name, c, n, acc);
    out += line;
  };
  row("Closed", r.closed_correct, r.closed_n, r.closed_acc);
  row("Open", r.open_correct, r.open_n, r.open_acc);
  row("Overall", r.closed_correct + r.open_correct, r.closed_n + r.open_n, r.overall_acc);
  return out;
}

void write_predictions(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : r.predictions) {
    nlohmann::ordered_json j;
    j["id"] = p.id;
    j["question"] = p.question;
    j["gold"] = p.gold;
    j["prediction"] = p.predicted;
    j["answer_type"] = p.answer_type;
    j["correct"] = p.correct;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

AttentionMap attention_map(const Model& model, const Image& image,
                           std::span<const TokenId> question,
                           std::optional<std::size_t> layer, bool grad_weighted) {
  const auto& mc = model.config;
  const auto depth = model.params.fusion.stack.blocks.size();
  if (depth == 0) throw IndexError("attention_map: fusion network has no layers");
  const std::size_t l = layer.value_or(depth - 1);
  if (l >= depth) {
    throw IndexError("attention_map: layer " + std::to_string(l) + " outside [0, " +
                     std::to_string(depth) + ")");
  }

  AttentionCapture capture;
  ForwardContext ctx{false, nullptr, &capture};
  Tape tape;
  AttentionMap out;
  out.grid = mc.grid();
  {
    TapeScope scope(tape);
    const auto vctx = encode_vqa_context(model, image, question, ctx);
    const std::vector<TokenId> prefix{token::bos};
    ForwardContext dctx;
    const Tensor logits = decode_answer_sequence(model.params.answer_decoder, mc,
                                                 vctx.fused, vctx.valid, prefix, dctx);
    out.first_token = argmax(logits.data());
    if (grad_weighted) {
      const Tensor nll = ops::cross_entropy(logits, std::vector<std::size_t>{out.first_token});
      if (nll.node_id()) tape.backward(nll);
    }
  }

  ModelParams touched = model.params;
  visit_params(touched, [](const std::string&, Tensor& t) { t.zero_grad(); });

  const auto& heads = capture.layers.at(l);
  const auto n = out.grid.count();
  out.values.assign(n, 0.0);
  for (const auto& a : heads) {
    // Keys are [image CLS, patch 0, patch 1, ...]; row 0 is the text CLS.
    const bool have_grad = grad_weighted && a.has_grad();
    for (std::size_t j = 0; j < n; ++j) {
      double v = a.data()[1 + j];
      if (grad_weighted) {
        // The gradient of log p is minus the gradient of the NLL.
        const double g = have_grad ? -a.grad()[1 + j] : 0.0;
        v *= std::max(g, 0.0);
      }
      out.values[j] += v / static_cast<double>(heads.size());
    }
  }
  const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
  const double mn = *lo, range = *hi - *lo;
  for (auto& v : out.values) v = range > 0.0 ? (v - mn) / range : 0.0;
  return out;
}

Image heatmap_image(const AttentionMap& map, std::size_t patch_size) {
  Image img(map.grid.rows * patch_size, map.grid.cols * patch_size, 1);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      img.at(y, x, 0) = map.values[(y / patch_size) * map.grid.cols + x / patch_size];
  return img;
}

}  // namespace m2i2
