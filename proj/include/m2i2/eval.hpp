#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2i2/data.hpp"
#include "m2i2/model.hpp"
#include "m2i2/vision.hpp"

namespace m2i2 {

// Greedy decoding from BOS (ties go to the lowest id). Stops after EOS or
// max_len tokens; the returned tokens include the EOS when one was produced.
std::vector<TokenId> generate_answer(const Model& model, const Image& image,
                                     std::span<const TokenId> question,
                                     std::size_t max_len);

// Lowercase, trim, collapse whitespace and strip trailing punctuation.
std::string normalize_answer(std::string_view answer);

enum class FormFilter { freeform, all };
FormFilter parse_form_filter(const std::string& name);

struct Prediction {
  std::string id;
  std::string question;
  std::string gold;
  std::string predicted;
  std::string answer_type;
  std::string question_form;
  bool correct = false;
};

struct EvalReport {
  std::size_t closed_correct = 0, closed_n = 0;
  std::size_t open_correct = 0, open_n = 0;
  double closed_acc = 0.0, open_acc = 0.0, overall_acc = 0.0;
  std::vector<Prediction> predictions;
};

// Aggregates per-sample predictions; accuracy of an empty type is 0.
EvalReport make_report(std::vector<Prediction> predictions);

// Generates an answer for every sample passing the filter. An empty
// filtered set raises ConfigError.
EvalReport evaluate(const Model& model, const VqaDataset& ds, FormFilter filter);

// Closed / Open / Overall table.
std::string format_report(const EvalReport& report, FormFilter filter);
// One JSON object per sample: id, question, gold, prediction, correct.
void write_predictions(const EvalReport& report, const std::filesystem::path& path);

struct AttentionMap {
  PatchGrid grid;
  std::vector<double> values;  // row-major over the grid, in [0, 1]
  TokenId first_token = 0;
};

// Cross-attention from the question's CLS row to the image patches in one
// fusion layer (default: last), averaged over heads and min-max normalized.
// With grad_weighted, each head's attention is multiplied by the positive
// part of its gradient w.r.t. the log-probability of the first generated
// answer token. A zero range normalizes to all zeros.
AttentionMap attention_map(const Model& model, const Image& image,
                           std::span<const TokenId> question,
                           std::optional<std::size_t> layer, bool grad_weighted);

// Grayscale image with each patch cell filled by its value.
Image heatmap_image(const AttentionMap& map, std::size_t patch_size);

}  // namespace m2i2
