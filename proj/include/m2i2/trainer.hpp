#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "m2i2/checkpoint.hpp"
#include "m2i2/config.hpp"
#include "m2i2/data.hpp"
#include "m2i2/model.hpp"
#include "m2i2/momentum.hpp"
#include "m2i2/objectives.hpp"
#include "m2i2/optim.hpp"
#include "m2i2/vision.hpp"

namespace m2i2 {

// Everything needed to continue a run: resolved configuration, model,
// momentum copy, feature queue, optimizer moments and the step counter.
// Every random draw is derived from (seed, step, sample), so no generator
// state has to be carried between steps.
struct TrainingState {
  TrainConfig config;
  Model model;
  MomentumParams momentum;
  FeatureQueue queue;
  AdamW optimizer;
  std::uint64_t step = 0;
};

struct PretrainData {
  std::vector<Image> images;
  std::vector<std::vector<TokenId>> captions;  // CLS + pieces, no padding
};

struct FinetuneData {
  std::vector<Image> images;
  std::vector<std::vector<TokenId>> questions;  // CLS + pieces, no padding
  std::vector<std::vector<TokenId>> answers;    // pieces + EOS
};

// Vocabulary over the captions (or questions and answers) seeded with the
// ASCII alphabet.
Vocab build_training_vocab(const std::vector<std::string>& corpus,
                           const TrainConfig& cfg);

PretrainData prepare_pretrain_data(const CaptionDataset& ds, const Vocab& vocab,
                                   const TrainConfig& cfg);
FinetuneData prepare_finetune_data(const VqaDataset& ds, const Vocab& vocab,
                                   const TrainConfig& cfg);

// Tokenized text with trailing padding removed.
std::vector<TokenId> text_ids(std::string_view text, const Vocab& vocab,
                              std::size_t max_len);
// Answer pieces truncated to max_len - 1, followed by EOS.
std::vector<TokenId> answer_targets(std::string_view answer, const Vocab& vocab,
                                    std::size_t max_len);

// Fresh pretraining state; the vocabulary is built from the captions.
TrainingState init_pretrain_state(const TrainConfig& cfg, const CaptionDataset& ds);

// Finetuning state. With `init`, the encoders and fusion network (and any
// other shape-compatible tensor except the answer decoder) are copied from
// the checkpoint and the grid positional tables are resampled when the
// resolution changes; an incompatible checkpoint raises ConfigError listing
// the offending tensors. Without `init` every weight is random and the
// vocabulary comes from the questions and answers.
TrainingState init_finetune_state(const TrainConfig& cfg, const VqaDataset& ds,
                                  const Checkpoint* init);

Checkpoint checkpoint_from_state(TrainingState& state);
TrainingState state_from_checkpoint(const Checkpoint& ckpt);

// Optimizer steps per epoch; a trailing partial batch is kept only when it
// has at least `min_last` samples.
std::size_t steps_per_epoch(std::size_t n, std::size_t batch, std::size_t min_last);
std::size_t total_steps(const TrainConfig& cfg, std::size_t n);
// Sample order of one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::size_t epoch);

struct StepRecord {
  std::uint64_t step = 0;  // 1-based index of the completed step
  std::size_t epoch = 0;
  double lr = 0.0;
  PretrainLossReport losses;  // finetuning reports its loss as `total`
  double grad_norm = 0.0;
  double temperature = 0.0;  // after the update
  double wall_ms = 0.0;
  // Parameters that received a gradient although every objective using
  // them is disabled.
  std::vector<std::string> ablated_with_grad;
  bool queue_updated = false;
};

StepRecord pretrain_step(TrainingState& state, const PretrainData& data,
                         std::span<const std::size_t> batch, std::size_t epoch,
                         std::size_t total);
StepRecord finetune_step(TrainingState& state, const FinetuneData& data,
                         std::span<const std::size_t> batch, std::size_t epoch,
                         std::size_t total);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::function<void(const StepRecord&)> on_step;
};

// Runs from state.step to the end of the schedule (or config.stop_at_step).
// Writes metrics.jsonl (step, epoch, lr, losses), timing.jsonl (wall_ms) and
// checkpoint.bin after every epoch and at the end.
std::vector<StepRecord> run_pretrain(TrainingState& state, const PretrainData& data,
                                     const RunOptions& opts = {});
std::vector<StepRecord> run_finetune(TrainingState& state, const FinetuneData& data,
                                     const RunOptions& opts = {});

std::string metrics_line(const StepRecord& r, const std::string& phase);

// Full-image, question-conditioned fused sequence used by the answer decoder.
struct VqaContext {
  Tensor fused;
  std::vector<std::uint8_t> valid;
};
VqaContext encode_vqa_context(const Model& model, const Image& image,
                              std::span<const TokenId> question,
                              ForwardContext& ctx);

// Evaluation-time view of an image at the model resolution.
Image eval_image(const Image& img, const ModelConfig& cfg);

// Fixed-seed measurements of a pretraining state on its own data.
struct PretrainProbe {
  double mlm_accuracy = 0.0;
  std::size_t mlm_count = 0;
  double mim_mse = 0.0;
  double matched_cos = 0.0;
  double mismatched_cos = 0.0;
};
PretrainProbe probe_pretrain(TrainingState& state, const PretrainData& data,
                             std::uint64_t seed, std::size_t mask_draws = 4);

}  // namespace m2i2
