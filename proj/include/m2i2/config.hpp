#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace m2i2 {

// Every hyperparameter of a run, serialized as a flat JSON object. Unknown
// keys are rejected when parsing.
struct TrainConfig {
  std::string preset = "desk";
  std::string phase = "pretrain";  // pretrain | finetune

  // Model
  std::size_t image_size = 64;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  double dropout = 0.0;
  std::size_t depth_image_encoder = 2;
  std::size_t depth_text_encoder = 2;
  std::size_t depth_fusion = 2;
  std::size_t depth_image_decoder = 2;
  std::size_t depth_answer_decoder = 2;
  std::size_t vocab_max_size = 512;
  std::size_t vocab_min_freq = 1;
  std::size_t text_len = 24;
  std::size_t answer_len = 8;
  std::size_t proj_dim = 64;
  std::string answer_memory = "full";  // full | cls
  double init_std = 0.02;

  // Contrastive branch
  std::size_t queue_capacity = 512;
  double momentum = 0.995;
  double temperature = 0.07;
  double temperature_min = 0.01;
  double temperature_max = 0.5;
  std::string itm_negatives = "uniform";  // uniform | hard

  // Optimization
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr_init = 1e-3;
  double lr_final = 1e-4;
  double weight_decay = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm limit, 0 disables

  // Objectives
  double image_mask_rate = 0.15;
  double text_mask_rate = 0.15;
  bool mim = true;
  bool mlm = true;
  bool itm = true;
  bool itc = true;
  double weight_mim = 1.0;
  double weight_mlm = 1.0;
  double weight_itm = 1.0;
  double weight_itc = 1.0;

  // Augmentation
  bool aug_crop = true;
  bool aug_flip = false;
  bool aug_brightness = true;

  std::uint64_t seed = 42;
  // Stop after this many total optimizer steps (0: run to the end). Does
  // not change the learning-rate schedule, so a run can be resumed.
  std::size_t stop_at_step = 0;
  // Verify each step that ablated objectives left their exclusive
  // parameters without gradient.
  bool grad_audit = false;

  bool operator==(const TrainConfig&) const = default;
};

// Preset "test" (depth 1, dim 16), "desk" (depth 2, dim 64) or "paper"
// (12/6/6/8/6 layers, dim 768, 65,535-slot queue), for the given phase.
TrainConfig make_preset(std::string_view name, std::string_view phase = "pretrain");

std::string config_to_json(const TrainConfig& cfg);
// Parses over `base`; unknown keys and ill-typed values throw ConfigError.
TrainConfig config_from_json(std::string_view json, const TrainConfig& base);
// Applies "key=value" (the leading "--" already stripped).
void apply_override(TrainConfig& cfg, std::string_view assignment);
std::vector<std::string> config_keys();

// Throws ConfigError on any inconsistent setting.
void validate(const TrainConfig& cfg);

}  // namespace m2i2
