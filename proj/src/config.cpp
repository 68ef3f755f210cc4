#include "m2i2/config.hpp"

#include <json.hpp>
#include <set>
#include <type_traits>

#include "m2i2/error.hpp"

namespace m2i2 {

namespace {

using nlohmann::json;

template <typename Config, typename F>
void visit_fields(Config& c, F&& f) {
  f("preset", c.preset);
  f("phase", c.phase);
  f("image_size", c.image_size);
  f("patch_size", c.patch_size);
  f("channels", c.channels);
  f("dim", c.dim);
  f("heads", c.heads);
  f("mlp_ratio", c.mlp_ratio);
  f("dropout", c.dropout);
  f("depth_image_encoder", c.depth_image_encoder);
  f("depth_text_encoder", c.depth_text_encoder);
  f("depth_fusion", c.depth_fusion);
  f("depth_image_decoder", c.depth_image_decoder);
  f("depth_answer_decoder", c.depth_answer_decoder);
  f("vocab_max_size", c.vocab_max_size);
  f("vocab_min_freq", c.vocab_min_freq);
  f("text_len", c.text_len);
  f("answer_len", c.answer_len);
  f("proj_dim", c.proj_dim);
  f("answer_memory", c.answer_memory);
  f("init_std", c.init_std);
  f("queue_capacity", c.queue_capacity);
  f("momentum", c.momentum);
  f("temperature", c.temperature);
  f("temperature_min", c.temperature_min);
  f("temperature_max", c.temperature_max);
  f("itm_negatives", c.itm_negatives);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("lr_init", c.lr_init);
  f("lr_final", c.lr_final);
  f("weight_decay", c.weight_decay);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("adam_eps", c.adam_eps);
  f("grad_clip", c.grad_clip);
  f("image_mask_rate", c.image_mask_rate);
  f("text_mask_rate", c.text_mask_rate);
  f("mim", c.mim);
  f("mlm", c.mlm);
  f("itm", c.itm);
  f("itc", c.itc);
  f("weight_mim", c.weight_mim);
  f("weight_mlm", c.weight_mlm);
  f("weight_itm", c.weight_itm);
  f("weight_itc", c.weight_itc);
  f("aug_crop", c.aug_crop);
  f("aug_flip", c.aug_flip);
  f("aug_brightness", c.aug_brightness);
  f("seed", c.seed);
  f("stop_at_step", c.stop_at_step);
  f("grad_audit", c.grad_audit);
}

template <typename T>
void assign_from_json(const std::string& key, const json& v, T& field) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
      field = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
      field = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
      field = v.get<double>();
    } else {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw ConfigError("");
      field = v.get<T>();
    }
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has an invalid value: " + v.dump());
  }
}

template <typename T>
void assign_from_string(const std::string& key, const std::string& s, T& field) {
  auto fail = [&]() {
    throw ConfigError("config key '" + key + "' has an invalid value: " + s);
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") field = true;
    else if (s == "false" || s == "0") field = false;
    else fail();
  } else if constexpr (std::is_same_v<T, std::string>) {
    field = s;
  } else if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t pos = 0;
      field = std::stod(s, &pos);
      if (pos != s.size()) fail();
    } catch (const std::logic_error&) {
      fail();
    }
  } else {
    try {
      std::size_t pos = 0;
      if (!s.empty() && s[0] == '-') fail();
      field = static_cast<T>(std::stoull(s, &pos));
      if (pos != s.size()) fail();
    } catch (const std::logic_error&) {
      fail();
    }
  }
}

}  // namespace

TrainConfig make_preset(std::string_view name, std::string_view phase) {
  TrainConfig c;
  c.preset = std::string(name);
  c.phase = std::string(phase);
  if (name == "test") {
    c.image_size = 32;
    c.dim = 16;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.depth_image_encoder = c.depth_text_encoder = c.depth_fusion =
        c.depth_image_decoder = c.depth_answer_decoder = 1;
    c.text_len = 16;
    c.answer_len = 6;
    c.proj_dim = 8;
    c.queue_capacity = 32;
    c.epochs = 2;
    c.batch_size = 4;
  } else if (name == "desk") {
    // At width 64, std 0.02 leaves every attention map near uniform and the
    // cross-modal objectives stall at their initial values.
    c.init_std = 0.2;
  } else if (name == "paper") {
    c.image_size = 256;
    c.dim = 768;
    c.heads = 12;
    c.depth_image_encoder = 12;
    c.depth_text_encoder = 6;
    c.depth_fusion = 6;
    c.depth_image_decoder = 8;
    c.depth_answer_decoder = 6;
    c.vocab_max_size = 30522;
    c.text_len = 40;
    c.answer_len = 20;
    c.proj_dim = 256;
    c.queue_capacity = 65535;
    c.epochs = 40;
    c.batch_size = 32;
    c.lr_init = 1e-4;
    c.lr_final = 1e-5;
    c.aug_flip = true;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) +
                      "' (expected test, desk or paper)");
  }
  if (phase == "finetune") {
    if (name == "paper") {
      c.image_size = 384;
      c.batch_size = 8;
      c.lr_init = 2e-5;
      c.lr_final = 1e-6;
    } else {
      c.lr_final = c.lr_init / 20.0;
    }
  } else if (phase != "pretrain") {
    throw ConfigError("unknown phase '" + std::string(phase) +
                      "' (expected pretrain or finetune)");
  }
  return c;
}

std::string config_to_json(const TrainConfig& cfg) {
  json j = json::object();
  visit_fields(cfg, [&](const char* key, const auto& field) { j[key] = field; });
  return j.dump(2);
}

TrainConfig config_from_json(std::string_view text, const TrainConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig cfg = base;
  std::set<std::string> known;
  visit_fields(cfg, [&](const char* key, auto& field) {
    known.insert(key);
    if (auto it = j.find(key); it != j.end()) assign_from_json(key, *it, field);
  });
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

void apply_override(TrainConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) +
                      "' must have the form key=value");
  }
  std::string key(assignment.substr(0, eq));
  for (auto& ch : key)
    if (ch == '-') ch = '_';
  const std::string value(assignment.substr(eq + 1));
  bool found = false;
  visit_fields(cfg, [&](const char* k, auto& field) {
    if (key == k) {
      assign_from_string(key, value, field);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  TrainConfig c;
  visit_fields(c, [&](const char* key, auto&) { keys.emplace_back(key); });
  return keys;
}

void validate(const TrainConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (c.phase != "pretrain" && c.phase != "finetune")
    fail("phase must be pretrain or finetune");
  if (c.patch_size == 0 || c.image_size % c.patch_size != 0)
    fail("image_size must be a positive multiple of patch_size");
  if (c.channels != 1 && c.channels != 3) fail("channels must be 1 or 3");
  if (c.heads == 0 || c.dim % c.heads != 0) fail("dim must be divisible by heads");
  if (c.mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (c.dropout < 0.0 || c.dropout >= 1.0) fail("dropout must lie in [0, 1)");
  if (c.text_len < 2) fail("text_len must be >= 2");
  if (c.answer_len < 1) fail("answer_len must be >= 1");
  if (c.proj_dim == 0) fail("proj_dim must be positive");
  if (c.answer_memory != "full" && c.answer_memory != "cls")
    fail("answer_memory must be full or cls");
  if (c.itm_negatives != "uniform" && c.itm_negatives != "hard")
    fail("itm_negatives must be uniform or hard");
  if (c.queue_capacity == 0) fail("queue_capacity must be positive");
  if (!(c.momentum > 0.0 && c.momentum < 1.0)) fail("momentum must lie in (0, 1)");
  if (!(c.temperature_min > 0.0 && c.temperature_min <= c.temperature &&
        c.temperature <= c.temperature_max))
    fail("temperature must lie in [temperature_min, temperature_max]");
  if (c.epochs == 0) fail("epochs must be positive");
  if (c.batch_size == 0) fail("batch_size must be positive");
  if (c.lr_final > c.lr_init) fail("lr_final must not exceed lr_init");
  if (c.lr_final < 0.0) fail("learning rates must be nonnegative");
  if (!(c.image_mask_rate > 0.0 && c.image_mask_rate < 1.0))
    fail("image_mask_rate must lie in (0, 1)");
  if (!(c.text_mask_rate > 0.0 && c.text_mask_rate < 1.0))
    fail("text_mask_rate must lie in (0, 1)");
  if (c.phase == "pretrain") {
    if (!c.mim && !c.mlm && !c.itm && !c.itc)
      fail("every pretraining objective is disabled");
    if (c.itm && c.batch_size < 2) fail("batch_size must be >= 2 when ITM is enabled");
    if (c.itc && c.batch_size > c.queue_capacity)
      fail("batch_size must not exceed queue_capacity");
  }
  if (c.vocab_max_size < 7) fail("vocab_max_size must be >= 7");
}

}  // namespace m2i2
