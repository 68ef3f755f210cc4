#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "m2i2/checkpoint.hpp"
#include "m2i2/config.hpp"
#include "m2i2/data.hpp"
#include "m2i2/error.hpp"
#include "m2i2/eval.hpp"
#include "m2i2/gradcheck.hpp"
#include "m2i2/loss_check.hpp"
#include "m2i2/trainer.hpp"

namespace fs = std::filesystem;
using namespace m2i2;

namespace {

struct ConfigArgs {
  std::string config_path;
  std::string preset = "desk";
  bool no_mim = false, no_itc = false, no_itm = false, no_mlm = false;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

// preset < config file < M2I2_SEED < --key=value < objective toggles
TrainConfig resolve_config(const ConfigArgs& a, const std::string& phase,
                           const std::vector<std::string>& extras) {
  TrainConfig cfg = make_preset(a.preset, phase);
  if (!a.config_path.empty()) cfg = config_from_json(read_file(a.config_path), cfg);
  cfg.phase = phase;
  if (const char* env = std::getenv("M2I2_SEED")) {
    apply_override(cfg, std::string("seed=") + env);
  }
  for (const auto& e : extras) {
    if (e.rfind("--", 0) != 0 || e.find('=') == std::string::npos) {
      throw ConfigError("unrecognized argument '" + e + "'");
    }
    apply_override(cfg, e.substr(2));
  }
  if (a.no_mim) cfg.mim = false;
  if (a.no_itc) cfg.itc = false;
  if (a.no_itm) cfg.itm = false;
  if (a.no_mlm) cfg.mlm = false;
  validate(cfg);
  return cfg;
}

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON configuration file");
  cmd->add_option("--preset", a.preset, "test | desk | paper");
  cmd->allow_extras();
}

void snapshot(const fs::path& out, const TrainConfig& cfg) {
  fs::create_directories(out);
  write_file(out / "config.json", config_to_json(cfg) + "\n");
}

void print_step(const StepRecord& r, const std::string& phase) {
  std::printf("%s\n", metrics_line(r, phase).c_str());
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision-language pretraining and generative VQA"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string kind = "captions", synth_out;
  std::size_t synth_n = 32, synth_size = 64;
  std::uint64_t synth_seed = 0;
  synth->add_option("--kind", kind, "captions | vqa")->required();
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--image-size", synth_size, "image side in pixels");
  synth->add_option("--out", synth_out, "output directory")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pretrain on image-caption pairs");
  ConfigArgs pre_args;
  std::string pre_data, pre_out, pre_resume;
  add_config_options(pre, pre_args);
  pre->add_option("--data", pre_data, "captions manifest or its directory")->required();
  pre->add_option("--out", pre_out, "output directory")->required();
  pre->add_option("--resume", pre_resume, "checkpoint to continue from");
  pre->add_flag("--no-mim", pre_args.no_mim, "disable masked image modeling");
  pre->add_flag("--no-itc", pre_args.no_itc, "disable image-text contrastive loss");
  pre->add_flag("--no-itm", pre_args.no_itm, "disable image-text matching");
  pre->add_flag("--no-mlm", pre_args.no_mlm, "disable masked language modeling");

  // finetune
  auto* fine = app.add_subcommand("finetune", "finetune the answer decoder on VQA");
  ConfigArgs fine_args;
  std::string fine_data, fine_out, fine_init;
  bool from_scratch = false;
  add_config_options(fine, fine_args);
  fine->add_option("--data", fine_data, "vqa manifest or its directory")->required();
  fine->add_option("--out", fine_out, "output directory")->required();
  fine->add_option("--init", fine_init, "pretraining checkpoint");
  fine->add_flag("--from-scratch", from_scratch, "random initialization, no checkpoint");

  // eval
  auto* ev = app.add_subcommand("eval", "closed/open/overall accuracy");
  std::string ev_data, ev_ckpt, ev_out, ev_forms = "all";
  ev->add_option("--data", ev_data, "vqa manifest or its directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "finetuned checkpoint")->required();
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--forms", ev_forms, "freeform | all");

  // attn
  auto* at = app.add_subcommand("attn", "export cross-attention heatmaps");
  std::string at_data, at_ckpt, at_out;
  int at_layer = -1;
  std::size_t at_limit = 0;
  bool at_raw = false;
  at->add_option("--data", at_data, "vqa manifest or its directory")->required();
  at->add_option("--checkpoint", at_ckpt, "finetuned checkpoint")->required();
  at->add_option("--out", at_out, "output directory")->required();
  at->add_option("--layer", at_layer, "fusion layer (default: last)");
  at->add_option("--limit", at_limit, "number of samples (0: all)");
  at->add_flag("--raw", at_raw, "plain attention without gradient weighting");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::uint64_t gc_seed = 7;
  std::string gc_out;
  gc->add_option("--seed", gc_seed, "random seed");
  gc->add_option("--out", gc_out, "output directory for the report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) {
      const auto res = synth_dataset(kind, synth_n, synth_seed, synth_out, synth_size);
      std::printf("wrote %zu images and %zu records to %s\n", res.images, res.records,
                  res.manifest.string().c_str());
    } else if (*pre) {
      auto cfg = resolve_config(pre_args, "pretrain", pre->remaining());
      const auto ds = load_caption_manifest(resolve_manifest(pre_data, "captions.jsonl"));
      TrainingState st;
      if (!pre_resume.empty()) {
        st = state_from_checkpoint(load_checkpoint(pre_resume));
        st.config.stop_at_step = cfg.stop_at_step;
        cfg = st.config;
      } else {
        st = init_pretrain_state(cfg, ds);
      }
      snapshot(pre_out, cfg);
      st.model.vocab.save(fs::path(pre_out) / "vocab.txt");
      const auto data = prepare_pretrain_data(ds, st.model.vocab, cfg);
      RunOptions opts;
      opts.out_dir = pre_out;
      opts.on_step = [](const StepRecord& r) { print_step(r, "pretrain"); };
      run_pretrain(st, data, opts);
      const auto probe = probe_pretrain(st, data, cfg.seed);
      char line[256];
      std::snprintf(line, sizeof line,
                    "{\"mlm_accuracy\":%.6f,\"mlm_count\":%zu,\"mim_mse\":%.6g,"
                    "\"matched_cos\":%.6f,\"mismatched_cos\":%.6f}\n",
                    probe.mlm_accuracy, probe.mlm_count, probe.mim_mse, probe.matched_cos,
                    probe.mismatched_cos);
      write_file(fs::path(pre_out) / "probe.json", line);
      std::printf("probe %s", line);
    } else if (*fine) {
      auto cfg = resolve_config(fine_args, "finetune", fine->remaining());
      if (from_scratch && !fine_init.empty()) {
        throw ConfigError("--from-scratch and --init are mutually exclusive");
      }
      if (!from_scratch && fine_init.empty()) {
        throw ConfigError("finetune needs --init <checkpoint> or --from-scratch");
      }
      const auto ds = load_vqa_manifest(resolve_manifest(fine_data, "vqa.jsonl"));
      Checkpoint init;
      if (!from_scratch) init = load_checkpoint(fine_init);
      auto st = init_finetune_state(cfg, ds, from_scratch ? nullptr : &init);
      snapshot(fine_out, cfg);
      const auto data = prepare_finetune_data(ds, st.model.vocab, cfg);
      RunOptions opts;
      opts.out_dir = fine_out;
      opts.on_step = [](const StepRecord& r) { print_step(r, "finetune"); };
      run_finetune(st, data, opts);
    } else if (*ev) {
      const auto st = state_from_checkpoint(load_checkpoint(ev_ckpt));
      const auto ds = load_vqa_manifest(resolve_manifest(ev_data, "vqa.jsonl"));
      const auto filter = parse_form_filter(ev_forms);
      snapshot(ev_out, st.config);
      const auto report = evaluate(st.model, ds, filter);
      const auto table = format_report(report, filter);
      write_file(fs::path(ev_out) / "report.txt", table);
      write_predictions(report, fs::path(ev_out) / "predictions.jsonl");
      std::printf("%s", table.c_str());
    } else if (*at) {
      const auto st = state_from_checkpoint(load_checkpoint(at_ckpt));
      const auto ds = load_vqa_manifest(resolve_manifest(at_data, "vqa.jsonl"));
      snapshot(at_out, st.config);
      std::optional<std::size_t> layer;
      if (at_layer >= 0) layer = static_cast<std::size_t>(at_layer);
      std::size_t done = 0;
      for (const auto& s : ds.samples) {
        if (at_limit && done == at_limit) break;
        const Image img = eval_image(load_image(ds.root / s.image), st.model.config);
        const auto q = text_ids(s.question, st.model.vocab, st.model.config.text_len);
        const auto map = attention_map(st.model, img, q, layer, !at_raw);
        const auto path = fs::path(at_out) / (s.id + ".attn.pgm");
        write_image(heatmap_image(map, st.model.config.patch_size), path);
        std::printf("%s\n", path.string().c_str());
        ++done;
      }
    } else if (*gc) {
      auto results = op_gradcheck_suite(gc_seed);
      for (auto& r : loss_gradcheck_suite(gc_seed)) results.push_back(r);
      bool ok = true;
      std::string text;
      for (const auto& r : results) {
        char line[160];
        std::snprintf(line, sizeof line, "%-4s %-20s max_rel_error=%.3e tol=%.0e probes=%zu\n",
                      r.passed ? "ok" : "FAIL", r.name.c_str(), r.max_rel_error,
                      r.tolerance, r.probes);
        text += line;
        ok = ok && r.passed;
      }
      std::printf("%s", text.c_str());
      if (!gc_out.empty()) {
        fs::create_directories(gc_out);
        write_file(fs::path(gc_out) / "gradcheck.txt", text);
      }
      if (!ok) {
        std::fprintf(stderr, "error: gradient check failed\n");
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
