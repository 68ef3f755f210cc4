#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "m2i2/error.hpp"
#include "m2i2/trainer.hpp"

using namespace m2i2;
using m2i2::testing::TempDir;

namespace {

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer");
    synth_dataset("captions", 10, 4, dir_->path() / "caps", 32);
    synth_dataset("vqa", 6, 5, dir_->path() / "vqa", 32);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static CaptionDataset captions() { return load_caption_manifest(dir_->path() / "caps/captions.jsonl"); }
  static VqaDataset vqa() { return load_vqa_manifest(dir_->path() / "vqa/vqa.jsonl"); }

  static TrainConfig pretrain_cfg() {
    auto c = make_preset("test");
    c.epochs = 2;
    c.batch_size = 4;
    c.queue_capacity = 8;
    c.seed = 17;
    return c;
  }

  static std::vector<std::vector<double>> param_values(TrainingState& st) {
    std::vector<std::vector<double>> out;
    for (const auto& nt : named_params(st.model.params)) out.push_back(nt.tensor.values());
    return out;
  }

  static std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  static TempDir* dir_;
};

TempDir* TrainerTest::dir_ = nullptr;

}  // namespace

TEST(Schedule, StepsPerEpochDropsTinyLastBatch) {
  EXPECT_EQ(steps_per_epoch(32, 8, 2), 4u);
  EXPECT_EQ(steps_per_epoch(33, 8, 2), 4u);
  EXPECT_EQ(steps_per_epoch(34, 8, 2), 5u);
  EXPECT_EQ(steps_per_epoch(33, 8, 1), 5u);
  EXPECT_THROW(steps_per_epoch(4, 0, 1), ConfigError);
}

TEST(Schedule, EpochOrderIsSeededPermutation) {
  const auto a = epoch_order(20, 3, 0);
  EXPECT_EQ(a, epoch_order(20, 3, 0));
  EXPECT_NE(a, epoch_order(20, 3, 1));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 20u);
}

TEST(Targets, AnswerTruncatedThenEos) {
  Vocab v = build_vocab({"left right"}, 40, 1, kAsciiAlphabet);
  const auto t = answer_targets("upper left corner here", v, 4);
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t.back(), token::eos);
  EXPECT_EQ(text_ids("left", v, 8).front(), token::cls);
  EXPECT_NE(text_ids("left", v, 8).back(), token::pad);
}

TEST_F(TrainerTest, SameSeedGivesIdenticalLogs) {
  TempDir a("run_a"), b("run_b");
  for (auto* d : {&a, &b}) {
    auto st = init_pretrain_state(pretrain_cfg(), captions());
    const auto data = prepare_pretrain_data(captions(), st.model.vocab, st.config);
    run_pretrain(st, data, {d->path(), {}});
  }
  const auto la = read_file(a.path() / "metrics.jsonl");
  EXPECT_FALSE(la.empty());
  EXPECT_EQ(la, read_file(b.path() / "metrics.jsonl"));
  EXPECT_EQ(read_file(a.path() / "checkpoint.bin"), read_file(b.path() / "checkpoint.bin"));
}

TEST_F(TrainerTest, ResumeMatchesUninterruptedRun) {
  const auto ds = captions();
  auto full = init_pretrain_state(pretrain_cfg(), ds);
  const auto data = prepare_pretrain_data(ds, full.model.vocab, full.config);
  run_pretrain(full, data);

  // Stop mid-epoch (step 3 of 6), restore from the serialized bytes, finish.
  auto cfg = pretrain_cfg();
  cfg.stop_at_step = 3;
  auto first = init_pretrain_state(cfg, ds);
  run_pretrain(first, data);
  auto ckpt = parse_checkpoint(serialize_checkpoint(checkpoint_from_state(first)));
  auto resumed = state_from_checkpoint(ckpt);
  resumed.config.stop_at_step = 0;
  EXPECT_EQ(resumed.step, 3u);
  run_pretrain(resumed, data);

  EXPECT_EQ(resumed.step, full.step);
  EXPECT_EQ(param_values(resumed), param_values(full));
  EXPECT_EQ(resumed.queue.image_slots(), full.queue.image_slots());
  EXPECT_EQ(resumed.queue.write_ptr(), full.queue.write_ptr());
  EXPECT_EQ(resumed.optimizer.steps(), full.optimizer.steps());
}

TEST_F(TrainerTest, NoMimKeepsImageDecoderWithoutGradient) {
  auto cfg = pretrain_cfg();
  cfg.mim = false;
  cfg.grad_audit = true;
  auto st = init_pretrain_state(cfg, captions());
  const auto data = prepare_pretrain_data(captions(), st.model.vocab, st.config);
  const auto before = st.model.params.image_decoder.pixel_head.w.values();
  std::size_t steps = 0;
  run_pretrain(st, data, {{}, [&](const StepRecord& r) {
                            ++steps;
                            EXPECT_TRUE(r.ablated_with_grad.empty());
                            EXPECT_EQ(r.losses.mim, 0.0);
                          }});
  EXPECT_GT(steps, 0u);
  EXPECT_EQ(st.model.params.image_decoder.pixel_head.w.values(), before);
  EXPECT_FALSE(st.model.params.image_decoder.pixel_head.w.has_grad() &&
               std::any_of(st.model.params.image_decoder.pixel_head.w.grad().begin(),
                           st.model.params.image_decoder.pixel_head.w.grad().end(),
                           [](double g) { return g != 0.0; }));
}

TEST_F(TrainerTest, NoItcLeavesQueueAndMomentumUntouched) {
  auto cfg = pretrain_cfg();
  cfg.itc = false;
  cfg.grad_audit = true;
  auto st = init_pretrain_state(cfg, captions());
  const auto data = prepare_pretrain_data(captions(), st.model.vocab, st.config);
  std::vector<std::vector<double>> mom_before;
  for (const auto& nt : named_momentum(st.momentum)) mom_before.push_back(nt.tensor.values());
  const auto head_before = st.model.params.itc_image.w.values();
  const double tau_before = st.model.params.temperature.item();
  run_pretrain(st, data, {{}, [](const StepRecord& r) { EXPECT_FALSE(r.queue_updated); }});
  EXPECT_EQ(st.queue.filled(), 0u);
  EXPECT_EQ(st.queue.write_ptr(), 0u);
  std::size_t i = 0;
  for (const auto& nt : named_momentum(st.momentum)) EXPECT_EQ(nt.tensor.values(), mom_before[i++]);
  EXPECT_EQ(st.model.params.itc_image.w.values(), head_before);
  EXPECT_EQ(st.model.params.temperature.item(), tau_before);
}

TEST_F(TrainerTest, EachSingleObjectiveRunsCleanAudit) {
  for (int k = 0; k < 4; ++k) {
    auto cfg = pretrain_cfg();
    cfg.epochs = 1;
    cfg.mim = k == 0;
    cfg.mlm = k == 1;
    cfg.itm = k == 2;
    cfg.itc = k == 3;
    cfg.grad_audit = true;
    auto st = init_pretrain_state(cfg, captions());
    const auto data = prepare_pretrain_data(captions(), st.model.vocab, st.config);
    EXPECT_NO_THROW(run_pretrain(st, data)) << k;
  }
}

TEST_F(TrainerTest, AllObjectivesDisabledRejected) {
  auto cfg = pretrain_cfg();
  cfg.mim = cfg.mlm = cfg.itm = cfg.itc = false;
  EXPECT_THROW(init_pretrain_state(cfg, captions()), ConfigError);
}

TEST_F(TrainerTest, MomentumNeverReceivesGradient) {
  auto st = init_pretrain_state(pretrain_cfg(), captions());
  const auto data = prepare_pretrain_data(captions(), st.model.vocab, st.config);
  const std::vector<std::size_t> batch{0, 1, 2, 3};
  for (int s = 0; s < 3; ++s) {
    const auto rec = pretrain_step(st, data, batch, 0, 6);
    EXPECT_TRUE(rec.queue_updated);
  }
  for (const auto& nt : named_momentum(st.momentum)) {
    EXPECT_FALSE(nt.tensor.requires_grad()) << nt.name;
    EXPECT_FALSE(nt.tensor.has_grad()) << nt.name;
  }
  EXPECT_EQ(st.queue.filled(), 8u);
}

TEST_F(TrainerTest, TemperatureStaysClamped) {
  auto cfg = pretrain_cfg();
  cfg.temperature_min = 0.069;
  cfg.temperature_max = 0.071;
  auto st = init_pretrain_state(cfg, captions());
  const auto data = prepare_pretrain_data(captions(), st.model.vocab, st.config);
  run_pretrain(st, data, {{}, [&](const StepRecord& r) {
                            EXPECT_GE(r.temperature, 0.069);
                            EXPECT_LE(r.temperature, 0.071);
                          }});
}

TEST_F(TrainerTest, FinetuneFromCheckpointCopiesEncodersOnly) {
  auto pre = init_pretrain_state(pretrain_cfg(), captions());
  const auto data = prepare_pretrain_data(captions(), pre.model.vocab, pre.config);
  run_pretrain(pre, data);
  const auto ckpt = checkpoint_from_state(pre);

  auto cfg = make_preset("test", "finetune");
  cfg.seed = 5;
  auto ft = init_finetune_state(cfg, vqa(), &ckpt);
  EXPECT_EQ(ft.model.vocab, pre.model.vocab);
  EXPECT_EQ(ft.model.params.fusion.stack.blocks[0].cross.q.w.values(),
            pre.model.params.fusion.stack.blocks[0].cross.q.w.values());
  EXPECT_EQ(ft.model.params.image_encoder.pos.values(), pre.model.params.image_encoder.pos.values());
  EXPECT_NE(ft.model.params.answer_decoder.tok.values(), pre.model.params.answer_decoder.tok.values());

  const auto fdata = prepare_finetune_data(vqa(), ft.model.vocab, ft.config);
  const auto hist = run_finetune(ft, fdata);
  EXPECT_EQ(hist.size(), total_steps(cfg, 6));
  for (const auto& r : hist) EXPECT_GT(r.losses.total, 0.0);
}

TEST_F(TrainerTest, FinetuneAtDoubleResolution) {
  auto pre = init_pretrain_state(pretrain_cfg(), captions());
  const auto ckpt = checkpoint_from_state(pre);
  auto cfg = make_preset("test", "finetune");
  cfg.image_size = 64;
  cfg.epochs = 1;
  auto ft = init_finetune_state(cfg, vqa(), &ckpt);
  EXPECT_EQ(ft.model.config.grid().count(), 16u);
  EXPECT_EQ(ft.model.params.image_encoder.pos.rows(), 17u);
  const auto fdata = prepare_finetune_data(vqa(), ft.model.vocab, ft.config);
  EXPECT_NO_THROW(run_finetune(ft, fdata));
}

TEST_F(TrainerTest, IncompatibleCheckpointListsTensors) {
  auto pre = init_pretrain_state(pretrain_cfg(), captions());
  const auto ckpt = checkpoint_from_state(pre);
  auto cfg = make_preset("test", "finetune");
  cfg.dim = 24;
  cfg.heads = 2;
  try {
    init_finetune_state(cfg, vqa(), &ckpt);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("image_encoder."), std::string::npos);
    EXPECT_NE(msg.find("fusion."), std::string::npos);
  }
}

TEST_F(TrainerTest, FromScratchFinetuneBuildsOwnVocabulary) {
  auto cfg = make_preset("test", "finetune");
  auto ft = init_finetune_state(cfg, vqa(), nullptr);
  for (const auto& s : vqa().samples)
    for (auto id : encode_pieces(s.answer, ft.model.vocab)) EXPECT_NE(id, token::unk);
}
