#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "helpers.hpp"
#include "m2i2/data.hpp"
#include "m2i2/error.hpp"
#include "m2i2/vision.hpp"

using namespace m2i2;
using m2i2::testing::TempDir;

namespace {

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

TEST(Synth, ScenesCycleThroughAllCombinations) {
  const auto scenes = synth_scenes(96, 3);
  std::set<std::string> first, second;
  for (std::size_t i = 0; i < 48; ++i) first.insert(scene_caption(scenes[i]));
  for (std::size_t i = 48; i < 96; ++i) second.insert(scene_caption(scenes[i]));
  EXPECT_EQ(first.size(), 48u);
  EXPECT_EQ(first, second);
  EXPECT_EQ(scene_caption(scenes[0]), scene_caption(synth_scenes(1, 3)[0]));
}

TEST(Synth, CaptionTemplate) {
  EXPECT_EQ(scene_caption({"circle", "upper left", "small", "bright"}),
            "a small bright circle in the upper left");
}

TEST(Synth, CaptionDatasetLoadsBack) {
  TempDir dir("synth_caps");
  const auto r = synth_dataset("captions", 12, 5, dir.path());
  EXPECT_EQ(r.images, 12u);
  const auto ds = load_caption_manifest(r.manifest);
  ASSERT_EQ(ds.records.size(), 12u);
  const Image img = load_image(ds.root / ds.records[0].image);
  EXPECT_EQ(img.height, 64u);
  EXPECT_EQ(img.channels, 3u);
  EXPECT_EQ(resolve_manifest(dir.path(), "captions.jsonl"), r.manifest);
}

TEST(Synth, VqaDatasetHasBothTypes) {
  TempDir dir("synth_vqa");
  const auto r = synth_dataset("vqa", 40, 6, dir.path(), 32);
  const auto ds = load_vqa_manifest(r.manifest);
  ASSERT_EQ(ds.samples.size(), 40u);
  std::size_t closed = 0, open = 0;
  for (const auto& s : ds.samples) {
    (s.answer_type == "closed" ? closed : open)++;
    if (s.answer_type == "closed") {
      EXPECT_TRUE(s.answer == "yes" || s.answer == "no") << s.answer;
    }
  }
  EXPECT_GT(closed, 0u);
  EXPECT_GT(open, 0u);
  EXPECT_EQ(load_image(ds.root / ds.samples[0].image).width, 32u);
}

TEST(Synth, SameSeedSameFiles) {
  TempDir a("synth_a"), b("synth_b");
  synth_dataset("captions", 4, 9, a.path());
  synth_dataset("captions", 4, 9, b.path());
  const auto la = load_caption_manifest(a.path() / "captions.jsonl");
  const auto lb = load_caption_manifest(b.path() / "captions.jsonl");
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(la.records[i].caption, lb.records[i].caption);
    EXPECT_EQ(load_image(la.root / la.records[i].image), load_image(lb.root / lb.records[i].image));
  }
  EXPECT_THROW(synth_dataset("audio", 4, 9, a.path()), ConfigError);
}

TEST(Manifest, MissingImageIsIoError) {
  TempDir dir("man_missing");
  write_lines(dir.path() / "captions.jsonl", {R"({"image": "gone.ppm", "caption": "x"})"});
  EXPECT_THROW(load_caption_manifest(dir.path() / "captions.jsonl"), IoError);
}

TEST(Manifest, MalformedRecordsAreFormatErrors) {
  TempDir dir("man_bad");
  write_image(Image(4, 4, 1, 0.5), dir.path() / "a.pgm");
  const auto m = dir.path() / "vqa.jsonl";
  write_lines(m, {R"({"image": "a.pgm", "question": "q", "answer": "", "answer_type": "open"})"});
  EXPECT_THROW(load_vqa_manifest(m), FormatError);
  write_lines(m, {R"({"image": "a.pgm", "question": "q", "answer": "y", "answer_type": "maybe"})"});
  EXPECT_THROW(load_vqa_manifest(m), FormatError);
  write_lines(m, {R"({"image": "a.pgm", "question": "q"})"});
  EXPECT_THROW(load_vqa_manifest(m), FormatError);
  write_lines(m, {"{oops"});
  EXPECT_THROW(load_vqa_manifest(m), FormatError);
  write_lines(m, {R"({"image": "a.pgm", "question": "q", "answer": "y", "answer_type": "open"})"});
  const auto ds = load_vqa_manifest(m);
  EXPECT_EQ(ds.samples[0].id, "sample0");
  EXPECT_EQ(ds.samples[0].question_form, "freeform");
}

TEST(Manifest, WriteThenLoad) {
  TempDir dir("man_rt");
  write_image(Image(4, 4, 1, 0.5), dir.path() / "a.pgm");
  VqaDataset ds;
  ds.samples.push_back({"q1", "a.pgm", "is it?", "yes", "closed", "paraphrased"});
  write_vqa_manifest(ds, dir.path() / "vqa.jsonl");
  const auto back = load_vqa_manifest(dir.path() / "vqa.jsonl");
  ASSERT_EQ(back.samples.size(), 1u);
  EXPECT_EQ(back.samples[0].question_form, "paraphrased");
  EXPECT_EQ(back.samples[0].id, "q1");
}
