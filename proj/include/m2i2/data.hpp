#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace m2i2 {

struct CaptionRecord {
  std::string image;  // relative to the manifest directory
  std::string caption;
};

struct CaptionDataset {
  std::filesystem::path root;
  std::vector<CaptionRecord> records;
};

struct VqaSample {
  std::string id;
  std::string image;
  std::string question;
  std::string answer;
  std::string answer_type;                 // "closed" | "open"
  std::string question_form = "freeform";  // "freeform" | "paraphrased"
};

struct VqaDataset {
  std::filesystem::path root;
  std::vector<VqaSample> samples;
};

// JSONL loaders. Every referenced image must exist; VQA answers must be
// nonempty and typed closed/open.
CaptionDataset load_caption_manifest(const std::filesystem::path& manifest);
VqaDataset load_vqa_manifest(const std::filesystem::path& manifest);

void write_caption_manifest(const CaptionDataset& ds,
                            const std::filesystem::path& manifest);
void write_vqa_manifest(const VqaDataset& ds, const std::filesystem::path& manifest);

// Accepts either a manifest file or a directory holding the default
// manifest name ("captions.jsonl" / "vqa.jsonl").
std::filesystem::path resolve_manifest(const std::filesystem::path& p,
                                       const std::string& default_name);

// Parameters of one synthetic scene.
struct SceneSpec {
  std::string shape;     // circle | square | cross
  std::string position;  // upper left | upper right | lower left | lower right
  std::string size;      // small | large
  std::string intensity; // dim | bright
};

const std::vector<std::string>& synth_shapes();
const std::vector<std::string>& synth_positions();

std::string scene_caption(const SceneSpec& s);

// Scenes in a seeded order that cycles through all 48 combinations before
// repeating any.
std::vector<SceneSpec> synth_scenes(std::size_t n, std::uint64_t seed);

struct SynthResult {
  std::filesystem::path manifest;
  std::size_t images = 0;
  std::size_t records = 0;
};

// Writes PPM images under out_dir/images and a manifest in out_dir
// (captions.jsonl or vqa.jsonl). kind is "captions" or "vqa".
SynthResult synth_dataset(const std::string& kind, std::size_t n,
                          std::uint64_t seed, const std::filesystem::path& out_dir,
                          std::size_t image_size = 64);

}  // namespace m2i2
