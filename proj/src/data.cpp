#include "m2i2/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "m2i2/error.hpp"
#include "m2i2/rng.hpp"
#include "m2i2/vision.hpp"

namespace m2i2 {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string field(const json& rec, const char* key, const fs::path& path) {
  if (!rec.contains(key) || !rec[key].is_string()) {
    throw FormatError(path.string() + ": record lacks string field '" + key + "'");
  }
  return rec[key].get<std::string>();
}

void require_image(const fs::path& root, const std::string& rel) {
  if (!fs::exists(root / rel)) {
    throw IoError("manifest references missing image " + (root / rel).string());
  }
}

void write_lines(const fs::path& path, const std::vector<json>& recs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : recs) out << r.dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

bool inside_shape(const std::string& shape, double dx, double dy, double r) {
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
  const double arm = r / 3.0;
  return (std::abs(dx) <= arm && std::abs(dy) <= r) ||
         (std::abs(dy) <= arm && std::abs(dx) <= r);
}

Image render_scene(const SceneSpec& s, std::size_t size, Rng& rng) {
  Image img(size, size, 3);
  const double half = static_cast<double>(size) / 2.0;
  const bool left = s.position.find("left") != std::string::npos;
  const bool upper = s.position.find("upper") != std::string::npos;
  const double jitter = half * 0.08;
  const double cx = (left ? 0.5 : 1.5) * half + rng.uniform(-jitter, jitter);
  const double cy = (upper ? 0.5 : 1.5) * half + rng.uniform(-jitter, jitter);
  const double r = (s.size == "large" ? 0.36 : 0.2) * half;
  const double level = s.intensity == "bright" ? 0.95 : 0.5;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double v = inside_shape(s.shape, dx, dy, r) ? level : 0.1;
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(y, x, c) = std::clamp(v + rng.uniform(-0.03, 0.03), 0.0, 1.0);
      }
    }
  }
  return img;
}

struct Question {
  std::string text;
  std::string answer;
  std::string type;
  std::string form;
};

Question make_question(const SceneSpec& s, Rng& rng) {
  const bool para = rng.bernoulli(0.3);
  const auto& shapes = synth_shapes();
  Question q;
  q.form = para ? "paraphrased" : "freeform";
  switch (rng.below(5)) {
    case 0: {
      const bool present = rng.bernoulli(0.5);
      std::string asked = s.shape;
      if (!present) {
        do asked = shapes[rng.below(shapes.size())];
        while (asked == s.shape);
      }
      q.text = para ? "does the image contain a " + asked + "?" : "is there a " + asked + "?";
      q.answer = present ? "yes" : "no";
      q.type = "closed";
      break;
    }
    case 1:
      q.text = para ? "is the " + s.shape + " brightly lit?" : "is the " + s.shape + " bright?";
      q.answer = s.intensity == "bright" ? "yes" : "no";
      q.type = "closed";
      break;
    case 2:
      q.text = para ? "in which part of the image is the " + s.shape + "?"
                    : "where is the " + s.shape + "?";
      q.answer = s.position;
      q.type = "open";
      break;
    case 3:
      q.text = para ? "which shape appears in the image?" : "what shape is shown?";
      q.answer = s.shape;
      q.type = "open";
      break;
    default:
      q.text = para ? "what is the size of the " + s.shape + "?"
                    : "how large is the " + s.shape + "?";
      q.answer = s.size;
      q.type = "open";
      break;
  }
  return q;
}

}  // namespace

CaptionDataset load_caption_manifest(const fs::path& manifest) {
  CaptionDataset ds;
  ds.root = manifest.parent_path();
  for (const auto& rec : read_jsonl(manifest)) {
    CaptionRecord r{field(rec, "image", manifest), field(rec, "caption", manifest)};
    require_image(ds.root, r.image);
    ds.records.push_back(std::move(r));
  }
  return ds;
}

VqaDataset load_vqa_manifest(const fs::path& manifest) {
  VqaDataset ds;
  ds.root = manifest.parent_path();
  for (const auto& rec : read_jsonl(manifest)) {
    VqaSample s;
    s.image = field(rec, "image", manifest);
    s.question = field(rec, "question", manifest);
    s.answer = field(rec, "answer", manifest);
    s.answer_type = field(rec, "answer_type", manifest);
    if (rec.contains("question_form")) s.question_form = field(rec, "question_form", manifest);
    s.id = rec.contains("id") ? field(rec, "id", manifest)
                              : "sample" + std::to_string(ds.samples.size());
    if (s.answer.find_first_not_of(" \t") == std::string::npos) {
      throw FormatError(manifest.string() + ": empty answer for " + s.id);
    }
    if (s.answer_type != "closed" && s.answer_type != "open") {
      throw FormatError(manifest.string() + ": answer_type '" + s.answer_type +
                        "' is not closed/open");
    }
    if (s.question_form != "freeform" && s.question_form != "paraphrased") {
      throw FormatError(manifest.string() + ": question_form '" + s.question_form +
                        "' is not freeform/paraphrased");
    }
    require_image(ds.root, s.image);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_caption_manifest(const CaptionDataset& ds, const fs::path& manifest) {
  std::vector<json> recs;
  for (const auto& r : ds.records) recs.push_back({{"image", r.image}, {"caption", r.caption}});
  write_lines(manifest, recs);
}

void write_vqa_manifest(const VqaDataset& ds, const fs::path& manifest) {
  std::vector<json> recs;
  for (const auto& s : ds.samples) {
    recs.push_back({{"id", s.id},
                    {"image", s.image},
                    {"question", s.question},
                    {"answer", s.answer},
                    {"answer_type", s.answer_type},
                    {"question_form", s.question_form}});
  }
  write_lines(manifest, recs);
}

fs::path resolve_manifest(const fs::path& p, const std::string& default_name) {
  if (fs::is_directory(p)) return p / default_name;
  return p;
}

const std::vector<std::string>& synth_shapes() {
  static const std::vector<std::string> v = {"circle", "square", "cross"};
  return v;
}

const std::vector<std::string>& synth_positions() {
  static const std::vector<std::string> v = {"upper left", "upper right",
                                             "lower left", "lower right"};
  return v;
}

std::string scene_caption(const SceneSpec& s) {
  return "a " + s.size + " " + s.intensity + " " + s.shape + " in the " + s.position;
}

std::vector<SceneSpec> synth_scenes(std::size_t n, std::uint64_t seed) {
  std::vector<SceneSpec> all;
  for (const auto& shape : synth_shapes())
    for (const auto& pos : synth_positions())
      for (const char* size : {"small", "large"})
        for (const char* level : {"dim", "bright"})
          all.push_back({shape, pos, size, level});
  std::vector<SceneSpec> out;
  std::size_t round = 0;
  while (out.size() < n) {
    Rng rng(derive_seed(seed, {0x5ce9e, round++}));
    auto order = all;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (auto& s : order) {
      if (out.size() == n) break;
      out.push_back(std::move(s));
    }
  }
  return out;
}

SynthResult synth_dataset(const std::string& kind, std::size_t n, std::uint64_t seed,
                          const fs::path& out_dir, std::size_t image_size) {
  if (kind != "captions" && kind != "vqa") {
    throw ConfigError("synth: kind must be captions or vqa, got '" + kind + "'");
  }
  if (n == 0) throw ConfigError("synth: n must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  const auto scenes = synth_scenes(n, seed);
  SynthResult res;
  CaptionDataset caps;
  VqaDataset vqa;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {0x1a9e, i}));
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.ppm", i);
    const std::string rel = std::string("images/") + name;
    write_image(render_scene(scenes[i], image_size, rng), out_dir / rel);
    ++res.images;
    if (kind == "captions") {
      caps.records.push_back({rel, scene_caption(scenes[i])});
    } else {
      const auto q = make_question(scenes[i], rng);
      char id[32];
      std::snprintf(id, sizeof id, "q%05zu", i);
      vqa.samples.push_back({id, rel, q.text, q.answer, q.type, q.form});
    }
  }
  if (kind == "captions") {
    res.manifest = out_dir / "captions.jsonl";
    write_caption_manifest(caps, res.manifest);
    res.records = caps.records.size();
  } else {
    res.manifest = out_dir / "vqa.jsonl";
    write_vqa_manifest(vqa, res.manifest);
    res.records = vqa.samples.size();
  }
  return res;
}

}  // namespace m2i2
