#include "m2i2/vision.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "m2i2/error.hpp"

namespace m2i2 {

namespace {

// Reads the next whitespace-delimited header integer, skipping comments.
std::size_t read_header_int(std::istream& in, const std::filesystem::path& path) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  std::string digits;
  while (c != EOF && std::isdigit(c)) {
    digits.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (digits.empty() || c == EOF) {
    throw IoError("truncated or malformed image header in " + path.string());
  }
  return std::stoul(digits);
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in) throw IoError("truncated image " + path.string());
  std::size_t channels = 0;
  if (magic[0] == 'P' && magic[1] == '5') {
    channels = 1;
  } else if (magic[0] == 'P' && magic[1] == '6') {
    channels = 3;
  } else {
    throw FormatError("unsupported image format (expected P5/P6) in " +
                      path.string());
  }
  const auto width = read_header_int(in, path);
  const auto height = read_header_int(in, path);
  const auto maxval = read_header_int(in, path);
  if (maxval != 255) {
    throw FormatError("maxval must be 255 in " + path.string());
  }
  if (width == 0 || height == 0) {
    throw FormatError("empty image " + path.string());
  }
  Image img(height, width, channels);
  std::vector<unsigned char> bytes(img.pixels.size());
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw IoError("truncated pixel data in " + path.string());
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

void write_image(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) {
    throw FormatError("write_image: channels must be 1 or 3");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << (img.channels == 1 ? "P5" : "P6") << '\n'
      << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(img.pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Image to_channels(const Image& img, std::size_t channels) {
  if (img.channels == channels) return img;
  Image out(img.height, img.width, channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      if (img.channels == 1 && channels == 3) {
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, 0);
      } else if (img.channels == 3 && channels == 1) {
        out.at(y, x, 0) =
            (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
      } else {
        throw FormatError("to_channels: cannot convert " +
                          std::to_string(img.channels) + " to " +
                          std::to_string(channels) + " channels");
      }
    }
  }
  return out;
}

Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  if (img.height == height && img.width == width) return img;
  Image out(height, width, img.channels);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, img.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, img.width - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(y0, x0, c) + tx * (img.at(y0, x1, c) - img.at(y0, x0, c));
        const double bot = img.at(y1, x0, c) + tx * (img.at(y1, x1, c) - img.at(y1, x0, c));
        out.at(y, x, c) = top + ty * (bot - top);
      }
    }
  }
  return out;
}

Image augment(const Image& img, std::size_t target, Rng& rng,
              const AugmentOptions& opts) {
  const Image* src = &img;
  Image resized;
  if (img.height < target || img.width < target) {
    resized = resize_bilinear(img, std::max(img.height, target),
                              std::max(img.width, target));
    src = &resized;
  }
  std::size_t oy = (src->height - target) / 2;
  std::size_t ox = (src->width - target) / 2;
  bool flip = false;
  double factor = 1.0;
  if (opts.train) {
    if (opts.crop) {
      oy = rng.below(src->height - target + 1);
      ox = rng.below(src->width - target + 1);
    }
    if (opts.flip) flip = rng.bernoulli(0.5);
    if (opts.brightness) factor = rng.uniform(opts.brightness_lo, opts.brightness_hi);
  }
  Image out(target, target, src->channels);
  for (std::size_t y = 0; y < target; ++y) {
    for (std::size_t x = 0; x < target; ++x) {
      const std::size_t sx = flip ? ox + target - 1 - x : ox + x;
      for (std::size_t c = 0; c < src->channels; ++c) {
        const double v = src->at(oy + y, sx, c);
        out.at(y, x, c) = factor == 1.0 ? v : std::clamp(v * factor, 0.0, 1.0);
      }
    }
  }
  return out;
}

std::vector<std::size_t> MaskedPatches::visible_positions() const {
  std::vector<std::size_t> vis;
  std::size_t m = 0;
  for (std::size_t i = 0; i < grid.count(); ++i) {
    if (m < mask_positions.size() && mask_positions[m] == i) {
      ++m;
    } else {
      vis.push_back(i);
    }
  }
  return vis;
}

Tensor MaskedPatches::visible_patches() const {
  const auto vis = visible_positions();
  const auto d = patch_dim();
  std::vector<double> out(vis.size() * d);
  const auto& pv = patches.values();
  for (std::size_t i = 0; i < vis.size(); ++i)
    std::copy_n(pv.data() + vis[i] * d, d, out.data() + i * d);
  return Tensor({vis.size(), d}, std::move(out));
}

MaskedPatches patchify(const Image& img, std::size_t patch_size) {
  if (patch_size == 0 || img.height % patch_size || img.width % patch_size) {
    throw ContractError("patchify: image " + std::to_string(img.height) + "x" +
                        std::to_string(img.width) +
                        " is not divisible by patch size " +
                        std::to_string(patch_size));
  }
  MaskedPatches p;
  p.grid = {img.height / patch_size, img.width / patch_size};
  p.patch_size = patch_size;
  p.channels = img.channels;
  const auto d = p.patch_dim();
  std::vector<double> data(p.grid.count() * d);
  for (std::size_t r = 0; r < p.grid.rows; ++r)
    for (std::size_t c = 0; c < p.grid.cols; ++c) {
      double* dst = data.data() + (r * p.grid.cols + c) * d;
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          for (std::size_t ch = 0; ch < img.channels; ++ch)
            *dst++ = img.at(r * patch_size + y, c * patch_size + x, ch);
    }
  p.patches = Tensor({p.grid.count(), d}, std::move(data));
  p.mask_targets = Tensor::zeros({0, d});
  return p;
}

Image unpatchify(const Tensor& patches, PatchGrid grid, std::size_t patch_size,
                 std::size_t channels) {
  const auto d = patch_size * patch_size * channels;
  if (patches.rank() != 2 || patches.rows() != grid.count() || patches.cols() != d) {
    throw DimensionError("unpatchify: patches " + shape_str(patches.shape()) +
                         " do not match the grid");
  }
  Image img(grid.rows * patch_size, grid.cols * patch_size, channels);
  const auto& pv = patches.values();
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const double* src = pv.data() + (r * grid.cols + c) * d;
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          for (std::size_t ch = 0; ch < channels; ++ch)
            img.at(r * patch_size + y, c * patch_size + x, ch) = *src++;
    }
  return img;
}

std::size_t mask_count(std::size_t n, double rate) {
  const auto k = static_cast<std::size_t>(std::lround(rate * static_cast<double>(n)));
  return std::min(n, std::max<std::size_t>(1, k));
}

MaskedPatches mask_patches(MaskedPatches p, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw ContractError("mask_patches: rate must lie in (0, 1)");
  }
  const auto n = p.grid.count();
  const auto k = mask_count(n, rate);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  // Partial Fisher-Yates: the first k entries are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
  p.mask_positions.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(p.mask_positions.begin(), p.mask_positions.end());

  const auto d = p.patch_dim();
  std::vector<double> data(p.patches.values());
  std::vector<double> targets(k * d);
  for (std::size_t i = 0; i < k; ++i) {
    double* row = data.data() + p.mask_positions[i] * d;
    std::copy_n(row, d, targets.data() + i * d);
    std::fill_n(row, d, 0.0);
  }
  p.patches = Tensor({n, d}, std::move(data));
  p.mask_targets = Tensor({k, d}, std::move(targets));
  return p;
}

Tensor restore_patches(const MaskedPatches& p) {
  const auto d = p.patch_dim();
  std::vector<double> data(p.patches.values());
  const auto& tv = p.mask_targets.values();
  for (std::size_t i = 0; i < p.mask_positions.size(); ++i)
    std::copy_n(tv.data() + i * d, d, data.data() + p.mask_positions[i] * d);
  return Tensor(p.patches.shape(), std::move(data));
}

}  // namespace m2i2
