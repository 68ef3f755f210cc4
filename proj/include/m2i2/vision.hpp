#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "m2i2/rng.hpp"
#include "m2i2/tensor.hpp"

namespace m2i2 {

// Channel-last (HWC) image with pixels in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

// Binary PGM (P5) or PPM (P6) with maxval 255.
Image load_image(const std::filesystem::path& path);
// Writes P5 for one channel, P6 for three; pixels are rounded to bytes.
void write_image(const Image& img, const std::filesystem::path& path);

// Replicates grayscale to 3 channels (or averages RGB to 1).
Image to_channels(const Image& img, std::size_t channels);
Image resize_bilinear(const Image& img, std::size_t height, std::size_t width);

struct AugmentOptions {
  bool train = true;  // false: deterministic center crop only
  bool crop = true;
  bool flip = true;
  bool brightness = true;
  double brightness_lo = 0.8;
  double brightness_hi = 1.2;
};

// Random target x target crop, horizontal flip (p = 0.5) and brightness
// jitter, clamped to [0, 1]. Images smaller than the target are first
// resized up bilinearly.
Image augment(const Image& img, std::size_t target, Rng& rng,
              const AugmentOptions& opts = {});

struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t count() const { return rows * cols; }
  bool operator==(const PatchGrid&) const = default;
};

struct MaskedPatches {
  Tensor patches;                          // [N, patch_size^2 * channels]
  std::vector<std::size_t> mask_positions;  // sorted
  Tensor mask_targets;                     // [k, patch_size^2 * channels]
  PatchGrid grid;
  std::size_t patch_size = 0;
  std::size_t channels = 0;

  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  // Complement of mask_positions, ascending.
  std::vector<std::size_t> visible_positions() const;
  // Rows of `patches` at the visible positions.
  Tensor visible_patches() const;
};

// Row-major patch order (index = row * cols + col); each patch flattened as
// (y, x, channel).
MaskedPatches patchify(const Image& img, std::size_t patch_size);
Image unpatchify(const Tensor& patches, PatchGrid grid, std::size_t patch_size,
                 std::size_t channels);

// max(1, round(rate * n))
std::size_t mask_count(std::size_t n, double rate);

// Draws mask_count(N, rate) distinct patches, copies them to mask_targets and
// zeroes their rows in `patches`.
MaskedPatches mask_patches(MaskedPatches p, double rate, Rng& rng);

// Scatters mask_targets back over the masked rows.
Tensor restore_patches(const MaskedPatches& p);

}  // namespace m2i2
