#pragma once

#include <array>
#include <vector>

namespace maggen {

// Interleaved RGB image with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // h * w * 3

  int64_t pixels() const { return static_cast<int64_t>(height) * width; }
};

// Per-channel mean and standard deviation in the decorrelated log color space.
struct ColorStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
};

struct ReinhardResult {
  Image image;
  // Channels whose source deviation was zero are passed through unscaled.
  std::array<bool, 3> passthrough{false, false, false};
};

// Channel statistics of an image in the decorrelated log space.
ColorStats color_stats(const Image& image);

// Color transfer: moves the image's per-channel mean/std in the decorrelated
// log space onto the target statistics, then converts back and clamps to
// [0, 1].
ReinhardResult reinhard_normalize(const Image& image, const ColorStats& target);

}  // namespace maggen
