#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "d2g/field.hpp"

namespace d2g::plot {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kNoRain{236, 236, 236};
inline constexpr Rgb kNoData{255, 255, 255};
inline constexpr Rgb kBackground{255, 255, 255};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<Rgb> pixels;  // row-major

  Image() = default;
  Image(int w, int h, Rgb fill = kBackground) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}
  Rgb& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  const Rgb& at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// Rain scale: kNoRain below 0.1 mm, then log-spaced from 0.1 mm to max_mm.
struct RainScale {
  double wet_mm = 0.1;
  double max_mm = 30.0;
  Rgb color(double mm) const;
  // Position in [0, 1] on the log axis; 0 at wet_mm, 1 at max_mm and above.
  double position(double mm) const;
};

// Linear scale from 0 to max for non-negative fields (uncertainty).
Rgb sequential_color(double t);

// One cell becomes a `pixels` x `pixels` block. Cells with valid == 0 get
// kNoData.
Image render_rain(const Field<double>& mm, const Mask& valid, const RainScale& scale, int pixels);
Image render_linear(const Field<double>& values, const Mask& valid, double max_value, int pixels);
// Horizontal colour bar for a rain scale, `width` x `height` pixels.
Image rain_colorbar(const RainScale& scale, int width, int height);

// Left-to-right strip with `gap` background pixels between panels.
Image hstack(const std::vector<Image>& panels, int gap);
Image vstack(const std::vector<Image>& rows, int gap);

struct Series {
  std::vector<double> x, y;
  std::vector<double> err;  // optional symmetric band, same length as y or empty
  Rgb color{31, 119, 180};
};

// Axes box with the series drawn as polylines and error bars; axis ranges
// cover every point.
Image line_chart(const std::vector<Series>& series, int width, int height);

void write_png(const Image& image, const std::filesystem::path& file);

}  // namespace d2g::plot
