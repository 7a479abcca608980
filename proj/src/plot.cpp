#include "d2g/plot.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

namespace d2g::plot {

namespace {

// Piecewise-linear palette from light blue through green and yellow to dark red.
constexpr std::array<Rgb, 6> kRainStops{{{198, 219, 239}, {66, 146, 198}, {35, 139, 69},
                                         {254, 217, 38}, {240, 59, 32}, {128, 0, 38}}};
constexpr std::array<Rgb, 5> kSequentialStops{{{255, 255, 229}, {254, 196, 79}, {236, 112, 20},
                                               {153, 52, 4}, {60, 20, 2}}};

template <std::size_t N>
Rgb interpolate(const std::array<Rgb, N>& stops, double t) {
  t = std::clamp(t, 0.0, 1.0) * static_cast<double>(N - 1);
  const auto k = std::min(static_cast<std::size_t>(t), N - 2);
  const double f = t - static_cast<double>(k);
  const auto mix = [f](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround((1.0 - f) * a + f * b));
  };
  return {mix(stops[k].r, stops[k + 1].r), mix(stops[k].g, stops[k + 1].g), mix(stops[k].b, stops[k + 1].b)};
}

template <typename ColorOf>
Image render(const Field<double>& values, const Mask& valid, int pixels, ColorOf color_of) {
  if (pixels < 1) throw Error("plot: pixels per cell must be >= 1");
  if (!valid.same_shape(values)) throw ShapeError("plot: mask does not match field");
  Image img(values.width() * pixels, values.height() * pixels);
  for (int i = 0; i < values.height(); ++i)
    for (int j = 0; j < values.width(); ++j) {
      const Rgb c = valid(i, j) ? color_of(values(i, j)) : kNoData;
      for (int di = 0; di < pixels; ++di)
        for (int dj = 0; dj < pixels; ++dj) img.at(j * pixels + dj, i * pixels + di) = c;
    }
  return img;
}

void blit(Image& dst, const Image& src, int x0, int y0) {
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) dst.at(x0 + x, y0 + y) = src.at(x, y);
}

void line(Image& img, int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    if (x0 >= 0 && x0 < img.width && y0 >= 0 && y0 < img.height) img.at(x0, y0) = c;
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace

double RainScale::position(double mm) const {
  if (!(mm >= wet_mm)) return 0.0;
  return std::clamp(std::log(mm / wet_mm) / std::log(max_mm / wet_mm), 0.0, 1.0);
}

Rgb RainScale::color(double mm) const {
  if (!std::isfinite(mm)) return kNoData;
  if (mm < wet_mm) return kNoRain;
  return interpolate(kRainStops, position(mm));
}

Rgb sequential_color(double t) { return interpolate(kSequentialStops, t); }

Image render_rain(const Field<double>& mm, const Mask& valid, const RainScale& scale, int pixels) {
  if (!(scale.wet_mm > 0.0 && scale.max_mm > scale.wet_mm)) throw Error("plot: rain scale needs 0 < wet_mm < max_mm");
  return render(mm, valid, pixels, [&](double v) { return scale.color(v); });
}

Image render_linear(const Field<double>& values, const Mask& valid, double max_value, int pixels) {
  const double m = max_value > 0.0 ? max_value : 1.0;
  return render(values, valid, pixels, [&](double v) { return std::isfinite(v) ? sequential_color(v / m) : kNoData; });
}

Image rain_colorbar(const RainScale& scale, int width, int height) {
  Image img(width, height);
  const int dry = std::max(1, width / 10);
  for (int x = 0; x < width; ++x) {
    Rgb c = kNoRain;
    if (x >= dry) {
      const double t = static_cast<double>(x - dry) / std::max(1, width - dry - 1);
      c = scale.color(scale.wet_mm * std::pow(scale.max_mm / scale.wet_mm, t));
    }
    for (int y = 0; y < height; ++y) img.at(x, y) = c;
  }
  return img;
}

Image hstack(const std::vector<Image>& panels, int gap) {
  int w = 0, h = 0;
  for (const Image& p : panels) {
    w += p.width;
    h = std::max(h, p.height);
  }
  if (!panels.empty()) w += gap * static_cast<int>(panels.size() - 1);
  Image out(w, h);
  int x = 0;
  for (const Image& p : panels) {
    blit(out, p, x, 0);
    x += p.width + gap;
  }
  return out;
}

Image vstack(const std::vector<Image>& rows, int gap) {
  int w = 0, h = 0;
  for (const Image& r : rows) {
    h += r.height;
    w = std::max(w, r.width);
  }
  if (!rows.empty()) h += gap * static_cast<int>(rows.size() - 1);
  Image out(w, h);
  int y = 0;
  for (const Image& r : rows) {
    blit(out, r, 0, y);
    y += r.height + gap;
  }
  return out;
}

Image line_chart(const std::vector<Series>& series, int width, int height) {
  if (width < 40 || height < 40) throw Error("plot: chart too small");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const Series& s : series) {
    if (s.x.size() != s.y.size() || (!s.err.empty() && s.err.size() != s.y.size()))
      throw ShapeError("plot: series lengths differ");
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      const double e = s.err.empty() ? 0.0 : s.err[k];
      xmin = std::min(xmin, s.x[k]);
      xmax = std::max(xmax, s.x[k]);
      ymin = std::min(ymin, s.y[k] - e);
      ymax = std::max(ymax, s.y[k] + e);
    }
  }
  if (!(xmax > xmin)) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (!(ymax > ymin)) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  Image img(width, height);
  const int left = 30, right = width - 10, top = 10, bottom = height - 30;
  const Rgb axis{60, 60, 60}, grid{225, 225, 225};
  for (int k = 1; k < 5; ++k) {
    const int y = top + (bottom - top) * k / 5;
    line(img, left, y, right, y, grid);
  }
  line(img, left, bottom, right, bottom, axis);
  line(img, left, top, left, bottom, axis);
  const auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left))); };
  const auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top))); };
  for (const Series& s : series) {
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      const int x = px(s.x[k]), y = py(s.y[k]);
      if (!s.err.empty()) {
        line(img, x, py(s.y[k] - s.err[k]), x, py(s.y[k] + s.err[k]), s.color);
        line(img, x - 2, py(s.y[k] - s.err[k]), x + 2, py(s.y[k] - s.err[k]), s.color);
        line(img, x - 2, py(s.y[k] + s.err[k]), x + 2, py(s.y[k] + s.err[k]), s.color);
      }
      for (int d = -2; d <= 2; ++d) line(img, x - 2, y + d, x + 2, y + d, s.color);
      if (k > 0) line(img, px(s.x[k - 1]), py(s.y[k - 1]), x, y, s.color);
    }
  }
  return img;
}

void write_png(const Image& image, const std::filesystem::path& file) {
  if (image.width <= 0 || image.height <= 0) throw Error("plot: empty image");
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(file.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot write " + file.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw Error("libpng: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  // Allocated before setjmp: a longjmp from libpng must not skip any destructor.
  std::vector<png_byte> row(static_cast<std::size_t>(image.width) * 3);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng: failed writing " + file.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const Rgb& c = image.at(x, y);
      row[static_cast<std::size_t>(x) * 3] = c.r;
      row[static_cast<std::size_t>(x) * 3 + 1] = c.g;
      row[static_cast<std::size_t>(x) * 3 + 2] = c.b;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace d2g::plot
