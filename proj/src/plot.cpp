#include "dacal/plot.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dacal/errors.hpp"
#include "dacal/io.hpp"

namespace dacal {

using Colour = std::array<std::uint8_t, 3>;

Canvas::Canvas(int width, int height, Colour background)
    : width_(width), height_(height), rgb_(static_cast<std::size_t>(width) * height * 3) {
  if (width < 1 || height < 1) throw DomainError("canvas must be at least 1x1");
  for (std::size_t i = 0; i < rgb_.size(); i += 3) std::copy(background.begin(), background.end(), rgb_.begin() + i);
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Colour colour) {
  x0 = std::clamp(x0, 0, width_);
  x1 = std::clamp(x1, 0, width_);
  y0 = std::clamp(y0, 0, height_);
  y1 = std::clamp(y1, 0, height_);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) std::copy(colour.begin(), colour.end(), rgb_.begin() + (y * width_ + x) * 3);
}

void Canvas::line(int x0, int y0, int x1, int y1, Colour colour, int thickness) {
  const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int half = thickness / 2;
  for (int s = 0; s <= steps; ++s) {
    const double f = steps == 0 ? 0.0 : static_cast<double>(s) / steps;
    const int x = static_cast<int>(std::lround(x0 + f * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + f * (y1 - y0)));
    fill_rect(x - half, y - half, x - half + thickness, y - half + thickness, colour);
  }
}

Colour Canvas::pixel(int x, int y) const {
  const auto* p = rgb_.data() + (y * width_ + x) * 3;
  return {p[0], p[1], p[2]};
}

void Canvas::save_png(const std::filesystem::path& path) const {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width_, height_, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height_; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb_.data() + static_cast<std::size_t>(y) * width_ * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("cannot finish " + path.string());
}

Colour heat_colour(double t) {
  // Piecewise-linear approximation of viridis.
  static constexpr std::array<std::array<double, 3>, 5> anchors = {
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * (anchors.size() - 1);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(t), anchors.size() - 2);
  const double f = t - k;
  Colour c;
  for (int i = 0; i < 3; ++i)
    c[i] = static_cast<std::uint8_t>(std::lround(anchors[k][i] + f * (anchors[k + 1][i] - anchors[k][i])));
  return c;
}

Colour class_colour(int label) {
  static constexpr std::array<Colour, 8> fixed = {{{40, 40, 48},
                                                   {230, 85, 70},
                                                   {80, 200, 100},
                                                   {80, 110, 230},
                                                   {240, 200, 60},
                                                   {180, 90, 200},
                                                   {60, 200, 210},
                                                   {250, 150, 60}}};
  if (label == kIgnoreLabel) return {255, 255, 255};
  return fixed[static_cast<std::size_t>(label) % fixed.size()];
}

namespace {

std::string hex_colour(Colour c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

FigureFiles files_for(const std::filesystem::path& stem) {
  auto with = [&](const char* ext) {
    auto p = stem;
    p += ext;
    return p;
  };
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  return {with(".svg"), with(".png"), with(".csv")};
}

constexpr Colour kBar{70, 110, 200};
constexpr Colour kGap{235, 120, 110};
constexpr Colour kAxis{30, 30, 30};
constexpr Colour kDiagonal{120, 120, 120};

}  // namespace

FigureFiles plot_reliability(std::span<const ReliabilityRow> rows, const std::filesystem::path& stem,
                             const std::string& title) {
  if (rows.empty()) throw EmptySampleError("reliability figure needs at least one bin");
  const FigureFiles files = files_for(stem);
  std::ostringstream raw;
  write_reliability_csv(rows, raw);
  write_text(files.csv, raw.str());

  constexpr int kSize = 480, kMargin = 60, kPlot = kSize - 2 * kMargin;
  auto px = [&](double v) { return kMargin + static_cast<int>(std::lround(v * kPlot)); };
  auto py = [&](double v) { return kSize - kMargin - static_cast<int>(std::lround(v * kPlot)); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kSize / 2 << "\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
      << title << "</text>\n";
  Canvas canvas(kSize, kSize);
  for (const auto& r : rows) {
    if (!r.accuracy || !r.mean_confidence) continue;
    const int x0 = px(r.lower) + 1, x1 = px(r.upper) - 1;
    const int top = py(*r.accuracy), mid = py(r.mean_confidence.value_or(0.0));
    canvas.fill_rect(x0, top, x1, py(0.0), kBar);
    canvas.fill_rect(x0, std::min(top, mid), x1, std::max(top, mid), kGap);
    svg << "<rect x=\"" << x0 << "\" y=\"" << top << "\" width=\"" << x1 - x0 << "\" height=\"" << py(0.0) - top
        << "\" fill=\"" << hex_colour(kBar) << "\"/>\n";
    svg << "<rect x=\"" << x0 << "\" y=\"" << std::min(top, mid) << "\" width=\"" << x1 - x0 << "\" height=\""
        << std::abs(top - mid) << "\" fill=\"" << hex_colour(kGap) << "\" fill-opacity=\"0.7\"/>\n";
  }
  canvas.line(px(0), py(0), px(1), py(1), kDiagonal, 2);
  canvas.line(px(0), py(0), px(1), py(0), kAxis, 2);
  canvas.line(px(0), py(0), px(0), py(1), kAxis, 2);
  svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
      << "\" stroke=\"" << hex_colour(kDiagonal) << "\" stroke-width=\"2\" stroke-dasharray=\"6,4\"/>\n"
      << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(0)
      << "\" stroke=\"black\" stroke-width=\"2\"/>\n"
      << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\"" << py(1)
      << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = k / 5.0;
    svg << "<text x=\"" << px(v) << "\" y=\"" << py(0) + 18 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << num(v) << "</text>\n"
        << "<text x=\"" << px(0) - 8 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << num(v) << "</text>\n";
  }
  svg << "<text x=\"" << kSize / 2 << "\" y=\"" << kSize - 15
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">confidence</text>\n"
      << "<text x=\"18\" y=\"" << kSize / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
      << "transform=\"rotate(-90 18 " << kSize / 2 << ")\">accuracy</text>\n</svg>\n";
  write_text(files.svg, svg.str());
  canvas.save_png(files.png);
  return files;
}

FigureFiles plot_temperature_maps(std::span<const TemperaturePanel> panels, int classes,
                                  const std::filesystem::path& stem) {
  if (panels.empty()) throw EmptySampleError("temperature figure needs at least one panel");
  const int h = panels.front().image.height, w = panels.front().image.width;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& p : panels) {
    if (p.image.height != h || p.image.width != w || p.prediction.height != h || p.prediction.width != w ||
        p.temperature.height != h || p.temperature.width != w)
      throw ShapeError("temperature figure panels must share one image size");
    for (double t : p.temperature.values) {
      lo = std::min(lo, t);
      hi = std::max(hi, t);
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;
  const FigureFiles files = files_for(stem);

  std::ostringstream raw;
  raw << "panel,y,x,red,green,blue,prediction,temperature\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const auto& p = panels[i];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        raw << i << ',' << y << ',' << x << ',' << format_double(p.image.at(0, y, x)) << ','
            << format_double(p.image.at(1, y, x)) << ',' << format_double(p.image.at(2, y, x)) << ','
            << static_cast<int>(p.prediction.at(y, x)) << ',' << format_double(p.temperature.values[y * w + x])
            << '\n';
  }
  write_text(files.csv, raw.str());

  const int scale = std::max(1, 192 / std::max(h, w));
  const int gap = 8, cell_w = w * scale, cell_h = h * scale, header = 24;
  const int width = 3 * cell_w + 4 * gap, height = header + static_cast<int>(panels.size()) * (cell_h + gap) + gap;
  Canvas canvas(width, height);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const char* titles[] = {"image", "prediction", "temperature"};
  for (int k = 0; k < 3; ++k)
    svg << "<text x=\"" << gap + k * (cell_w + gap) + cell_w / 2 << "\" y=\"17\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"13\">" << titles[k] << (k == 2 ? " [" + num(lo) + ", " + num(hi) + "]" : "")
        << "</text>\n";

  for (std::size_t i = 0; i < panels.size(); ++i) {
    const auto& p = panels[i];
    const int top = header + static_cast<int>(i) * (cell_h + gap);
    for (int k = 0; k < 3; ++k) {
      const int left = gap + k * (cell_w + gap);
      for (int y = 0; y < h; ++y) {
        // Horizontal runs of one colour become a single SVG rectangle.
        int run_start = 0;
        Colour run_colour{};
        for (int x = 0; x <= w; ++x) {
          Colour c{};
          if (x < w) {
            if (k == 0)
              for (int ch = 0; ch < 3; ++ch)
                c[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(p.image.at(ch, y, x), 0.0, 1.0) * 255));
            else if (k == 1)
              c = class_colour(p.prediction.at(y, x) < classes ? p.prediction.at(y, x) : kIgnoreLabel);
            else
              c = heat_colour((p.temperature.values[y * w + x] - lo) / span);
            canvas.fill_rect(left + x * scale, top + y * scale, left + (x + 1) * scale, top + (y + 1) * scale, c);
          }
          if (x == w || (x > run_start && c != run_colour)) {
            svg << "<rect x=\"" << left + run_start * scale << "\" y=\"" << top + y * scale << "\" width=\""
                << (x - run_start) * scale << "\" height=\"" << scale << "\" fill=\"" << hex_colour(run_colour)
                << "\"/>\n";
            run_start = x;
          }
          run_colour = c;
        }
      }
    }
  }
  svg << "</svg>\n";
  write_text(files.svg, svg.str());
  canvas.save_png(files.png);
  return files;
}

}  // namespace dacal
