#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "carry/interp.hpp"

namespace carry::interp {

namespace {

// Anchors sampled from the magma colour map at steps of 1/8.
constexpr std::array<std::array<int, 3>, 9> kMagma = {{{0, 0, 4},
                                                       {28, 16, 68},
                                                       {79, 18, 123},
                                                       {129, 37, 129},
                                                       {181, 54, 122},
                                                       {229, 80, 100},
                                                       {251, 135, 97},
                                                       {254, 194, 135},
                                                       {252, 253, 191}}};

constexpr std::array<const char*, 10> kCategorical = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                                      "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                                      "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string magma_hex(double v) {
  if (!std::isfinite(v)) v = 0;
  v = std::clamp(v, 0.0, 1.0);
  const double x = v * 8.0;
  const auto i = std::min<std::size_t>(7, static_cast<std::size_t>(x));
  const double f = x - static_cast<double>(i);
  char buf[8];
  int rgb[3];
  for (int c = 0; c < 3; ++c)
    rgb[c] = static_cast<int>(std::lround(kMagma[i][c] + f * (kMagma[i + 1][c] - kMagma[i][c])));
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

std::string heatmap_svg(std::span<const HeatmapPanel> panels, int columns, double vmin, double vmax,
                        std::span<const std::string> tick_labels) {
  if (panels.empty()) throw InterpError("heatmap_svg: no panels");
  columns = std::max(1, std::min<int>(columns, static_cast<int>(panels.size())));
  const int cell = 22, pad = 36, title_h = 20;
  std::size_t max_r = 0, max_c = 0;
  for (const auto& p : panels) {
    if (p.values.rank() != 2) throw ShapeError("heatmap panel must be 2-D, got " + shape_str(p.values.shape()));
    max_r = std::max(max_r, p.values.dim(0));
    max_c = std::max(max_c, p.values.dim(1));
  }
  const int pw = static_cast<int>(max_c) * cell + pad, ph = static_cast<int>(max_r) * cell + pad + title_h;
  const int rows = (static_cast<int>(panels.size()) + columns - 1) / columns;
  const int bar_h = 40;
  const int width = columns * pw + pad, height = rows * ph + pad + bar_h;
  const double span = vmax > vmin ? vmax - vmin : 1.0;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t k = 0; k < panels.size(); ++k) {
    const auto& p = panels[k];
    const int x0 = pad + static_cast<int>(k % static_cast<std::size_t>(columns)) * pw;
    const int y0 = pad / 2 + static_cast<int>(k / static_cast<std::size_t>(columns)) * ph;
    os << "<text x=\"" << x0 << "\" y=\"" << y0 + 12 << "\" font-size=\"12\">" << escape(p.title)
       << "</text>\n";
    const int gy = y0 + title_h;
    for (std::size_t r = 0; r < p.values.dim(0); ++r)
      for (std::size_t c = 0; c < p.values.dim(1); ++c) {
        const double v = (p.values.at(r, c) - vmin) / span;
        os << "<rect x=\"" << x0 + static_cast<int>(c) * cell << "\" y=\"" << gy + static_cast<int>(r) * cell
           << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"" << magma_hex(v)
           << "\"><title>" << r << "," << c << ": " << p.values.at(r, c) << "</title></rect>\n";
      }
    for (std::size_t i = 0; i < tick_labels.size(); ++i) {
      if (i < p.values.dim(1))
        os << "<text x=\"" << x0 + static_cast<int>(i) * cell + cell / 2 << "\" y=\"" << gy - 3
           << "\" text-anchor=\"middle\">" << escape(tick_labels[i]) << "</text>\n";
      if (i < p.values.dim(0))
        os << "<text x=\"" << x0 - 3 << "\" y=\"" << gy + static_cast<int>(i) * cell + cell / 2 + 3
           << "\" text-anchor=\"end\">" << escape(tick_labels[i]) << "</text>\n";
    }
  }
  // colour bar
  const int by = height - bar_h + 4, bw = 200;
  for (int i = 0; i < 50; ++i)
    os << "<rect x=\"" << pad + i * bw / 50 << "\" y=\"" << by << "\" width=\"" << bw / 50 + 1
       << "\" height=\"10\" fill=\"" << magma_hex(i / 49.0) << "\"/>\n";
  os << "<text x=\"" << pad << "\" y=\"" << by + 22 << "\">" << vmin << "</text>\n";
  os << "<text x=\"" << pad + bw << "\" y=\"" << by + 22 << "\" text-anchor=\"end\">" << vmax
     << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string scatter_svg(const std::vector<std::vector<double>>& points,
                        std::span<const std::string> labels, const std::string& title) {
  if (points.size() != labels.size()) throw InterpError("scatter_svg: one label per point");
  const int size = 420, pad = 40, legend_w = 140;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (!points.empty()) {
    xmin = xmax = points[0].at(0);
    ymin = ymax = points[0].at(1);
    for (const auto& p : points) {
      xmin = std::min(xmin, p[0]);
      xmax = std::max(xmax, p[0]);
      ymin = std::min(ymin, p[1]);
      ymax = std::max(ymax, p[1]);
    }
  }
  const double xs = xmax > xmin ? xmax - xmin : 1, ys = ymax > ymin ? ymax - ymin : 1;
  std::map<std::string, std::size_t> colour;
  for (const auto& l : labels) colour.emplace(l, 0);
  std::size_t ci = 0;
  for (auto& [l, c] : colour) c = ci++ % kCategorical.size();

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad + legend_w
     << "\" height=\"" << size + 2 * pad << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << pad << "\" y=\"" << pad - 12 << "\" font-size=\"13\">" << escape(title)
     << "</text>\n";
  os << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
     << "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double x = pad + (points[i][0] - xmin) / xs * size;
    const double y = pad + size - (points[i][1] - ymin) / ys * size;
    os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"2\" fill=\""
       << kCategorical[colour[labels[i]]] << "\" fill-opacity=\"0.6\"/>\n";
  }
  int ly = pad + 10;
  for (const auto& [l, c] : colour) {
    os << "<circle cx=\"" << size + pad + 16 << "\" cy=\"" << ly - 4 << "\" r=\"4\" fill=\""
       << kCategorical[c] << "\"/><text x=\"" << size + pad + 26 << "\" y=\"" << ly << "\">"
       << escape(l) << "</text>\n";
    ly += 16;
  }
  os << "</svg>\n";
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

}  // namespace carry::interp
