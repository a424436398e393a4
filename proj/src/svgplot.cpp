#include "flowcast/svgplot.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace flowcast::svg {

namespace {

constexpr double kWidth = 760.0;
constexpr double kChartHeight = 300.0;
constexpr double kMarginLeft = 64.0;
constexpr double kMarginRight = 24.0;
constexpr double kMarginTop = 48.0;
constexpr double kMarginBottom = 56.0;

const char* kPalette[] = {"#4878d0", "#ee854a", "#6acc64", "#d65f5f",
                          "#956cb4", "#8c613c", "#dc7ec0", "#797979"};
constexpr int kPaletteSize = 8;

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string label_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Smallest "nice" ceiling (1/2/5 times a power of ten) at or above v.
double nice_ceiling(double v) {
  if (!(v > 0.0)) return 1.0;
  const double mag = std::pow(10.0, std::floor(std::log10(v)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (v <= m * mag * (1.0 + 1e-12)) return m * mag;
  }
  return 10.0 * mag;
}

void render_chart(std::ostringstream& out, const BarChart& chart, double y0) {
  const std::size_t groups = chart.group_labels.size();
  if (groups == 0) throw std::invalid_argument("svg: chart has no groups");
  if (chart.series.empty()) throw std::invalid_argument("svg: chart has no series");
  for (const BarSeries& s : chart.series)
    if (s.values.size() != groups)
      throw std::invalid_argument("svg: series '" + s.name + "' length does not match groups");

  double max_value = 0.0;
  for (const BarSeries& s : chart.series)
    for (double v : s.values)
      if (std::isfinite(v) && v > max_value) max_value = v;
  const double y_max = nice_ceiling(max_value * 1.05);

  const double plot_x = kMarginLeft;
  const double plot_y = y0 + kMarginTop;
  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = kChartHeight - kMarginTop - kMarginBottom;

  out << "<text x=\"" << num(kWidth / 2) << "\" y=\"" << num(y0 + 22)
      << "\" text-anchor=\"middle\" font-size=\"15\" font-weight=\"bold\">"
      << escape(chart.title) << "</text>\n";

  // Gridlines and y ticks, 5 divisions.
  for (int i = 0; i <= 5; ++i) {
    const double frac = static_cast<double>(i) / 5.0;
    const double y = plot_y + plot_h * (1.0 - frac);
    out << "<line x1=\"" << num(plot_x) << "\" y1=\"" << num(y) << "\" x2=\""
        << num(plot_x + plot_w) << "\" y2=\"" << num(y)
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    out << "<text x=\"" << num(plot_x - 6) << "\" y=\"" << num(y + 4)
        << "\" text-anchor=\"end\" font-size=\"11\">" << label_num(y_max * frac) << "</text>\n";
  }
  out << "<line x1=\"" << num(plot_x) << "\" y1=\"" << num(plot_y) << "\" x2=\"" << num(plot_x)
      << "\" y2=\"" << num(plot_y + plot_h) << "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
  out << "<line x1=\"" << num(plot_x) << "\" y1=\"" << num(plot_y + plot_h) << "\" x2=\""
      << num(plot_x + plot_w) << "\" y2=\"" << num(plot_y + plot_h)
      << "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
  out << "<text x=\"16\" y=\"" << num(plot_y + plot_h / 2)
      << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << num(plot_y + plot_h / 2) << ")\">" << escape(chart.y_label) << "</text>\n";

  const double group_w = plot_w / static_cast<double>(groups);
  const double slot_w = group_w * 0.8 / static_cast<double>(chart.series.size());
  for (std::size_t g = 0; g < groups; ++g) {
    const double gx = plot_x + group_w * static_cast<double>(g);
    for (std::size_t s = 0; s < chart.series.size(); ++s) {
      const double v = chart.series[s].values[g];
      if (!std::isfinite(v)) continue;
      const double h = y_max > 0.0 ? plot_h * (v / y_max) : 0.0;
      const double bx = gx + group_w * 0.1 + slot_w * static_cast<double>(s);
      const double by = plot_y + plot_h - h;
      out << "<rect x=\"" << num(bx) << "\" y=\"" << num(by) << "\" width=\""
          << num(slot_w * 0.92) << "\" height=\"" << num(h) << "\" fill=\""
          << kPalette[s % kPaletteSize] << "\"/>\n";
      out << "<text x=\"" << num(bx + slot_w * 0.46) << "\" y=\"" << num(by - 3)
          << "\" text-anchor=\"middle\" font-size=\"9\">" << label_num(v) << "</text>\n";
    }
    out << "<text x=\"" << num(gx + group_w / 2) << "\" y=\"" << num(plot_y + plot_h + 16)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << escape(chart.group_labels[g])
        << "</text>\n";
  }

  // Legend row under the group labels.
  double lx = plot_x;
  const double ly = plot_y + plot_h + 36;
  for (std::size_t s = 0; s < chart.series.size(); ++s) {
    out << "<rect x=\"" << num(lx) << "\" y=\"" << num(ly - 9) << "\" width=\"10\" height=\"10\""
        << " fill=\"" << kPalette[s % kPaletteSize] << "\"/>\n";
    out << "<text x=\"" << num(lx + 14) << "\" y=\"" << num(ly) << "\" font-size=\"11\">"
        << escape(chart.series[s].name) << "</text>\n";
    lx += 18.0 + 7.0 * static_cast<double>(chart.series[s].name.size()) + 12.0;
  }
}

}  // namespace

std::string render_charts(const std::vector<BarChart>& charts) {
  if (charts.empty()) throw std::invalid_argument("svg: no charts to render");
  const double total_h = kChartHeight * static_cast<double>(charts.size());
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\""
      << num(total_h) << "\" viewBox=\"0 0 " << num(kWidth) << ' ' << num(total_h) << "\">\n";
  out << "<rect x=\"0\" y=\"0\" width=\"" << num(kWidth) << "\" height=\"" << num(total_h)
      << "\" fill=\"#ffffff\"/>\n";
  out << "<g font-family=\"Helvetica, Arial, sans-serif\" fill=\"#222222\">\n";
  for (std::size_t i = 0; i < charts.size(); ++i)
    render_chart(out, charts[i], kChartHeight * static_cast<double>(i));
  out << "</g>\n</svg>\n";
  return out.str();
}

void write_charts_file(const std::vector<BarChart>& charts, const std::string& path) {
  const std::string body = render_charts(charts);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("svg: cannot open for writing: " + path);
  out << body;
  if (!out) throw std::runtime_error("svg: write failed: " + path);
}

}  // namespace flowcast::svg
