#ifndef FLOWCAST_SVGPLOT_HPP
#define FLOWCAST_SVGPLOT_HPP

#include <string>
#include <vector>

namespace flowcast::svg {

/// One bar per group; NaN marks a missing value (no bar drawn).
struct BarSeries {
  std::string name;
  std::vector<double> values;
};

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<std::string> group_labels;
  std::vector<BarSeries> series;
};

/// Deterministic standalone SVG: fixed layout, fixed palette, fixed number
/// formatting; equal inputs render equal bytes. Charts stack vertically.
/// Throws on empty input or inconsistent series lengths.
std::string render_charts(const std::vector<BarChart>& charts);

void write_charts_file(const std::vector<BarChart>& charts, const std::string& path);

}  // namespace flowcast::svg

#endif  // FLOWCAST_SVGPLOT_HPP
