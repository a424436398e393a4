#include "flowcast/svgplot.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

using namespace flowcast;
using svg::BarChart;
using svg::BarSeries;

namespace {

std::vector<BarChart> sample_charts() {
  BarChart chart;
  chart.title = "endpoint error";
  chart.y_label = "meters";
  chart.group_labels = {"visible", "occluded"};
  chart.series = {BarSeries{"baseline", {1.25, 2.5}}, BarSeries{"refined", {1.0, 2.0}}};
  return {chart};
}

}  // namespace

TEST_CASE("svg rendering is deterministic and well formed") {
  const std::string a = svg::render_charts(sample_charts());
  const std::string b = svg::render_charts(sample_charts());
  CHECK(a == b);

  CHECK(a.rfind("<svg", 0) == 0);
  CHECK(a.find("</svg>") != std::string::npos);
  CHECK(a.find("endpoint error") != std::string::npos);
  CHECK(a.find("meters") != std::string::npos);
  CHECK(a.find("visible") != std::string::npos);
  CHECK(a.find("baseline") != std::string::npos);
  CHECK(a.find("refined") != std::string::npos);
  // Two series over two groups: at least four bars.
  std::size_t rects = 0;
  for (std::size_t at = a.find("<rect"); at != std::string::npos; at = a.find("<rect", at + 1))
    ++rects;
  CHECK(rects >= 4);
}

TEST_CASE("different values change the rendering") {
  auto charts = sample_charts();
  const std::string before = svg::render_charts(charts);
  charts[0].series[0].values[1] = 2.75;
  CHECK(svg::render_charts(charts) != before);
}

TEST_CASE("missing values drop the bar but keep the layout") {
  auto charts = sample_charts();
  charts[0].series[0].values[1] = std::numeric_limits<double>::quiet_NaN();
  const std::string rendered = svg::render_charts(charts);
  const std::string full = svg::render_charts(sample_charts());

  auto count_rects = [](const std::string& s) {
    std::size_t n = 0;
    for (std::size_t at = s.find("<rect"); at != std::string::npos; at = s.find("<rect", at + 1))
      ++n;
    return n;
  };
  CHECK(count_rects(rendered) == count_rects(full) - 1);
}

TEST_CASE("charts stack vertically in one document") {
  auto charts = sample_charts();
  BarChart second = charts[0];
  second.title = "temporal coherence";
  charts.push_back(second);
  const std::string rendered = svg::render_charts(charts);
  CHECK(rendered.find("endpoint error") != std::string::npos);
  CHECK(rendered.find("temporal coherence") != std::string::npos);
  // Still one svg document.
  CHECK(rendered.find("<svg", 1) == std::string::npos);
}

TEST_CASE("svg input validation") {
  CHECK_THROWS_AS(svg::render_charts({}), std::invalid_argument);

  auto no_groups = sample_charts();
  no_groups[0].group_labels.clear();
  CHECK_THROWS_AS(svg::render_charts(no_groups), std::invalid_argument);

  auto no_series = sample_charts();
  no_series[0].series.clear();
  CHECK_THROWS_AS(svg::render_charts(no_series), std::invalid_argument);

  auto ragged = sample_charts();
  ragged[0].series[1].values.pop_back();
  CHECK_THROWS_AS(svg::render_charts(ragged), std::invalid_argument);
}

TEST_CASE("svg file writing") {
  const std::string path = "/tmp/flowcast_test_chart.svg";
  svg::write_charts_file(sample_charts(), path);
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == svg::render_charts(sample_charts()));
  std::remove(path.c_str());
  CHECK_THROWS_AS(svg::write_charts_file(sample_charts(), "/nonexistent-dir/x.svg"),
                  std::runtime_error);
}
