#pragma once

#include <string>
#include <utility>
#include <vector>

namespace delay_hjb {

struct SvgSeries {
  std::string label;
  std::vector<double> values;
};

// Stacked line charts sharing one time axis, one panel per series.
void write_svg_chart(const std::string& path, const std::string& title, const std::vector<double>& times,
                     const std::vector<SvgSeries>& series);

}  // namespace delay_hjb
