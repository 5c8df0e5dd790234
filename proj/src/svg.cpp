#include "delay_hjb/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "delay_hjb/errors.hpp"

namespace delay_hjb {

void write_svg_chart(const std::string& path, const std::string& title, const std::vector<double>& times,
                     const std::vector<SvgSeries>& series) {
  if (times.empty()) throw InvalidArgument("write_svg_chart: no samples");
  const double width = 720, panel = 180, left = 70, right = 20, top = 40, gap = 30;
  const double plot_w = width - left - right;
  const double height = top + series.size() * (panel + gap);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_svg_chart: cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << left << "\" y=\"22\" font-size=\"15\">" << title << "</text>\n";
  const double t0 = times.front(), t1 = std::max(times.back(), t0 + 1e-12);
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& v = series[s].values;
    const std::size_t N = std::min(v.size(), times.size());
    double lo = N ? *std::min_element(v.begin(), v.begin() + N) : 0.0;
    double hi = N ? *std::max_element(v.begin(), v.begin() + N) : 1.0;
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double y0 = top + s * (panel + gap);
    out << "<rect x=\"" << left << "\" y=\"" << y0 << "\" width=\"" << plot_w << "\" height=\"" << panel
        << "\" fill=\"none\" stroke=\"#999\"/>\n";
    out << "<text x=\"" << left + 6 << "\" y=\"" << y0 + 16 << "\">" << series[s].label << "</text>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << y0 + 12 << "\" text-anchor=\"end\">" << hi << "</text>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << y0 + panel << "\" text-anchor=\"end\">" << lo << "</text>\n";
    out << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.2\" points=\"";
    // thin very long series to about 2000 points
    const std::size_t stride = std::max<std::size_t>(1, N / 2000);
    for (std::size_t i = 0; i < N; i += stride) {
      double x = left + plot_w * (times[i] - t0) / (t1 - t0);
      double y = y0 + panel * (1.0 - (v[i] - lo) / (hi - lo));
      out << x << ',' << y << ' ';
    }
    out << "\"/>\n";
  }
  out << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">t</text>\n";
  out << "</svg>\n";
}

}  // namespace delay_hjb
