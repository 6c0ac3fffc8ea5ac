#pragma once

#include <string>
#include <vector>

namespace multiformer::plot {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Line chart as a standalone SVG document.
std::string line_chart(const std::vector<Series>& series, const std::string& title,
                       const std::string& x_label, const std::string& y_label, bool log_y = false);

/// Heatmap with a cell label per value. values[r][c].
std::string heatmap(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                    const std::vector<std::vector<double>>& values, const std::string& title,
                    double vmin = 0.0, double vmax = 100.0);

void write_file(const std::string& path, const std::string& content);

}  // namespace multiformer::plot
