#pragma once

// Minimal SVG line charts for the evaluation plots.

#include <string>
#include <vector>

namespace ctk::svg {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series, bool log_y = false);

std::string escape(const std::string& s);

}  // namespace ctk::svg
