#pragma once

#include <optional>
#include <string>
#include <vector>

#include "esi/downstream.hpp"

namespace esi::cli {

struct Series {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::string> x_ticks;  // one label per point
  std::vector<double> x;             // positions
  std::vector<double> y;
  std::optional<double> reference;  // dashed horizontal line
  std::string reference_label;
  bool bars = false;
};

// Static SVG with one panel per series, laid out left to right.
std::string render_svg(const std::vector<Series>& panels);

// AUC vs misalignment ratio; AUC and MMD vs pretraining size (evenly spaced
// categories); AUC per component as bars.
std::vector<Series> ablation_series(const downstream::AblationTable& table);

}  // namespace esi::cli
