#pragma once

#include "opnet/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace opnet {

struct Series {
  std::string label;
  Trajectory points;
  std::string color = "#1f77b4";
  bool dashed = false;
};

/// Overlaid polylines with start/end markers and a legend.
std::string svg_trajectories(const std::vector<Series>& series, const std::string& title);

struct HexCell {
  Vec2 center = Vec2::Zero();
  Index count = 0;
};

/// Pointy-top hexagonal binning with `columns` x `rows` cells over `bounds`.
/// Points outside the bounds are ignored.
struct HexGrid {
  Rect bounds;
  Index columns = 40, rows = 40;
  double dx = 0, dy = 0;  // centre spacing
  std::vector<HexCell> cells;

  /// True when the whole hexagon of `cell` lies inside `r`.
  bool inside(const HexCell& cell, const Rect& r) const;
};

HexGrid hexbin(const std::vector<Vec2>& points, const Rect& bounds, Index columns = 40, Index rows = 40);

std::string svg_hexbin(const HexGrid& grid, const std::string& title, const std::optional<Rect>& outline = std::nullopt);

/// Gaussian KDE with Silverman's bandwidth, evaluated at `x`.
std::vector<double> gaussian_kde(const std::vector<double>& samples, const std::vector<double>& x);

/// Histogram (density-normalised) with a KDE overlay.
std::string svg_histogram(const std::vector<double>& values, Index bins, const std::string& title,
                          const std::string& x_label);

}  // namespace opnet
