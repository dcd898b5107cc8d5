#pragma once

#include "opnet/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace opnet {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

/// K x 2 table of (x, y) coordinates, one row per frame.
using Trajectory = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// C x N multichannel audio, one row per microphone.
using Waveform = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr Index kObservedSteps = 65;
inline constexpr Index kPostSteps = 70;
inline constexpr Index kCompleteSteps = kObservedSteps + kPostSteps;
inline constexpr Index kChannels = 7;

struct Rect {
  double x_min = -0.6, x_max = 0.6, y_min = -0.45, y_max = 0.45;

  bool contains(const Vec2& p) const { return p.x() >= x_min && p.x() <= x_max && p.y() >= y_min && p.y() <= y_max; }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
};

/// Wrist-camera footprint, a width x height rectangle centred on a point.
struct FovSpec {
  double width = 0.35;
  double height = 0.25;

  void validate() const;
  bool contains(const Vec2& center, const Vec2& p) const {
    return std::abs(p.x() - center.x()) <= 0.5 * width && std::abs(p.y() - center.y()) <= 0.5 * height;
  }
};

struct ImpactEvent {
  double time = 0;  // seconds from release
  Vec2 position = Vec2::Zero();
  double energy = 0;  // joules
};

/// One drop event as persisted and consumed by the models. Coordinates are raw
/// table-frame meters; normalisation happens at load time.
struct Trial {
  std::string id;
  Waveform audio;                   // 7 x (sample_rate * duration)
  Trajectory observed;              // 65 x 2
  Trajectory complete;              // 135 x 2
  Vec2 end_location = Vec2::Zero();
  std::optional<double> exit_time;  // seconds
  std::vector<ImpactEvent> impacts;  // simulator ground truth, may be empty
};

}  // namespace opnet
