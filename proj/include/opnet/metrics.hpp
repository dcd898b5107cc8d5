#pragma once

#include "opnet/models.hpp"
#include "opnet/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace opnet {

struct GroundTruth {
  std::string trial_id;
  Vec2 end_location = Vec2::Zero();
};

struct TrialMetric {
  std::string trial_id;
  double displacement_cm = 0;
  bool success = false;
};

struct MetricsReport {
  std::string model;
  Index trials = 0;
  Index successes = 0;
  double success_rate = 0;  // successes / trials
  double mean_displacement_cm = 0;
  double median_displacement_cm = 0;
  FovSpec fov;
  double cm_per_unit = 100;
  std::vector<TrialMetric> per_trial;
};

/// Predictions and truth are matched by trial id; both lists must cover the same trials.
MetricsReport evaluate(const std::vector<PredictionResult>& predictions, const std::vector<GroundTruth>& truth,
                       const FovSpec& fov, double cm_per_unit);

/// Success iff `truth` lies inside the fov rectangle centred on `predicted`.
bool fov_success(const Vec2& predicted, const Vec2& truth, const FovSpec& fov);

std::string format_report(const MetricsReport& report);
MetricsReport parse_report(const std::string& text);
void write_report(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_report(const std::filesystem::path& path);

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 for fewer than two values
};

MeanStd mean_std(const std::vector<double>& values);

/// Shortest round-trip decimal text for a double, independent of locale.
std::string format_double(double v);
double parse_double(std::string_view text);

}  // namespace opnet
