#pragma once

#include "opnet/ops.hpp"
#include "opnet/sim.hpp"
#include "opnet/tensor.hpp"
#include "opnet/types.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace opnet {

struct StftConfig {
  Index window_length = 256;

  Index hop() const { return window_length / 2; }
  Index bins() const { return window_length / 2; }
  Index frames(Index samples) const;
  void validate() const;

  static StftConfig for_preset(Preset preset);
};

/// (T, F, 2C) row-major: depth slices [0, C) are magnitudes, [C, 2C) phases.
template <typename Scalar>
struct SpectrogramFeature {
  Index frames = 0, bins = 0, depth = 0;
  Buffer<Scalar> data;

  Scalar& at(Index t, Index f, Index d) { return data[(t * bins + f) * depth + d]; }
  Scalar at(Index t, Index f, Index d) const { return data[(t * bins + f) * depth + d]; }
  Index channels() const { return depth / 2; }

  template <typename Other>
  SpectrogramFeature<Other> cast() const {
    return {frames, bins, depth, data.template cast<Other>()};
  }
};

SpectrogramFeature<double> stft_features(const Waveform& waveform, const StftConfig& cfg);

/// output[i] = traj[0] - traj[i]
Trajectory normalize_trajectory(const Trajectory& traj);

Trajectory trim_pad_observed(const Trajectory& path, Index exit_index);

/// Keeps the first 70 rows, padding with the last one. An empty input falls back
/// to `fill` and is an error without it.
Trajectory trim_pad_post(const Trajectory& post, const std::optional<Vec2>& fill = std::nullopt);

Trajectory complete_trajectory(const Trajectory& observed, const Trajectory& post);

class SilentRecording : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PeakConfig {
  double relative_threshold = 0.2;  // of the global envelope maximum
  double min_separation = 0.030;    // seconds
  double block = 0.002;             // envelope block length, seconds
  double min_peak_to_floor = 6.0;   // envelope max over its median, else treated as silence
};

/// Envelope peak times (seconds) of the mean rectified signal across channels.
std::vector<double> detect_peaks(const Waveform& waveform, double sample_rate, const PeakConfig& cfg = {});

double bounce_duration(const Waveform& waveform, double sample_rate, double exit_time, const PeakConfig& cfg = {});

/// Adaptive average pooling of activations along axis 1 to `target` steps.
template <typename Scalar>
Tensor<Scalar> resample_time(const Tensor<Scalar>& x, Index target = kCompleteSteps) {
  return adaptive_avgpool(x, 1, target);
}

/// Splits a raw simulated trial into the persisted observed/complete windows.
Trial make_trial(const RawTrial& raw, std::string id);

}  // namespace opnet
