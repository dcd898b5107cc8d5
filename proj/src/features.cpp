#include "opnet/features.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>

namespace opnet {

Index StftConfig::frames(Index samples) const {
  if (samples < window_length) return 0;
  return (samples - window_length) / hop() + 1;
}

void StftConfig::validate() const {
  if (window_length < 4 || (window_length & (window_length - 1)) != 0) {
    throw std::invalid_argument("stft: window_length must be a power of two >= 4, got " +
                                std::to_string(window_length));
  }
}

StftConfig StftConfig::for_preset(Preset preset) { return {preset == Preset::desk ? 256 : 2048}; }

SpectrogramFeature<double> stft_features(const Waveform& waveform, const StftConfig& cfg) {
  cfg.validate();
  const Index C = waveform.rows(), N = waveform.cols(), M = cfg.window_length;
  if (C < 1) throw std::invalid_argument("stft: waveform has no channels");
  if (N < M) {
    throw std::invalid_argument("stft: waveform of " + std::to_string(N) + " samples is shorter than one window (" +
                                std::to_string(M) + ")");
  }
  SpectrogramFeature<double> out;
  out.frames = cfg.frames(N);
  out.bins = cfg.bins();
  out.depth = 2 * C;
  out.data.resize(out.frames * out.bins * out.depth);

  Eigen::VectorXd window(M);
  for (Index n = 0; n < M; ++n) window[n] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / M);

  Eigen::FFT<double> fft;
  std::vector<double> frame(static_cast<std::size_t>(M));
  std::vector<std::complex<double>> spectrum;
  for (Index c = 0; c < C; ++c) {
    for (Index t = 0; t < out.frames; ++t) {
      const Index start = t * cfg.hop();
      for (Index n = 0; n < M; ++n) frame[static_cast<std::size_t>(n)] = window[n] * waveform(c, start + n);
      fft.fwd(spectrum, frame);
      for (Index f = 0; f < out.bins; ++f) {
        const auto z = spectrum[static_cast<std::size_t>(f + 1)];
        double phase = std::arg(z);
        if (phase <= -std::numbers::pi) phase = std::numbers::pi;
        out.at(t, f, c) = std::abs(z);
        out.at(t, f, C + c) = phase;
      }
    }
  }
  return out;
}

Trajectory normalize_trajectory(const Trajectory& traj) {
  if (traj.rows() == 0) throw std::invalid_argument("normalize_trajectory: empty trajectory");
  Trajectory out(traj.rows(), 2);
  for (Index i = 0; i < traj.rows(); ++i) out.row(i) = traj.row(0) - traj.row(i);
  return out;
}

Trajectory trim_pad_observed(const Trajectory& path, Index exit_index) {
  if (path.rows() == 0) throw std::invalid_argument("trim_pad_observed: empty path");
  const Index n = std::clamp<Index>(exit_index, 1, path.rows());
  Trajectory out(kObservedSteps, 2);
  if (n >= kObservedSteps) {
    out = path.middleRows(n - kObservedSteps, kObservedSteps);
  } else {
    const Index pad = kObservedSteps - n;
    for (Index i = 0; i < pad; ++i) out.row(i) = path.row(0);
    out.bottomRows(n) = path.topRows(n);
  }
  return out;
}

Trajectory trim_pad_post(const Trajectory& post, const std::optional<Vec2>& fill) {
  Trajectory out(kPostSteps, 2);
  if (post.rows() == 0) {
    if (!fill) throw std::invalid_argument("trim_pad_post: empty post trajectory and no fill point");
    for (Index i = 0; i < kPostSteps; ++i) out.row(i) = fill->transpose();
    return out;
  }
  const Index n = std::min<Index>(post.rows(), kPostSteps);
  out.topRows(n) = post.topRows(n);
  for (Index i = n; i < kPostSteps; ++i) out.row(i) = post.row(n - 1);
  return out;
}

Trajectory complete_trajectory(const Trajectory& observed, const Trajectory& post) {
  if (observed.rows() != kObservedSteps || post.rows() != kPostSteps) {
    throw std::invalid_argument("complete_trajectory: expected 65 observed and 70 post rows, got " +
                                std::to_string(observed.rows()) + " and " + std::to_string(post.rows()));
  }
  Trajectory out(kCompleteSteps, 2);
  out.topRows(kObservedSteps) = observed;
  out.bottomRows(kPostSteps) = post;
  return out;
}

std::vector<double> detect_peaks(const Waveform& waveform, double sample_rate, const PeakConfig& cfg) {
  if (waveform.size() == 0) throw std::invalid_argument("detect_peaks: empty waveform");
  if (!(sample_rate > 0)) throw std::invalid_argument("detect_peaks: sample_rate must be positive");
  const Index N = waveform.cols();
  const Eigen::RowVectorXd rectified = waveform.cast<double>().cwiseAbs().colwise().mean();

  const Index block = std::max<Index>(1, static_cast<Index>(std::llround(cfg.block * sample_rate)));
  const Index nb = (N + block - 1) / block;
  std::vector<double> env(static_cast<std::size_t>(nb));
  std::vector<Index> where(static_cast<std::size_t>(nb));
  for (Index b = 0; b < nb; ++b) {
    const Index start = b * block, len = std::min(block, N - start);
    Index arg = 0;
    env[static_cast<std::size_t>(b)] = rectified.segment(start, len).maxCoeff(&arg);
    where[static_cast<std::size_t>(b)] = start + arg;
  }

  const double peak = *std::max_element(env.begin(), env.end());
  std::vector<double> sorted = env;
  std::nth_element(sorted.begin(), sorted.begin() + nb / 2, sorted.end());
  const double floor = sorted[static_cast<std::size_t>(nb / 2)];
  if (!(peak > 0) || peak < cfg.min_peak_to_floor * floor) {
    throw SilentRecording("no impact peak stands out of the recording (envelope max " + std::to_string(peak) +
                          ", median " + std::to_string(floor) + ")");
  }

  std::vector<Index> candidates;
  const double threshold = cfg.relative_threshold * peak;
  for (Index b = 0; b < nb; ++b) {
    const double e = env[static_cast<std::size_t>(b)];
    const bool left = b == 0 || e >= env[static_cast<std::size_t>(b - 1)];
    const bool right = b + 1 == nb || e > env[static_cast<std::size_t>(b + 1)];
    if (e >= threshold && left && right) candidates.push_back(b);
  }
  std::sort(candidates.begin(), candidates.end(),
            [&](Index a, Index b) { return env[static_cast<std::size_t>(a)] > env[static_cast<std::size_t>(b)]; });
  std::vector<double> times;
  for (Index b : candidates) {
    const double t = static_cast<double>(where[static_cast<std::size_t>(b)]) / sample_rate;
    const bool clear = std::none_of(times.begin(), times.end(),
                                    [&](double s) { return std::abs(s - t) < cfg.min_separation; });
    if (clear) times.push_back(t);
  }
  std::sort(times.begin(), times.end());
  return times;
}

double bounce_duration(const Waveform& waveform, double sample_rate, double exit_time, const PeakConfig& cfg) {
  const auto peaks = detect_peaks(waveform, sample_rate, cfg);
  return std::max(0.0, peaks.back() - std::max(peaks.front(), exit_time));
}

Trial make_trial(const RawTrial& raw, std::string id) {
  Trial trial;
  trial.id = std::move(id);
  trial.audio = raw.waveform;
  trial.observed = trim_pad_observed(raw.path, raw.exit_index);
  const Index frames = raw.path.rows();
  const Index start = std::min(raw.exit_index, frames);
  const Trajectory post = raw.path.bottomRows(frames - start);
  trial.complete = complete_trajectory(trial.observed, trim_pad_post(post, raw.end_location));
  trial.end_location = raw.end_location;
  trial.exit_time = raw.exit_time;
  trial.impacts = raw.impacts;
  return trial;
}

}  // namespace opnet
