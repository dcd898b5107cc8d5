#include "opnet/sim.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <random>
#include <string>
#include <thread>

namespace opnet {

namespace {

constexpr double kCubeMass = 0.016;

// Nominal √E of a cube's first impact from 0.30 m, the SNR reference at 1 m.
double reference_amplitude() { return std::sqrt(kCubeMass * 9.81 * 0.30); }

// Piecewise horizontal motion: ballistic flights at constant velocity, then one
// decelerating slide.
struct Segment {
  double t0 = 0, t1 = 0;
  Vec2 p0 = Vec2::Zero();
  Vec2 v = Vec2::Zero();  // velocity, or unit direction for the slide
  double speed = 0;       // slide only
  double decel = 0;       // slide only
  bool slide = false;

  Vec2 at(double t) const {
    const double tau = std::clamp(t, t0, t1) - t0;
    if (!slide) return p0 + v * tau;
    return p0 + v * (speed * tau - 0.5 * decel * tau * tau);
  }
};

struct Motion {
  std::vector<Segment> segments;
  std::vector<ImpactEvent> impacts;
  Vec2 end = Vec2::Zero();
  double stop_time = 0;

  Vec2 at(double t) const {
    for (const auto& s : segments) {
      if (t <= s.t1) return s.at(t);
    }
    return end;
  }
};

Motion integrate(const SimConfig& cfg, std::mt19937_64& rng) {
  const auto props = object_properties(cfg.object);
  std::normal_distribution<double> release_speed(0.0, 1.0);
  std::uniform_real_distribution<double> restitution(cfg.restitution_range[0], cfg.restitution_range[1]);
  std::uniform_real_distribution<double> spread(-props.direction_spread, props.direction_spread);

  Motion m;
  Vec2 p = cfg.release_point;
  Vec2 v(cfg.release_speed_sigma * release_speed(rng), cfg.release_speed_sigma * release_speed(rng));
  double t = 0;
  double vz = std::sqrt(2.0 * cfg.gravity * cfg.release_height);
  double flight = vz / cfg.gravity;

  for (;;) {
    m.segments.push_back({t, t + flight, p, v});
    t += flight;
    p += v * flight;
    const double energy = 0.5 * props.mass * vz * vz;
    m.impacts.push_back({t, p, energy});

    const double heading = v.norm() > 1e-12 ? std::atan2(v.y(), v.x()) : 0.0;
    const double angle = heading + spread(rng);
    v = cfg.horizontal_retention * v + cfg.kick_scale * energy * Vec2(std::cos(angle), std::sin(angle));

    vz *= restitution(rng);
    if (0.5 * props.mass * vz * vz < cfg.min_bounce_energy) break;
    flight = 2.0 * vz / cfg.gravity;
  }

  const double speed = v.norm();
  if (speed > 0 && cfg.friction_decel > 0) {
    const double t_stop = speed / cfg.friction_decel;
    Segment slide{t, t + t_stop, p, v / speed, speed, cfg.friction_decel, true};
    m.end = slide.at(slide.t1);
    m.stop_time = slide.t1;
    m.segments.push_back(slide);
  } else {
    m.end = p;
    m.stop_time = t;
  }
  // Clamp the last segment so positions after rest are exactly the end point.
  m.segments.back().t1 = m.stop_time;
  return m;
}

bool motion_on_table(const SimConfig& cfg, const Motion& m) {
  // Horizontal motion is piecewise straight, so segment endpoints bound it.
  for (const auto& s : m.segments) {
    if (!cfg.table_bounds.contains(s.p0) || !cfg.table_bounds.contains(s.at(s.t1))) return false;
  }
  return cfg.table_bounds.contains(m.end);
}

}  // namespace

const char* to_string(ObjectKind kind) { return kind == ObjectKind::cube ? "cube" : "triangle"; }

ObjectKind parse_object_kind(const std::string& name) {
  if (name == "cube") return ObjectKind::cube;
  if (name == "triangle") return ObjectKind::triangle;
  throw std::invalid_argument("unknown object kind '" + name + "' (expected cube or triangle)");
}

const char* to_string(Preset preset) { return preset == Preset::desk ? "desk" : "paper"; }

Preset parse_preset(const std::string& name) {
  if (name == "desk") return Preset::desk;
  if (name == "paper") return Preset::paper;
  throw std::invalid_argument("unknown preset '" + name + "' (expected desk or paper)");
}

ObjectProperties object_properties(ObjectKind kind) {
  if (kind == ObjectKind::triangle) return {kCubeMass / 2, std::numbers::pi / 2, 0.5, 2400.0};
  return {kCubeMass, std::numbers::pi / 4, 1.0, 1800.0};
}

void FovSpec::validate() const {
  if (!(width > 0) || !(height > 0) || !std::isfinite(width) || !std::isfinite(height)) {
    throw std::invalid_argument("fov: width and height must be positive and finite");
  }
}

void SimConfig::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("sim config: " + what); };
  if (!(release_height > 0)) fail("release_height must be positive");
  const auto [lo, hi] = restitution_range;
  if (!(lo > 0 && lo <= hi && hi < 1)) fail("restitution_range must satisfy 0 < lo <= hi < 1");
  if (!(horizontal_retention >= 0 && horizontal_retention <= 1)) fail("horizontal_retention must lie in [0, 1]");
  if (!(kick_scale >= 0)) fail("kick_scale must be non-negative");
  if (!(friction_decel > 0)) fail("friction_decel must be positive");
  if (!(gravity > 0)) fail("gravity must be positive");
  if (!(release_speed_sigma >= 0)) fail("release_speed_sigma must be non-negative");
  if (!(min_bounce_energy > 0)) fail("min_bounce_energy must be positive");
  if (!(table_bounds.x_min < table_bounds.x_max && table_bounds.y_min < table_bounds.y_max)) {
    fail("table_bounds must be a non-empty rectangle");
  }
  if (!table_bounds.contains(release_point)) fail("release_point must lie over the table");
  fov.validate();
  if (!(fps > 0) || !(duration > 0)) fail("fps and duration must be positive");
  if (frame_count() < 6) fail("duration * fps must give at least 6 frames");
  if (!(sample_rate > 0)) fail("sample_rate must be positive");
  if (snr_db && !std::isfinite(*snr_db)) fail("snr_db must be finite");
  if (max_attempts < 1) fail("max_attempts must be at least 1");
}

Index SimConfig::frame_count() const { return static_cast<Index>(std::llround(duration * fps)); }
Index SimConfig::sample_count() const { return static_cast<Index>(std::llround(duration * sample_rate)); }

SimConfig SimConfig::for_preset(Preset preset) {
  SimConfig cfg;
  cfg.sample_rate = preset == Preset::desk ? 8000 : 48000;
  return cfg;
}

void MicArrayGeometry::validate() const {
  if (positions.size() != static_cast<std::size_t>(kChannels)) {
    throw std::invalid_argument("mic array: expected 7 positions, got " + std::to_string(positions.size()));
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      if ((positions[i] - positions[j]).norm() < 1e-9) {
        throw std::invalid_argument("mic array: positions " + std::to_string(i) + " and " + std::to_string(j) +
                                    " coincide");
      }
    }
  }
  if (!(speed_of_sound > 0) || !(sample_rate > 0)) {
    throw std::invalid_argument("mic array: speed_of_sound and sample_rate must be positive");
  }
}

MicArrayGeometry MicArrayGeometry::default_array(double sample_rate) {
  MicArrayGeometry g;
  g.sample_rate = sample_rate;
  const Vec3 center(0.0, 1.0, 0.2);
  g.positions.push_back(center);
  for (int k = 0; k < 6; ++k) {
    const double a = k * std::numbers::pi / 3;
    g.positions.push_back(center + 0.04 * Vec3(std::cos(a), std::sin(a), 0.0));
  }
  return g;
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) {
  std::uint64_t z = parent + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double noise_std_for_snr(double snr_db) { return reference_amplitude() * std::pow(10.0, -snr_db / 20.0); }

Waveform synth_impact_audio(const std::vector<ImpactEvent>& impacts, const MicArrayGeometry& geom,
                            std::uint64_t acoustics_seed, const AudioOptions& options) {
  geom.validate();
  if (options.snr_db && !std::isfinite(*options.snr_db)) throw std::invalid_argument("audio: snr_db must be finite");
  if (!(options.duration > 0)) throw std::invalid_argument("audio: duration must be positive");
  if (!(options.decay > 0)) throw std::invalid_argument("audio: decay must be positive");
  for (const auto& e : impacts) {
    if (e.time < 0 || e.time >= options.duration) {
      throw std::invalid_argument("audio: impact at t=" + std::to_string(e.time) + " s lies outside the recording");
    }
  }

  const double fs = geom.sample_rate;
  const Index C = static_cast<Index>(geom.positions.size());
  const Index N = static_cast<Index>(std::llround(options.duration * fs));
  const Index tail = static_cast<Index>(std::ceil(12 * options.decay * fs));
  std::mt19937_64 rng(acoustics_seed);
  std::uniform_real_distribution<double> jitter(1 - options.frequency_jitter, 1 + options.frequency_jitter);

  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(C, N);
  for (const auto& e : impacts) {
    const double f0 = options.center_frequency * jitter(rng);
    const double w = 2 * std::numbers::pi * f0;
    const Vec3 src(e.position.x(), e.position.y(), 0.0);
    for (Index c = 0; c < C; ++c) {
      const double d = (geom.positions[c] - src).norm();
      const double arrival = e.time + d / geom.speed_of_sound;
      const double gain = options.amplitude * std::sqrt(e.energy) / std::max(d, 0.1);
      const Index first = static_cast<Index>(std::ceil(arrival * fs));
      for (Index n = std::max<Index>(first, 0); n < std::min(N, first + tail); ++n) {
        const double tau = n / fs - arrival;
        acc(c, n) += gain * std::exp(-tau / options.decay) * std::sin(w * tau);
      }
    }
  }
  if (options.snr_db) {
    std::normal_distribution<double> noise(0.0, noise_std_for_snr(*options.snr_db));
    for (Index c = 0; c < C; ++c) {
      for (Index n = 0; n < N; ++n) acc(c, n) += noise(rng);
    }
  }
  return acc.cwiseMax(-1.0).cwiseMin(1.0).cast<float>();
}

RawTrial simulate_trial(const SimConfig& cfg, std::uint64_t trial_seed) {
  cfg.validate();
  const Index frames = cfg.frame_count();
  const double rest_deadline = static_cast<double>(frames - 5) / cfg.fps;

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const std::uint64_t sub = derive_seed(trial_seed, static_cast<std::uint64_t>(attempt));
    std::mt19937_64 rng(derive_seed(sub, 0));
    Motion m = integrate(cfg, rng);
    if (!motion_on_table(cfg, m) || m.stop_time > rest_deadline) continue;

    RawTrial trial;
    trial.path.resize(frames, 2);
    trial.timestamps.resize(static_cast<std::size_t>(frames));
    for (Index i = 0; i < frames; ++i) {
      const double t = static_cast<double>(i) / cfg.fps;
      trial.timestamps[static_cast<std::size_t>(i)] = t;
      trial.path.row(i) = m.at(t).transpose();
    }
    trial.exit_index = frames;
    for (Index i = 0; i < frames; ++i) {
      if (!cfg.fov.contains(cfg.release_point, trial.path.row(i).transpose())) {
        trial.exit_index = i;
        trial.exit_time = static_cast<double>(i) / cfg.fps;
        break;
      }
    }
    if (cfg.require_exit) {
      // The 70-step post window must reach the rest point.
      if (!trial.exit_time) continue;
      const Index last_post = std::min(trial.exit_index + kPostSteps - 1, frames - 1);
      if (trial.path.row(last_post).transpose() != m.end) continue;
    }

    const auto props = object_properties(cfg.object);
    AudioOptions audio;
    audio.duration = cfg.duration;
    audio.amplitude = props.amplitude;
    audio.center_frequency = props.center_frequency;
    audio.snr_db = cfg.snr_db;
    trial.waveform = synth_impact_audio(m.impacts, MicArrayGeometry::default_array(cfg.sample_rate),
                                        derive_seed(sub, 1), audio);
    trial.impacts = std::move(m.impacts);
    trial.end_location = m.end;
    trial.stop_time = m.stop_time;
    trial.seed = sub;
    return trial;
  }
  throw SimulationError("simulate_trial: no accepted trial after " + std::to_string(cfg.max_attempts) +
                        " attempts (seed " + std::to_string(trial_seed) + ")");
}

std::vector<RawTrial> generate_dataset(const SimConfig& cfg, Index n, std::uint64_t master_seed) {
  if (n <= 0) throw std::invalid_argument("generate_dataset: n must be positive");
  cfg.validate();
  std::vector<RawTrial> out(static_cast<std::size_t>(n));
  const Index workers = std::clamp<Index>(std::thread::hardware_concurrency(), 1, n);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&](Index w) {
    try {
      for (Index i = w; i < n; i += workers) {
        out[static_cast<std::size_t>(i)] = simulate_trial(cfg, derive_seed(master_seed, static_cast<std::uint64_t>(i)));
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (Index w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace opnet
