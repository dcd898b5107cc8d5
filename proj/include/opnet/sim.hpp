#pragma once

#include "opnet/types.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace opnet {

enum class ObjectKind { cube, triangle };

const char* to_string(ObjectKind kind);
ObjectKind parse_object_kind(const std::string& name);

enum class Preset { desk, paper };

const char* to_string(Preset preset);
Preset parse_preset(const std::string& name);

/// Raised when a configuration cannot yield an accepted trial within the retry budget.
class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-object physical and acoustic constants.
struct ObjectProperties {
  double mass;              // kg
  double direction_spread;  // half-width of the uniform kick-direction perturbation, radians
  double amplitude;         // source amplitude multiplier
  double center_frequency;  // Hz
};

ObjectProperties object_properties(ObjectKind kind);

struct SimConfig {
  double release_height = 0.30;
  ObjectKind object = ObjectKind::cube;
  std::array<double, 2> restitution_range{0.20, 0.60};
  double horizontal_retention = 0.6;  // fraction of horizontal velocity kept at each impact
  double kick_scale = 14.0;           // m/s of kick per joule of impact energy
  double friction_decel = 1.2;        // m/s^2 while sliding
  double gravity = 9.81;
  double release_speed_sigma = 0.05;  // per-axis std of horizontal release velocity, m/s
  double min_bounce_energy = 5e-5;    // J; below this the object slides instead of bouncing
  Rect table_bounds;
  FovSpec fov;                        // wrist-camera footprint around the release point
  Vec2 release_point = Vec2::Zero();
  double fps = 30;
  double duration = 3.0;
  double sample_rate = 8000;
  std::optional<double> snr_db = 30.0;  // nullopt: noiseless audio
  bool require_exit = true;             // reject trials that never leave the wrist-camera view
  int max_attempts = 200;
  std::uint64_t seed = 0;

  void validate() const;
  Index frame_count() const;
  Index sample_count() const;

  static SimConfig for_preset(Preset preset);
};

/// Microphone positions in the table frame (meters).
struct MicArrayGeometry {
  std::vector<Vec3> positions;
  double speed_of_sound = 343.0;
  double sample_rate = 48000;

  void validate() const;
  /// Centre mic plus six on a 4 cm circle, 1 m from the table centre and 0.2 m up.
  static MicArrayGeometry default_array(double sample_rate);
};

struct AudioOptions {
  double duration = 3.0;
  double amplitude = 1.0;
  double center_frequency = 1800.0;
  double frequency_jitter = 0.1;  // f0 ~ center * U(1 - j, 1 + j)
  double decay = 0.010;           // seconds
  std::optional<double> snr_db;   // relative to the nominal cube first impact at 1 m
};

struct RawTrial {
  Trajectory path;  // frame_count x 2, sampled at fps
  std::vector<double> timestamps;
  std::vector<ImpactEvent> impacts;
  Waveform waveform;
  Vec2 end_location = Vec2::Zero();
  std::optional<double> exit_time;
  Index exit_index = 0;  // first frame outside the wrist-camera view (path length if never)
  double stop_time = 0;
  std::uint64_t seed = 0;  // sub-seed of the accepted attempt
};

/// Stream-splitting seed derivation (splitmix64 over parent and stream index).
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream);

/// Noise level of the white-noise floor for a given SNR.
double noise_std_for_snr(double snr_db);

RawTrial simulate_trial(const SimConfig& cfg, std::uint64_t trial_seed);

Waveform synth_impact_audio(const std::vector<ImpactEvent>& impacts, const MicArrayGeometry& geom,
                            std::uint64_t acoustics_seed, const AudioOptions& options);

/// Exactly n accepted trials; trial i depends only on (cfg, master_seed, i).
std::vector<RawTrial> generate_dataset(const SimConfig& cfg, Index n, std::uint64_t master_seed);

}  // namespace opnet
