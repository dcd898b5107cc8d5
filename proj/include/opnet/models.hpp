#pragma once

#include "opnet/layers.hpp"
#include "opnet/sim.hpp"
#include "opnet/types.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>

namespace opnet {

enum class ModelKind { multimodal, b1_linear, b2_delay_cnn, b3_socialgan_lite, b4_seldnet_lite, b5_combo };

inline constexpr std::array<ModelKind, 6> kAllModels{ModelKind::multimodal,       ModelKind::b1_linear,
                                                     ModelKind::b2_delay_cnn,     ModelKind::b3_socialgan_lite,
                                                     ModelKind::b4_seldnet_lite,  ModelKind::b5_combo};

const char* to_string(ModelKind kind);
/// Accepts the full names and the short forms multimodal, b1 .. b5.
ModelKind parse_model_kind(const std::string& name);

bool is_trainable(ModelKind kind);
bool uses_audio_features(ModelKind kind);
bool uses_waveform(ModelKind kind);
bool uses_observed(ModelKind kind);

/// Input geometry plus every width of the six architectures.
struct ModelConfig {
  Index frames = 0;      // STFT frames T
  Index freq_bins = 0;   // F = M/2
  Index channels = kChannels;
  Index samples = 0;     // waveform length N (B2)

  std::array<Index, 4> conv_filters{64, 64, 64, 64};
  std::array<Index, 4> freq_pool{8, 8, 4, 4};  // product must reduce F to exactly 1
  Index gru_hidden = 64;
  std::array<Index, 2> vision_hidden{256, 1024};
  Index fusion_width = 256;
  std::array<Index, 2> head_hidden{64, 16};

  Index b2_filters = 16;
  Index b2_hidden = 256;

  Index b3_embed = 64;
  Index b3_encoder = 64;
  Index b3_decoder = 128;

  std::uint64_t init_seed = 0;

  void validate() const;
  Index step_width() const { return 2 * gru_hidden; }  // per-step width of both encoders
  Index b2_flat_features() const;

  /// Frequency pools that take F down to 1 over four layers.
  static std::array<Index, 4> pools_for(Index freq_bins);
  static ModelConfig for_preset(Preset preset, Index frames, Index freq_bins, Index samples);
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Batched inputs. Unused fields may be left empty.
template <typename Scalar>
struct ModelInput {
  std::optional<Tensor<Scalar>> audio;     // (B, 1, T, F, 2C)
  std::optional<Tensor<Scalar>> waveform;  // (B, 1, N, C)
  std::optional<Tensor<Scalar>> observed;  // (B, 65, 2), normalised
};

struct PredictionResult {
  std::string trial_id;
  ModelKind model = ModelKind::multimodal;
  Trajectory trajectory;  // 135 x 2, normalised
  Vec2 end_location = Vec2::Zero();
};

/// A trainable predictor. Layers own their parameters; the network keeps a flat,
/// prefixed view of all of them for the optimiser and checkpoints.
template <typename Scalar>
class Network {
 public:
  virtual ~Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }
  ParamSet<Scalar>& params() { return params_; }
  const ParamSet<Scalar>& params() const { return params_; }

  void set_training(bool on);
  bool training() const { return training_; }

  /// Returns (B, 135, 2).
  virtual Tensor<Scalar> forward(const ModelInput<Scalar>& in) = 0;

 protected:
  Network(ModelKind kind, ModelConfig config);

  Layer<Scalar>& add(const std::string& name, LayerSpec spec);
  const Tensor<Scalar>& require(const std::optional<Tensor<Scalar>>& t, const char* what) const;

  // Shared sub-networks.
  void add_audio_encoder();
  Tensor<Scalar> encode_audio(const Tensor<Scalar>& audio);  // (B, 135, 2H)
  void add_track_encoder();
  LstmResult<Scalar> encode_track(const Tensor<Scalar>& observed);
  Tensor<Scalar> step_head(const Tensor<Scalar>& x);  // (B, 135, W) -> (B, 135, 2)
  void add_step_head(Index in);

  std::mt19937_64 rng_;
  std::vector<Layer<Scalar>*> audio_conv_, audio_pool_;
  Layer<Scalar>*audio_gru1_ = nullptr, *audio_gru2_ = nullptr;
  Layer<Scalar>*track_embed_ = nullptr, *track_lstm_ = nullptr;
  std::array<Layer<Scalar>*, 3> head_{};

 private:
  ModelKind kind_;
  ModelConfig config_;
  bool training_ = true;
  std::deque<Layer<Scalar>> layers_;
  ParamSet<Scalar> params_;
};

template <typename Scalar>
std::unique_ptr<Network<Scalar>> make_network(ModelKind kind, const ModelConfig& config);

// ---- B1: closed-form constant-deceleration baseline ---------------------------

/// End point of uniform deceleration to rest over t: P_f + v t + a t^2 / 2 with a = -v / t.
Vec2 b1_end_location(const Vec2& last, const Vec2& velocity, double t);

/// Raw-coordinate 135 x 2 prediction: the observed window followed by a straight-line
/// infill from its last point to the B1 end point.
Trajectory b1_predict(const Trajectory& observed, double bounce_time, double fps);

}  // namespace opnet
