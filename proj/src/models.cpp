#include "opnet/models.hpp"

#include <cmath>
#include <stdexcept>

namespace opnet {

namespace {

struct KindName {
  ModelKind kind;
  const char* name;
  const char* short_name;
};

constexpr KindName kKindNames[] = {
    {ModelKind::multimodal, "multimodal", "multimodal"},
    {ModelKind::b1_linear, "b1_linear", "b1"},
    {ModelKind::b2_delay_cnn, "b2_delay_cnn", "b2"},
    {ModelKind::b3_socialgan_lite, "b3_socialgan_lite", "b3"},
    {ModelKind::b4_seldnet_lite, "b4_seldnet_lite", "b4"},
    {ModelKind::b5_combo, "b5_combo", "b5"},
};

std::string shape_str(std::initializer_list<Index> dims) { return to_string(Shape(dims)); }

}  // namespace

const char* to_string(ModelKind kind) {
  for (const auto& k : kKindNames) {
    if (k.kind == kind) return k.name;
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  for (const auto& k : kKindNames) {
    if (name == k.name || name == k.short_name) return k.kind;
  }
  throw std::invalid_argument("unknown model '" + name + "' (expected multimodal, b1, b2, b3, b4 or b5)");
}

bool is_trainable(ModelKind kind) { return kind != ModelKind::b1_linear; }
bool uses_audio_features(ModelKind kind) {
  return kind == ModelKind::multimodal || kind == ModelKind::b4_seldnet_lite || kind == ModelKind::b5_combo;
}
bool uses_waveform(ModelKind kind) { return kind == ModelKind::b2_delay_cnn || kind == ModelKind::b1_linear; }
bool uses_observed(ModelKind kind) {
  return kind == ModelKind::multimodal || kind == ModelKind::b1_linear || kind == ModelKind::b3_socialgan_lite ||
         kind == ModelKind::b5_combo;
}

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (frames < 1 || freq_bins < 1 || channels < 1) fail("frames, freq_bins and channels must be positive");
  if (samples < 0) fail("samples must be non-negative");
  Index f = freq_bins;
  for (int i = 0; i < 4; ++i) {
    if (conv_filters[i] < 1) fail("conv_filters must be positive");
    if (freq_pool[i] < 1) fail("freq_pool must be positive");
    f /= freq_pool[i];
    if (f < 1) fail("freq_pool reduces the " + std::to_string(freq_bins) + " frequency bins below 1 at layer " +
                    std::to_string(i + 1));
  }
  if (f != 1) fail("freq_pool leaves " + std::to_string(f) + " frequency bins, expected exactly 1");
  for (Index w : {gru_hidden, vision_hidden[0], vision_hidden[1], fusion_width, head_hidden[0], head_hidden[1],
                  b2_filters, b2_hidden, b3_embed, b3_encoder, b3_decoder}) {
    if (w < 1) fail("layer widths must be positive");
  }
}

Index ModelConfig::b2_flat_features() const {
  Index h = samples;
  for (auto [k, p] : {std::pair<Index, Index>{16, 8}, {8, 8}, {4, 4}}) {
    h = (h - k + 1) / p;
    if (h < 1) {
      throw std::invalid_argument("model config: waveform of " + std::to_string(samples) +
                                  " samples is too short for the delay CNN");
    }
  }
  return h * channels * b2_filters;
}

std::array<Index, 4> ModelConfig::pools_for(Index freq_bins) {
  if (freq_bins < 1) throw std::invalid_argument("pools_for: freq_bins must be positive");
  std::array<Index, 4> pools{};
  Index rem = freq_bins;
  for (int i = 0; i < 3; ++i) {
    pools[i] = std::max<Index>(1, static_cast<Index>(std::ceil(std::pow(static_cast<double>(rem), 1.0 / (4 - i)) - 1e-9)));
    rem /= pools[i];
  }
  pools[3] = rem;
  return pools;
}

ModelConfig ModelConfig::for_preset(Preset preset, Index frames, Index freq_bins, Index samples) {
  ModelConfig c;
  c.frames = frames;
  c.freq_bins = freq_bins;
  c.samples = samples;
  c.freq_pool = pools_for(freq_bins);
  if (preset == Preset::desk) {
    if (freq_bins == 128) c.freq_pool = {4, 4, 4, 2};
    c.conv_filters = {8, 8, 8, 16};
    c.gru_hidden = 32;
    c.vision_hidden = {128, 256};
    c.fusion_width = 128;
    c.b2_filters = 8;
    c.b2_hidden = 128;
  } else if (freq_bins == 1024) {
    c.freq_pool = {8, 8, 4, 4};
  }
  c.validate();
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"frames", c.frames},
                     {"freq_bins", c.freq_bins},
                     {"channels", c.channels},
                     {"samples", c.samples},
                     {"conv_filters", c.conv_filters},
                     {"freq_pool", c.freq_pool},
                     {"gru_hidden", c.gru_hidden},
                     {"vision_hidden", c.vision_hidden},
                     {"fusion_width", c.fusion_width},
                     {"head_hidden", c.head_hidden},
                     {"b2_filters", c.b2_filters},
                     {"b2_hidden", c.b2_hidden},
                     {"b3_embed", c.b3_embed},
                     {"b3_encoder", c.b3_encoder},
                     {"b3_decoder", c.b3_decoder},
                     {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("frames").get_to(c.frames);
  j.at("freq_bins").get_to(c.freq_bins);
  j.at("channels").get_to(c.channels);
  j.at("samples").get_to(c.samples);
  j.at("conv_filters").get_to(c.conv_filters);
  j.at("freq_pool").get_to(c.freq_pool);
  j.at("gru_hidden").get_to(c.gru_hidden);
  j.at("vision_hidden").get_to(c.vision_hidden);
  j.at("fusion_width").get_to(c.fusion_width);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("b2_filters").get_to(c.b2_filters);
  j.at("b2_hidden").get_to(c.b2_hidden);
  j.at("b3_embed").get_to(c.b3_embed);
  j.at("b3_encoder").get_to(c.b3_encoder);
  j.at("b3_decoder").get_to(c.b3_decoder);
  j.at("init_seed").get_to(c.init_seed);
}

// ---- network base ------------------------------------------------------------

template <typename Scalar>
Network<Scalar>::Network(ModelKind kind, ModelConfig config)
    : rng_(config.init_seed), kind_(kind), config_(std::move(config)) {
  config_.validate();
}

template <typename Scalar>
void Network<Scalar>::set_training(bool on) {
  training_ = on;
  for (auto& l : layers_) l.set_training(on);
}

template <typename Scalar>
Layer<Scalar>& Network<Scalar>::add(const std::string& name, LayerSpec spec) {
  auto& layer = layers_.emplace_back(std::move(spec), rng_);
  params_.extend(name + ".", layer.params());
  return layer;
}

template <typename Scalar>
const Tensor<Scalar>& Network<Scalar>::require(const std::optional<Tensor<Scalar>>& t, const char* what) const {
  if (!t) throw std::invalid_argument(std::string(to_string(kind_)) + ": missing " + what + " input");
  return *t;
}

template <typename Scalar>
void Network<Scalar>::add_audio_encoder() {
  const auto& c = config_;
  Index in = 1;
  for (int i = 0; i < 4; ++i) {
    const std::string n = "audio.conv" + std::to_string(i + 1);
    const Index depth = i == 0 ? 2 * c.channels : 1;
    audio_conv_.push_back(&add(n, Conv3dSpec{in, c.conv_filters[i], {3, 3, depth}, {1, 1, 0}}));
    audio_pool_.push_back(&add(n + "_pool", MaxPool3dSpec{{1, c.freq_pool[i], 1}}));
    in = c.conv_filters[i];
  }
  audio_gru1_ = &add("audio.gru1", GruBidirectionalSpec{in, c.gru_hidden});
  audio_gru2_ = &add("audio.gru2", GruBidirectionalSpec{2 * c.gru_hidden, c.gru_hidden});
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::encode_audio(const Tensor<Scalar>& audio) {
  const auto& c = config_;
  const Index D = 2 * c.channels;
  if (audio.rank() != 5 || audio.dim(1) != 1 || audio.dim(2) != c.frames || audio.dim(3) != c.freq_bins ||
      audio.dim(4) != D) {
    throw ShapeError(std::string(to_string(kind_)) + ": audio features must be (B, 1, " + std::to_string(c.frames) +
                     ", " + std::to_string(c.freq_bins) + ", " + std::to_string(D) + "), got " +
                     to_string(audio.shape()));
  }
  Tensor<Scalar> x = audio;
  for (int i = 0; i < 4; ++i) x = audio_pool_[i]->forward(relu(audio_conv_[i]->forward(x)));
  const Index B = x.dim(0), C = x.dim(1), T = x.dim(2);
  x = permute(reshape(x, {B, C, T}), {0, 2, 1});
  x = adaptive_avgpool(x, 1, kCompleteSteps);
  return audio_gru2_->forward(audio_gru1_->forward(x));
}

template <typename Scalar>
void Network<Scalar>::add_track_encoder() {
  track_embed_ = &add("track.embed", LinearSpec{2, config_.b3_embed});
  track_lstm_ = &add("track.lstm", LstmSpec{config_.b3_embed, config_.b3_encoder});
}

template <typename Scalar>
LstmResult<Scalar> Network<Scalar>::encode_track(const Tensor<Scalar>& observed) {
  if (observed.rank() != 3 || observed.dim(1) != kObservedSteps || observed.dim(2) != 2) {
    throw ShapeError(std::string(to_string(kind_)) + ": observed trajectory must be (B, 65, 2), got " +
                     to_string(observed.shape()));
  }
  return track_lstm_->forward_lstm(track_embed_->forward(observed));
}

template <typename Scalar>
void Network<Scalar>::add_step_head(Index in) {
  head_[0] = &add("head.fc1", LinearSpec{in, config_.head_hidden[0]});
  head_[1] = &add("head.fc2", LinearSpec{config_.head_hidden[0], config_.head_hidden[1]});
  head_[2] = &add("head.fc3", LinearSpec{config_.head_hidden[1], 2});
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::step_head(const Tensor<Scalar>& x) {
  return head_[2]->forward(relu(head_[1]->forward(relu(head_[0]->forward(x)))));
}

namespace {

void check_observed(const Shape& s, const char* model) {
  if (s.size() != 3 || s[1] != kObservedSteps || s[2] != 2) {
    throw ShapeError(std::string(model) + ": observed trajectory must be (B, 65, 2), got " + to_string(s));
  }
}

// ---- multimodal ----------------------------------------------------------------

template <typename Scalar>
class Multimodal final : public Network<Scalar> {
 public:
  explicit Multimodal(const ModelConfig& cfg) : Network<Scalar>(ModelKind::multimodal, cfg) {
    const auto& c = this->config();
    const Index W = c.step_width();
    this->add_audio_encoder();
    vision_[0] = &this->add("vision.fc1", LinearSpec{2 * kObservedSteps, c.vision_hidden[0]});
    vision_[1] = &this->add("vision.fc2", LinearSpec{c.vision_hidden[0], c.vision_hidden[1]});
    vision_[2] = &this->add("vision.fc3", LinearSpec{c.vision_hidden[1], kCompleteSteps * W});
    fusion_[0] = &this->add("fusion.fc1", LinearSpec{2 * W, c.fusion_width});
    fusion_[1] = &this->add("fusion.fc2", LinearSpec{c.fusion_width, c.fusion_width});
    this->add_step_head(c.fusion_width);
  }

  Tensor<Scalar> forward(const ModelInput<Scalar>& in) override {
    const auto& obs = this->require(in.observed, "observed");
    check_observed(obs.shape(), "multimodal");
    const Tensor<Scalar> audio = this->encode_audio(this->require(in.audio, "audio"));
    const Index B = obs.dim(0);
    if (audio.dim(0) != B) throw ShapeError("multimodal: audio and observed batch sizes differ");
    Tensor<Scalar> v = reshape(obs, {B, 2 * kObservedSteps});
    v = relu(vision_[1]->forward(relu(vision_[0]->forward(v))));
    v = reshape(vision_[2]->forward(v), {B, kCompleteSteps, this->config().step_width()});
    Tensor<Scalar> x = concat<Scalar>({audio, v}, -1);
    x = relu(fusion_[1]->forward(relu(fusion_[0]->forward(x))));
    return this->step_head(x);
  }

 private:
  std::array<Layer<Scalar>*, 3> vision_{};
  std::array<Layer<Scalar>*, 2> fusion_{};
};

// ---- B2: delay CNN on the raw waveform -----------------------------------------

template <typename Scalar>
class DelayCnn final : public Network<Scalar> {
 public:
  explicit DelayCnn(const ModelConfig& cfg) : Network<Scalar>(ModelKind::b2_delay_cnn, cfg) {
    const auto& c = this->config();
    const Index F = c.b2_filters;
    const std::array<std::array<Index, 2>, 3> kernels{{{16, 7}, {8, 7}, {4, 7}}};
    const std::array<Index, 3> pools{8, 8, 4};
    Index in = 1;
    for (int i = 0; i < 3; ++i) {
      const std::string n = "conv" + std::to_string(i + 1);
      conv_[i] = &this->add(n, Conv2dSpec{in, F, kernels[i], {0, 3}});
      bn_[i] = &this->add(n + "_bn", BatchNorm2dSpec{F});
      pool_[i] = &this->add(n + "_pool", MaxPool2dSpec{{pools[i], 1}});
      in = F;
    }
    fc_[0] = &this->add("fc1", LinearSpec{c.b2_flat_features(), c.b2_hidden});
    fc_[1] = &this->add("fc2", LinearSpec{c.b2_hidden, 2 * kCompleteSteps});
  }

  Tensor<Scalar> forward(const ModelInput<Scalar>& in) override {
    const auto& c = this->config();
    const auto& w = this->require(in.waveform, "waveform");
    if (w.rank() != 4 || w.dim(1) != 1 || w.dim(2) != c.samples || w.dim(3) != c.channels) {
      throw ShapeError("b2_delay_cnn: waveform must be (B, 1, " + std::to_string(c.samples) + ", " +
                       std::to_string(c.channels) + "), got " + to_string(w.shape()));
    }
    Tensor<Scalar> x = w;
    for (int i = 0; i < 3; ++i) x = pool_[i]->forward(relu(bn_[i]->forward(conv_[i]->forward(x))));
    const Index B = x.dim(0);
    x = relu(fc_[0]->forward(reshape(x, {B, x.size() / B})));
    return reshape(fc_[1]->forward(x), {B, kCompleteSteps, 2});
  }

 private:
  std::array<Layer<Scalar>*, 3> conv_{}, bn_{}, pool_{};
  std::array<Layer<Scalar>*, 2> fc_{};
};

// ---- B3: LSTM encoder-decoder on the observed track ----------------------------

template <typename Scalar>
class TrackSeq2Seq final : public Network<Scalar> {
 public:
  explicit TrackSeq2Seq(const ModelConfig& cfg) : Network<Scalar>(ModelKind::b3_socialgan_lite, cfg) {
    const auto& c = this->config();
    this->add_track_encoder();
    bridge_h_ = &this->add("bridge.h", LinearSpec{c.b3_encoder, c.b3_decoder});
    bridge_c_ = &this->add("bridge.c", LinearSpec{c.b3_encoder, c.b3_decoder});
    decoder_ = &this->add("decoder.lstm", LstmSpec{c.b3_embed, c.b3_decoder});
    head_ = &this->add("decoder.head", LinearSpec{c.b3_decoder, 2});
  }

  Tensor<Scalar> forward(const ModelInput<Scalar>& in) override {
    const auto& obs = this->require(in.observed, "observed");
    check_observed(obs.shape(), "b3_socialgan_lite");
    const Index B = obs.dim(0);
    auto enc = this->encode_track(obs);
    Tensor<Scalar> h = bridge_h_->forward(enc.h), c = bridge_c_->forward(enc.c);
    Tensor<Scalar> pos = select(obs, 1, kObservedSteps - 1);
    std::vector<Tensor<Scalar>> steps;
    steps.reserve(kPostSteps);
    for (Index k = 0; k < kPostSteps; ++k) {
      const Tensor<Scalar> e = reshape(this->track_embed_->forward(pos), {B, 1, this->config().b3_embed});
      auto r = decoder_->forward_lstm(e, h, c);
      h = r.h;
      c = r.c;
      pos = add(pos, head_->forward(h));
      steps.push_back(pos);
    }
    return concat<Scalar>({obs, stack(steps, 1)}, 1);
  }

 private:
  Layer<Scalar>*bridge_h_ = nullptr, *bridge_c_ = nullptr, *decoder_ = nullptr, *head_ = nullptr;
};

// ---- B4: audio-only mirror of the multimodal audio path -------------------------

template <typename Scalar>
class AudioOnly final : public Network<Scalar> {
 public:
  explicit AudioOnly(const ModelConfig& cfg) : Network<Scalar>(ModelKind::b4_seldnet_lite, cfg) {
    this->add_audio_encoder();
    this->add_step_head(this->config().step_width());
  }

  Tensor<Scalar> forward(const ModelInput<Scalar>& in) override {
    return this->step_head(this->encode_audio(this->require(in.audio, "audio")));
  }
};

// ---- B5: track encoder + audio encoder through one linear layer ------------------

template <typename Scalar>
class Combo final : public Network<Scalar> {
 public:
  explicit Combo(const ModelConfig& cfg) : Network<Scalar>(ModelKind::b5_combo, cfg) {
    const auto& c = this->config();
    this->add_audio_encoder();
    this->add_track_encoder();
    fc_ = &this->add("fusion.fc", LinearSpec{c.b3_encoder + kCompleteSteps * c.step_width(), 2 * kCompleteSteps});
  }

  Tensor<Scalar> forward(const ModelInput<Scalar>& in) override {
    const auto& obs = this->require(in.observed, "observed");
    check_observed(obs.shape(), "b5_combo");
    const Tensor<Scalar> audio = this->encode_audio(this->require(in.audio, "audio"));
    const Index B = obs.dim(0);
    if (audio.dim(0) != B) throw ShapeError("b5_combo: audio and observed batch sizes differ");
    const Tensor<Scalar> track = this->encode_track(obs).h;
    const Tensor<Scalar> x = concat<Scalar>({track, reshape(audio, {B, audio.size() / B})}, -1);
    return reshape(fc_->forward(x), {B, kCompleteSteps, 2});
  }

 private:
  Layer<Scalar>* fc_ = nullptr;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<Network<Scalar>> make_network(ModelKind kind, const ModelConfig& config) {
  switch (kind) {
    case ModelKind::multimodal: return std::make_unique<Multimodal<Scalar>>(config);
    case ModelKind::b2_delay_cnn: return std::make_unique<DelayCnn<Scalar>>(config);
    case ModelKind::b3_socialgan_lite: return std::make_unique<TrackSeq2Seq<Scalar>>(config);
    case ModelKind::b4_seldnet_lite: return std::make_unique<AudioOnly<Scalar>>(config);
    case ModelKind::b5_combo: return std::make_unique<Combo<Scalar>>(config);
    case ModelKind::b1_linear: break;
  }
  throw std::invalid_argument(std::string(to_string(kind)) + " has no trainable parameters");
}

// ---- B1 ------------------------------------------------------------------------

Vec2 b1_end_location(const Vec2& last, const Vec2& velocity, double t) {
  if (!(t > 0)) return last;
  const Vec2 a = -velocity / t;
  return last + velocity * t + 0.5 * a * t * t;
}

Trajectory b1_predict(const Trajectory& observed, double bounce_time, double fps) {
  if (observed.rows() != kObservedSteps) {
    throw std::invalid_argument("b1: observed trajectory must have 65 rows, got " + std::to_string(observed.rows()));
  }
  if (!(fps > 0)) throw std::invalid_argument("b1: fps must be positive");
  const Vec2 last = observed.row(kObservedSteps - 1).transpose();
  const Vec2 velocity = (last - observed.row(kObservedSteps - 2).transpose()) * fps;
  const Vec2 end = b1_end_location(last, velocity, bounce_time);
  Trajectory out(kCompleteSteps, 2);
  out.topRows(kObservedSteps) = observed;
  for (Index k = 1; k <= kPostSteps; ++k) {
    out.row(kObservedSteps + k - 1) = (last + (end - last) * (static_cast<double>(k) / kPostSteps)).transpose();
  }
  out.row(kCompleteSteps - 1) = end.transpose();
  return out;
}

template class Network<float>;
template class Network<double>;
template std::unique_ptr<Network<float>> make_network<float>(ModelKind, const ModelConfig&);
template std::unique_ptr<Network<double>> make_network<double>(ModelKind, const ModelConfig&);

}  // namespace opnet
