#pragma once

#include "opnet/nn.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

namespace opnet {

// ---- layer hyperparameters ---------------------------------------------------

struct LinearSpec {
  Index in_features = 0, out_features = 0;
};
struct Conv3dSpec {
  Index in_channels = 0, out_channels = 0;
  std::array<Index, 3> kernel{}, padding{};
};
struct Conv2dSpec {
  Index in_channels = 0, out_channels = 0;
  std::array<Index, 2> kernel{}, padding{};
};
struct MaxPool3dSpec {
  std::array<Index, 3> kernel{1, 1, 1};
};
struct MaxPool2dSpec {
  std::array<Index, 2> kernel{1, 1};
};
struct BatchNorm2dSpec {
  Index channels = 0;
  double momentum = 0.1;
  double eps = 1e-5;
};
struct GruBidirectionalSpec {
  Index input_size = 0, hidden_size = 0;
};
struct LstmSpec {
  Index input_size = 0, hidden_size = 0;
};
struct ReluSpec {};
struct TanhSpec {};
/// Pools axis 1 of a (B, T, F) input to `target` steps.
struct AdaptiveAvgPoolTimeSpec {
  Index target = 1;
};

using LayerSpec = std::variant<LinearSpec, Conv3dSpec, Conv2dSpec, MaxPool3dSpec, MaxPool2dSpec, BatchNorm2dSpec,
                               GruBidirectionalSpec, LstmSpec, ReluSpec, TanhSpec, AdaptiveAvgPoolTimeSpec>;

inline const char* kind_name(const LayerSpec& spec) {
  static constexpr const char* names[] = {"linear",    "conv3d",          "conv2d", "maxpool3d",
                                          "maxpool2d", "batchnorm2d",     "gru_bidirectional",
                                          "lstm",      "relu",            "tanh",   "adaptive_avgpool_time"};
  return names[spec.index()];
}

/// Throws std::invalid_argument when a hyperparameter is out of range.
inline void validate(const LayerSpec& spec) {
  auto positive = [&](Index v, const char* what) {
    if (v < 1) {
      throw std::invalid_argument(std::string(kind_name(spec)) + ": " + what + " must be >= 1, got " +
                                  std::to_string(v));
    }
  };
  auto non_negative = [&](Index v, const char* what) {
    if (v < 0) throw std::invalid_argument(std::string(kind_name(spec)) + ": " + what + " must be >= 0");
  };
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, LinearSpec>) {
          positive(s.in_features, "in_features");
          positive(s.out_features, "out_features");
        } else if constexpr (std::is_same_v<S, Conv3dSpec> || std::is_same_v<S, Conv2dSpec>) {
          positive(s.in_channels, "in_channels");
          positive(s.out_channels, "out_channels");
          for (Index k : s.kernel) positive(k, "kernel size");
          for (Index p : s.padding) non_negative(p, "padding");
        } else if constexpr (std::is_same_v<S, MaxPool3dSpec> || std::is_same_v<S, MaxPool2dSpec>) {
          for (Index k : s.kernel) positive(k, "pool size");
        } else if constexpr (std::is_same_v<S, BatchNorm2dSpec>) {
          positive(s.channels, "channels");
          if (!(s.eps > 0)) throw std::invalid_argument("batchnorm2d: eps must be positive");
          if (!(s.momentum >= 0 && s.momentum <= 1)) throw std::invalid_argument("batchnorm2d: momentum not in [0,1]");
        } else if constexpr (std::is_same_v<S, GruBidirectionalSpec> || std::is_same_v<S, LstmSpec>) {
          positive(s.input_size, "input size");
          positive(s.hidden_size, "hidden size");
        } else if constexpr (std::is_same_v<S, AdaptiveAvgPoolTimeSpec>) {
          positive(s.target, "target length");
        }
      },
      spec);
}

// ---- parameters --------------------------------------------------------------

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
  bool trainable = true;
};

/// Ordered, named collection of parameter tensors. Non-trainable entries are buffers
/// (e.g. batchnorm running statistics) that are persisted but never optimised.
template <typename Scalar>
class ParamSet {
 public:
  Tensor<Scalar>& add(std::string name, Tensor<Scalar> t, bool trainable = true) {
    for (const auto& e : entries_) {
      if (e.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    }
    t.set_requires_grad(trainable);
    entries_.push_back({std::move(name), std::move(t), trainable});
    return entries_.back().tensor;
  }

  void extend(const std::string& prefix, const ParamSet& other) {
    for (const auto& e : other.entries_) add(prefix + e.name, e.tensor, e.trainable);
  }

  const std::vector<NamedTensor<Scalar>>& entries() const { return entries_; }
  std::vector<NamedTensor<Scalar>>& entries() { return entries_; }

  std::vector<Tensor<Scalar>> trainable() const {
    std::vector<Tensor<Scalar>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }

  const Tensor<Scalar>* find(std::string_view name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e.tensor;
    }
    return nullptr;
  }

  Index count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.trainable ? e.tensor.size() : 0;
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<NamedTensor<Scalar>> entries_;
};

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
template <typename Scalar>
Tensor<Scalar> uniform_init(Shape shape, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Buffer<Scalar> data(numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(std::move(shape), std::move(data), true);
}

// ---- recurrent sequences -----------------------------------------------------

template <typename Scalar>
struct RecurrentWeights {
  Tensor<Scalar> w_ih, w_hh, b_ih, b_hh;
};

template <typename Scalar>
struct LstmResult {
  Tensor<Scalar> outputs;  // (B, T, H)
  Tensor<Scalar> h, c;     // (B, H) final state
};

/// Unidirectional GRU over axis 1 of x (B, T, in); zero initial state. Returns (B, T, H).
template <typename Scalar>
Tensor<Scalar> gru_sequence(const Tensor<Scalar>& x, const RecurrentWeights<Scalar>& w, bool reverse) {
  const Index B = x.dim(0), T = x.dim(1), H = w.w_hh.dim(1);
  auto h = Tensor<Scalar>::zeros({B, H});
  std::vector<Tensor<Scalar>> outs(static_cast<std::size_t>(T));
  for (Index s = 0; s < T; ++s) {
    const Index t = reverse ? T - 1 - s : s;
    h = gru_cell(select(x, 1, t), h, w.w_ih, w.w_hh, w.b_ih, w.b_hh);
    outs[static_cast<std::size_t>(t)] = h;
  }
  return stack(outs, 1);
}

template <typename Scalar>
Tensor<Scalar> gru_bidirectional(const Tensor<Scalar>& x, const RecurrentWeights<Scalar>& fwd,
                                 const RecurrentWeights<Scalar>& bwd) {
  return concat<Scalar>({gru_sequence(x, fwd, false), gru_sequence(x, bwd, true)}, -1);
}

template <typename Scalar>
LstmResult<Scalar> lstm_sequence(const Tensor<Scalar>& x, const RecurrentWeights<Scalar>& w,
                                 std::optional<Tensor<Scalar>> h0 = std::nullopt,
                                 std::optional<Tensor<Scalar>> c0 = std::nullopt) {
  const Index B = x.dim(0), T = x.dim(1), H = w.w_hh.dim(1);
  auto h = h0 ? *h0 : Tensor<Scalar>::zeros({B, H});
  auto c = c0 ? *c0 : Tensor<Scalar>::zeros({B, H});
  std::vector<Tensor<Scalar>> outs;
  outs.reserve(static_cast<std::size_t>(T));
  for (Index t = 0; t < T; ++t) {
    auto hc = lstm_cell(select(x, 1, t), h, c, w.w_ih, w.w_hh, w.b_ih, w.b_hh);
    h = slice(hc, 1, 0, H);
    c = slice(hc, 1, H, H);
    outs.push_back(h);
  }
  return {stack(outs, 1), h, c};
}

// ---- layer -------------------------------------------------------------------

/// A LayerSpec together with its (possibly empty) parameters.
template <typename Scalar>
class Layer {
 public:
  Layer(LayerSpec spec, std::mt19937_64& rng) : spec_(std::move(spec)) {
    validate(spec_);
    std::visit([&](const auto& s) { init(s, rng); }, spec_);
  }

  const LayerSpec& spec() const { return spec_; }
  const char* kind() const { return kind_name(spec_); }
  ParamSet<Scalar>& params() { return params_; }
  const ParamSet<Scalar>& params() const { return params_; }
  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    try {
      return std::visit([&](const auto& s) { return apply(s, x); }, spec_);
    } catch (const ShapeError& e) {
      throw ShapeError(std::string(kind()) + " layer: " + e.what());
    }
  }

  /// LSTM with optional initial state; exposes the final (h, c).
  LstmResult<Scalar> forward_lstm(const Tensor<Scalar>& x, std::optional<Tensor<Scalar>> h0 = std::nullopt,
                                  std::optional<Tensor<Scalar>> c0 = std::nullopt) {
    const auto* s = std::get_if<LstmSpec>(&spec_);
    if (!s) throw std::logic_error(std::string("forward_lstm called on ") + kind() + " layer");
    check_sequence(x, s->input_size);
    return lstm_sequence(x, weights(""), std::move(h0), std::move(c0));
  }

 private:
  Tensor<Scalar>& param(std::string_view name) {
    for (auto& e : params_.entries()) {
      if (e.name == name) return e.tensor;
    }
    throw std::logic_error("missing parameter " + std::string(name));
  }

  RecurrentWeights<Scalar> weights(const std::string& suffix) {
    return {param("weight_ih" + suffix), param("weight_hh" + suffix), param("bias_ih" + suffix),
            param("bias_hh" + suffix)};
  }

  void add_recurrent(Index gates, Index in, Index hidden, const std::string& suffix, std::mt19937_64& rng) {
    params_.add("weight_ih" + suffix, uniform_init<Scalar>({gates * hidden, in}, hidden, rng));
    params_.add("weight_hh" + suffix, uniform_init<Scalar>({gates * hidden, hidden}, hidden, rng));
    params_.add("bias_ih" + suffix, uniform_init<Scalar>({gates * hidden}, hidden, rng));
    params_.add("bias_hh" + suffix, uniform_init<Scalar>({gates * hidden}, hidden, rng));
  }

  void init(const LinearSpec& s, std::mt19937_64& rng) {
    params_.add("weight", uniform_init<Scalar>({s.out_features, s.in_features}, s.in_features, rng));
    params_.add("bias", uniform_init<Scalar>({s.out_features}, s.in_features, rng));
  }
  void init(const Conv3dSpec& s, std::mt19937_64& rng) {
    const Index fan_in = s.in_channels * s.kernel[0] * s.kernel[1] * s.kernel[2];
    params_.add("weight", uniform_init<Scalar>({s.out_channels, s.in_channels, s.kernel[0], s.kernel[1], s.kernel[2]},
                                               fan_in, rng));
    params_.add("bias", uniform_init<Scalar>({s.out_channels}, fan_in, rng));
  }
  void init(const Conv2dSpec& s, std::mt19937_64& rng) {
    const Index fan_in = s.in_channels * s.kernel[0] * s.kernel[1];
    params_.add("weight",
                uniform_init<Scalar>({s.out_channels, s.in_channels, s.kernel[0], s.kernel[1]}, fan_in, rng));
    params_.add("bias", uniform_init<Scalar>({s.out_channels}, fan_in, rng));
  }
  void init(const BatchNorm2dSpec& s, std::mt19937_64&) {
    params_.add("weight", Tensor<Scalar>::constant({s.channels}, Scalar(1)));
    params_.add("bias", Tensor<Scalar>::zeros({s.channels}));
    params_.add("running_mean", Tensor<Scalar>::zeros({s.channels}), false);
    params_.add("running_var", Tensor<Scalar>::constant({s.channels}, Scalar(1)), false);
  }
  void init(const GruBidirectionalSpec& s, std::mt19937_64& rng) {
    add_recurrent(3, s.input_size, s.hidden_size, "", rng);
    add_recurrent(3, s.input_size, s.hidden_size, "_reverse", rng);
  }
  void init(const LstmSpec& s, std::mt19937_64& rng) { add_recurrent(4, s.input_size, s.hidden_size, "", rng); }
  template <typename S>
  void init(const S&, std::mt19937_64&) {}

  void check_sequence(const Tensor<Scalar>& x, Index in) const {
    if (x.rank() != 3) throw ShapeError(std::string(kind()) + " layer: input must be (B, T, F), got " + to_string(x.shape()));
    if (x.dim(2) != in) {
      throw ShapeError(std::string(kind()) + " layer: input feature dimension " + std::to_string(x.dim(2)) +
                       " != input_size " + std::to_string(in));
    }
  }

  Tensor<Scalar> apply(const LinearSpec&, const Tensor<Scalar>& x) {
    return linear(x, param("weight"), param("bias"));
  }
  Tensor<Scalar> apply(const Conv3dSpec& s, const Tensor<Scalar>& x) {
    return conv3d(x, param("weight"), param("bias"), s.padding);
  }
  Tensor<Scalar> apply(const Conv2dSpec& s, const Tensor<Scalar>& x) {
    return conv2d(x, param("weight"), param("bias"), s.padding);
  }
  Tensor<Scalar> apply(const MaxPool3dSpec& s, const Tensor<Scalar>& x) { return maxpool3d(x, s.kernel); }
  Tensor<Scalar> apply(const MaxPool2dSpec& s, const Tensor<Scalar>& x) { return maxpool2d(x, s.kernel); }
  Tensor<Scalar> apply(const BatchNorm2dSpec& s, const Tensor<Scalar>& x) {
    return batchnorm2d(x, param("weight"), param("bias"), param("running_mean"), param("running_var"), training_,
                       static_cast<Scalar>(s.momentum), static_cast<Scalar>(s.eps));
  }
  Tensor<Scalar> apply(const GruBidirectionalSpec& s, const Tensor<Scalar>& x) {
    check_sequence(x, s.input_size);
    return gru_bidirectional(x, weights(""), weights("_reverse"));
  }
  Tensor<Scalar> apply(const LstmSpec& s, const Tensor<Scalar>& x) {
    check_sequence(x, s.input_size);
    return lstm_sequence(x, weights("")).outputs;
  }
  Tensor<Scalar> apply(const ReluSpec&, const Tensor<Scalar>& x) { return relu(x); }
  Tensor<Scalar> apply(const TanhSpec&, const Tensor<Scalar>& x) { return opnet::tanh(x); }
  Tensor<Scalar> apply(const AdaptiveAvgPoolTimeSpec& s, const Tensor<Scalar>& x) {
    if (x.rank() < 2) throw ShapeError("input must have a time axis at position 1");
    return adaptive_avgpool(x, 1, s.target);
  }

  LayerSpec spec_;
  ParamSet<Scalar> params_;
  bool training_ = true;
};

template <typename Scalar>
Tensor<Scalar> forward(Layer<Scalar>& layer, const Tensor<Scalar>& x) {
  return layer.forward(x);
}

}  // namespace opnet
