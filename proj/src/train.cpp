#include "opnet/train.hpp"

#include "opnet/adam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace opnet {

namespace {

std::vector<Index> shuffled(Index n, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

// Consecutive batches of `rows`; a trailing singleton joins the previous batch so
// batch statistics are always defined.
std::vector<std::vector<Index>> batches(const std::vector<Index>& rows, Index batch_size) {
  std::vector<std::vector<Index>> out;
  for (std::size_t i = 0; i < rows.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(rows.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(i), rows.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

void check_rows(const Dataset& ds, const std::vector<Index>& rows) {
  for (Index r : rows) {
    if (r < 0 || r >= static_cast<Index>(ds.trials.size())) {
      throw std::out_of_range("trial index " + std::to_string(r) + " is outside the dataset");
    }
  }
}

void check_geometry(const ModelConfig& model, const Dataset& ds) {
  const ModelConfig expected = model_config_for(ds.manifest);
  if (model.frames != expected.frames || model.freq_bins != expected.freq_bins || model.samples != expected.samples ||
      model.channels != ds.manifest.channels) {
    throw std::invalid_argument("model expects " + std::to_string(model.channels) + " channels, " +
                                std::to_string(model.samples) + " samples, " + std::to_string(model.frames) + "x" +
                                std::to_string(model.freq_bins) + " spectrogram; dataset gives " +
                                std::to_string(ds.manifest.channels) + " channels, " +
                                std::to_string(expected.samples) + " samples, " + std::to_string(expected.frames) +
                                "x" + std::to_string(expected.freq_bins));
  }
}

// One pass of Adam over `rows` in seeded random order; returns the mean batch loss
// weighted by batch size.
template <typename Scalar>
double run_epoch(Network<Scalar>& net, const Dataset& ds, const std::vector<Index>& rows, AdamState<Scalar>& adam,
                 Index batch_size, std::uint64_t seed, FeatureCache<Scalar>* cache) {
  std::vector<Index> order = rows;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  net.set_training(true);
  auto params = net.params().trainable();
  double total = 0;
  for (const auto& b : batches(order, batch_size)) {
    const auto input = make_input<Scalar>(ds, b, net.kind(), cache);
    const auto target = make_target<Scalar>(ds, b);
    const auto loss = mse_loss(net.forward(input), target);
    backward(loss);
    adam_step(params, adam);
    total += static_cast<double>(loss.item()) * static_cast<double>(b.size());
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be at least 1");
  if (!(lr >= 0)) throw std::invalid_argument("train: lr must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
  if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9) throw std::invalid_argument("train: split must sum to 1");
  AdamState<double>(lr, beta1, beta2);
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("finetune: epochs must be at least 1");
  if (!(lr >= 0)) throw std::invalid_argument("finetune: lr must be non-negative");
  if (folds < 2) throw std::invalid_argument("finetune: folds must be at least 2");
  if (batch_size < 1) throw std::invalid_argument("finetune: batch_size must be positive");
  AdamState<double>(lr, beta1, beta2);
}

Split split_dataset(Index n, std::uint64_t seed) {
  if (n < 10) throw std::invalid_argument("split_dataset: need at least 10 trials, got " + std::to_string(n));
  const auto idx = shuffled(n, seed);
  const Index n_train = n * 8 / 10, n_val = n / 10;
  Split s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  return s;
}

std::vector<std::vector<Index>> kfold(Index n, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold: need at least 2 folds");
  if (n < k) {
    throw std::invalid_argument("kfold: " + std::to_string(n) + " trials cannot fill " + std::to_string(k) + " folds");
  }
  const auto idx = shuffled(n, seed);
  std::vector<std::vector<Index>> folds(static_cast<std::size_t>(k));
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const Index size = n / k + (f < n % k ? 1 : 0);
    folds[static_cast<std::size_t>(f)].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                                              idx.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += static_cast<std::size_t>(size);
  }
  return folds;
}

StftConfig stft_config_for(const DatasetManifest& manifest) { return StftConfig::for_preset(manifest.preset); }

ModelConfig model_config_for(const DatasetManifest& manifest, std::uint64_t init_seed) {
  const StftConfig stft = stft_config_for(manifest);
  const Index samples = manifest.samples();
  auto cfg = ModelConfig::for_preset(manifest.preset, stft.frames(samples), stft.bins(), samples);
  cfg.channels = manifest.channels;
  cfg.init_seed = init_seed;
  return cfg;
}

template <typename Scalar>
FeatureCache<Scalar>::FeatureCache(const Dataset& ds, std::size_t budget_bytes)
    : ds_(&ds), stft_(stft_config_for(ds.manifest)), budget_(budget_bytes), cached_(ds.trials.size()) {}

template <typename Scalar>
const Buffer<Scalar>& FeatureCache<Scalar>::get(Index row) {
  check_rows(*ds_, {row});
  auto& slot = cached_[static_cast<std::size_t>(row)];
  if (slot.size()) return slot;
  Buffer<Scalar> feat = stft_features(ds_->trials[static_cast<std::size_t>(row)].audio, stft_).data.template cast<Scalar>();
  const std::size_t bytes = static_cast<std::size_t>(feat.size()) * sizeof(Scalar);
  if (used_ + bytes > budget_) {
    scratch_ = std::move(feat);
    return scratch_;
  }
  used_ += bytes;
  slot = std::move(feat);
  return slot;
}

template <typename Scalar>
ModelInput<Scalar> make_input(const Dataset& ds, const std::vector<Index>& rows, ModelKind kind,
                              FeatureCache<Scalar>* cache) {
  check_rows(ds, rows);
  if (rows.empty()) throw std::invalid_argument("make_input: empty batch");
  if (cache && &cache->dataset() != &ds) throw std::invalid_argument("make_input: feature cache built for another dataset");
  const Index B = static_cast<Index>(rows.size());
  ModelInput<Scalar> in;
  if (uses_audio_features(kind)) {
    const StftConfig stft = stft_config_for(ds.manifest);
    const Index T = stft.frames(ds.manifest.samples()), F = stft.bins(), D = 2 * ds.manifest.channels;
    Buffer<Scalar> data(B * T * F * D);
    for (Index b = 0; b < B; ++b) {
      const auto& trial = ds.trials[static_cast<std::size_t>(rows[b])];
      if (trial.audio.cols() != ds.manifest.samples() || trial.audio.rows() != ds.manifest.channels) {
        throw std::invalid_argument("trial " + trial.id + ": recording does not match the manifest geometry");
      }
      if (cache) {
        data.segment(b * T * F * D, T * F * D) = cache->get(rows[b]);
      } else {
        data.segment(b * T * F * D, T * F * D) = stft_features(trial.audio, stft).data.template cast<Scalar>();
      }
    }
    in.audio = Tensor<Scalar>({B, 1, T, F, D}, std::move(data));
  }
  if (uses_waveform(kind) && kind != ModelKind::b1_linear) {
    const Index C = ds.manifest.channels, N = ds.manifest.samples();
    Buffer<Scalar> data(B * N * C);
    for (Index b = 0; b < B; ++b) {
      const auto& a = ds.trials[static_cast<std::size_t>(rows[b])].audio;
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(data.data() + b * N * C, N, C) =
          a.transpose().template cast<Scalar>();
    }
    in.waveform = Tensor<Scalar>({B, 1, N, C}, std::move(data));
  }
  if (uses_observed(kind)) {
    Buffer<Scalar> data(B * kObservedSteps * 2);
    for (Index b = 0; b < B; ++b) {
      const Trajectory obs = normalize_trajectory(ds.trials[static_cast<std::size_t>(rows[b])].observed);
      for (Index i = 0; i < kObservedSteps; ++i) {
        data[(b * kObservedSteps + i) * 2] = static_cast<Scalar>(obs(i, 0));
        data[(b * kObservedSteps + i) * 2 + 1] = static_cast<Scalar>(obs(i, 1));
      }
    }
    in.observed = Tensor<Scalar>({B, kObservedSteps, 2}, std::move(data));
  }
  return in;
}

template <typename Scalar>
Tensor<Scalar> make_target(const Dataset& ds, const std::vector<Index>& rows) {
  check_rows(ds, rows);
  const Index B = static_cast<Index>(rows.size());
  Buffer<Scalar> data(B * kCompleteSteps * 2);
  for (Index b = 0; b < B; ++b) {
    const Trajectory c = normalize_trajectory(ds.trials[static_cast<std::size_t>(rows[b])].complete);
    for (Index i = 0; i < kCompleteSteps; ++i) {
      data[(b * kCompleteSteps + i) * 2] = static_cast<Scalar>(c(i, 0));
      data[(b * kCompleteSteps + i) * 2 + 1] = static_cast<Scalar>(c(i, 1));
    }
  }
  return Tensor<Scalar>({B, kCompleteSteps, 2}, std::move(data));
}

template <typename Scalar>
double evaluate_loss(Network<Scalar>& net, const Dataset& ds, const std::vector<Index>& rows, Index batch_size,
                     FeatureCache<Scalar>* cache) {
  if (rows.empty()) throw std::invalid_argument("evaluate_loss: no trials");
  NoGradGuard no_grad;
  const bool was_training = net.training();
  net.set_training(false);
  double total = 0;
  for (const auto& b : batches(rows, batch_size)) {
    const auto loss = mse_loss(net.forward(make_input<Scalar>(ds, b, net.kind(), cache)), make_target<Scalar>(ds, b));
    total += static_cast<double>(loss.item()) * static_cast<double>(b.size());
  }
  net.set_training(was_training);
  return total / static_cast<double>(rows.size());
}

template <typename Scalar>
TrainResult train(Network<Scalar>& net, const Dataset& ds, const Split& split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (split.train.empty() || split.val.empty()) throw std::invalid_argument("train: empty training or validation split");
  check_geometry(net.config(), ds);

  FeatureCache<Scalar> cache(ds);
  TrainResult result;
  result.curve.push_back({0, evaluate_loss(net, ds, split.train, cfg.batch_size, &cache),
                          evaluate_loss(net, ds, split.val, cfg.batch_size, &cache)});
  if (on_epoch) on_epoch(result.curve.back());

  AdamState<Scalar> adam(cfg.lr, cfg.beta1, cfg.beta2);
  result.best_val_mse = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double train_mse =
        run_epoch(net, ds, split.train, adam, cfg.batch_size, derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)), &cache);
    const double val_mse = evaluate_loss(net, ds, split.val, cfg.batch_size, &cache);
    result.curve.push_back({epoch, train_mse, val_mse});
    if (val_mse < result.best_val_mse || result.best_epoch == 0) {
      result.best_val_mse = val_mse;
      result.best_epoch = epoch;
      result.best = snapshot(net);
    }
    if (on_epoch) on_epoch(result.curve.back());
  }
  restore(net, result.best);
  net.set_training(false);
  return result;
}

template <typename Scalar>
std::vector<PredictionResult> predict(Network<Scalar>& net, const Dataset& ds, const std::vector<Index>& rows,
                                      Index batch_size, FeatureCache<Scalar>* cache) {
  NoGradGuard no_grad;
  const bool was_training = net.training();
  net.set_training(false);
  std::vector<PredictionResult> out;
  out.reserve(rows.size());
  for (const auto& b : batches(rows, batch_size)) {
    const auto pred = net.forward(make_input<Scalar>(ds, b, net.kind(), cache));
    const auto& d = pred.data();
    for (std::size_t k = 0; k < b.size(); ++k) {
      PredictionResult r;
      r.trial_id = ds.trials[static_cast<std::size_t>(b[k])].id;
      r.model = net.kind();
      r.trajectory.resize(kCompleteSteps, 2);
      for (Index i = 0; i < kCompleteSteps; ++i) {
        r.trajectory(i, 0) = static_cast<double>(d[(static_cast<Index>(k) * kCompleteSteps + i) * 2]);
        r.trajectory(i, 1) = static_cast<double>(d[(static_cast<Index>(k) * kCompleteSteps + i) * 2 + 1]);
      }
      r.end_location = r.trajectory.row(kCompleteSteps - 1).transpose();
      out.push_back(std::move(r));
    }
  }
  net.set_training(was_training);
  return out;
}

std::vector<PredictionResult> predict_b1(const Dataset& ds, const std::vector<Index>& rows, const PeakConfig& peaks) {
  check_rows(ds, rows);
  std::vector<PredictionResult> out;
  for (Index r : rows) {
    const auto& t = ds.trials[static_cast<std::size_t>(r)];
    double bounce = 0;
    try {
      bounce = bounce_duration(t.audio, ds.manifest.sample_rate, t.exit_time.value_or(0.0), peaks);
    } catch (const SilentRecording&) {
      bounce = 0;  // no audible impacts: the object is assumed to stop where it left the view
    }
    PredictionResult p;
    p.trial_id = t.id;
    p.model = ModelKind::b1_linear;
    p.trajectory = normalize_trajectory(b1_predict(t.observed, bounce, ds.manifest.fps));
    p.end_location = p.trajectory.row(kCompleteSteps - 1).transpose();
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<GroundTruth> ground_truth(const Dataset& ds, const std::vector<Index>& rows) {
  check_rows(ds, rows);
  std::vector<GroundTruth> out;
  for (Index r : rows) {
    const auto& t = ds.trials[static_cast<std::size_t>(r)];
    out.push_back({t.id, (t.complete.row(0) - t.complete.row(kCompleteSteps - 1)).transpose()});
  }
  return out;
}

template <typename Scalar>
FinetuneResult finetune(const Checkpoint& pretrained, const Dataset& novel, const FinetuneConfig& cfg) {
  cfg.validate();
  check_geometry(pretrained.config, novel);
  const Index n = static_cast<Index>(novel.trials.size());
  const auto folds = kfold(n, cfg.folds, cfg.seed);
  FeatureCache<Scalar> cache(novel);
  FinetuneResult result;
  std::vector<double> zs_disp, ft_disp, zs_succ, ft_succ;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<Index> rest;
    for (std::size_t g = 0; g < folds.size(); ++g) {
      if (g != f) rest.insert(rest.end(), folds[g].begin(), folds[g].end());
    }
    const auto truth = ground_truth(novel, folds[f]);
    auto net = instantiate<Scalar>(pretrained);
    FoldResult fold;
    fold.held_out = folds[f];
    fold.zero_shot = evaluate(predict(*net, novel, folds[f], cfg.batch_size, &cache), truth, novel.manifest.fov,
                              novel.manifest.cm_per_unit);
    AdamState<Scalar> adam(cfg.lr, cfg.beta1, cfg.beta2);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      run_epoch(*net, novel, rest, adam, cfg.batch_size,
                derive_seed(derive_seed(cfg.seed, f), static_cast<std::uint64_t>(epoch)), &cache);
    }
    fold.finetuned = evaluate(predict(*net, novel, folds[f], cfg.batch_size, &cache), truth, novel.manifest.fov,
                              novel.manifest.cm_per_unit);
    zs_disp.push_back(fold.zero_shot.mean_displacement_cm);
    ft_disp.push_back(fold.finetuned.mean_displacement_cm);
    zs_succ.push_back(fold.zero_shot.success_rate);
    ft_succ.push_back(fold.finetuned.success_rate);
    result.folds.push_back(std::move(fold));
  }
  result.zero_shot_displacement = mean_std(zs_disp);
  result.finetuned_displacement = mean_std(ft_disp);
  result.zero_shot_success = mean_std(zs_succ);
  result.finetuned_success = mean_std(ft_succ);
  return result;
}

#define OPNET_INSTANTIATE(S)                                                                                       \
  template class FeatureCache<S>;                                                                                   \
  template ModelInput<S> make_input<S>(const Dataset&, const std::vector<Index>&, ModelKind, FeatureCache<S>*);    \
  template Tensor<S> make_target<S>(const Dataset&, const std::vector<Index>&);                                    \
  template TrainResult train<S>(Network<S>&, const Dataset&, const Split&, const TrainConfig&, const EpochCallback&); \
  template double evaluate_loss<S>(Network<S>&, const Dataset&, const std::vector<Index>&, Index, FeatureCache<S>*); \
  template std::vector<PredictionResult> predict<S>(Network<S>&, const Dataset&, const std::vector<Index>&, Index,   \
                                                    FeatureCache<S>*);                                               \
  template FinetuneResult finetune<S>(const Checkpoint&, const Dataset&, const FinetuneConfig&);

OPNET_INSTANTIATE(float)
OPNET_INSTANTIATE(double)

}  // namespace opnet
