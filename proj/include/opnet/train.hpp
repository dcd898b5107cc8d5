#pragma once

#include "opnet/checkpoint.hpp"
#include "opnet/datastore.hpp"
#include "opnet/features.hpp"
#include "opnet/metrics.hpp"
#include "opnet/models.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace opnet {

struct TrainConfig {
  int epochs = 30;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  Index batch_size = 16;
  std::uint64_t seed = 0;
  std::array<double, 3> split{0.8, 0.1, 0.1};

  void validate() const;
};

struct FinetuneConfig {
  int epochs = 3;
  double lr = 1e-5;
  double beta1 = 0.0;
  double beta2 = 0.999;
  int folds = 5;
  Index batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Split {
  std::vector<Index> train, val, test;
};

/// Seeded shuffle, then floor(0.8 n) / floor(0.1 n) / remainder.
Split split_dataset(Index n, std::uint64_t seed);

/// Seeded shuffle into k near-equal disjoint folds covering [0, n).
std::vector<std::vector<Index>> kfold(Index n, int k, std::uint64_t seed);

/// Model geometry for a dataset's preset and recording length.
ModelConfig model_config_for(const DatasetManifest& manifest, std::uint64_t init_seed = 0);
StftConfig stft_config_for(const DatasetManifest& manifest);

/// Spectrogram features memoised per trial, flattened (T, F, D). Trials past the byte
/// budget are recomputed on every request.
template <typename Scalar>
class FeatureCache {
 public:
  explicit FeatureCache(const Dataset& ds, std::size_t budget_bytes = std::size_t{2} << 30);

  const Buffer<Scalar>& get(Index row);
  const Dataset& dataset() const { return *ds_; }

 private:
  const Dataset* ds_;
  StftConfig stft_;
  std::size_t budget_, used_ = 0;
  std::vector<Buffer<Scalar>> cached_;
  Buffer<Scalar> scratch_;
};

/// Assembles batched model inputs (only what `kind` consumes) for the given trials.
template <typename Scalar>
ModelInput<Scalar> make_input(const Dataset& ds, const std::vector<Index>& rows, ModelKind kind,
                              FeatureCache<Scalar>* cache = nullptr);

/// Normalised complete trajectories, (B, 135, 2).
template <typename Scalar>
Tensor<Scalar> make_target(const Dataset& ds, const std::vector<Index>& rows);

struct EpochRecord {
  int epoch = 0;  // 0 is the evaluation before any update
  double train_mse = 0;
  double val_mse = 0;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  int best_epoch = 0;
  double best_val_mse = 0;
  Checkpoint best;  // the validation-selected parameters, also loaded into the network
};

using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename Scalar>
TrainResult train(Network<Scalar>& net, const Dataset& ds, const Split& split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Mean squared error over the given trials, in eval mode without recording a graph.
template <typename Scalar>
double evaluate_loss(Network<Scalar>& net, const Dataset& ds, const std::vector<Index>& rows, Index batch_size = 16,
                     FeatureCache<Scalar>* cache = nullptr);

template <typename Scalar>
std::vector<PredictionResult> predict(Network<Scalar>& net, const Dataset& ds, const std::vector<Index>& rows,
                                      Index batch_size = 16, FeatureCache<Scalar>* cache = nullptr);

/// B1 predictions in normalised coordinates, bounce time taken from each recording.
std::vector<PredictionResult> predict_b1(const Dataset& ds, const std::vector<Index>& rows,
                                         const PeakConfig& peaks = {});

/// Normalised true end locations.
std::vector<GroundTruth> ground_truth(const Dataset& ds, const std::vector<Index>& rows);

struct FoldResult {
  std::vector<Index> held_out;
  MetricsReport zero_shot;
  MetricsReport finetuned;
};

struct FinetuneResult {
  std::vector<FoldResult> folds;
  MeanStd zero_shot_displacement, finetuned_displacement;
  MeanStd zero_shot_success, finetuned_success;
};

/// k-fold finetuning of a pretrained model on a novel dataset.
template <typename Scalar>
FinetuneResult finetune(const Checkpoint& pretrained, const Dataset& novel, const FinetuneConfig& cfg);

}  // namespace opnet
