#pragma once

#include "opnet/sim.hpp"
#include "opnet/types.hpp"

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace opnet {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  Index trial_count = 0;
  double sample_rate = 8000;
  Index channels = kChannels;
  double fps = 30;
  double duration_s = 3.0;
  std::string units = "meters";
  double cm_per_unit = 100;
  FovSpec fov;
  Preset preset = Preset::desk;
  std::uint64_t master_seed = 0;
  std::string object = "cube";
  double release_height = 0.30;
  std::vector<std::string> trial_ids;  // directory names, in dataset order

  Index samples() const;
  void validate() const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trial> trials;
};

/// Builds the manifest for simulator output.
DatasetManifest manifest_for(const SimConfig& cfg, Preset preset, const std::vector<Trial>& trials,
                             std::uint64_t master_seed);

struct WriteOptions {
  /// Called after a trial's files are complete in its staging directory, before it
  /// is renamed into place. Throwing from here simulates an interrupted write.
  std::function<void(const std::string& trial_id, const std::filesystem::path& staging)> before_commit;
};

void write_dataset(const std::vector<Trial>& trials, const DatasetManifest& manifest,
                   const std::filesystem::path& root, const WriteOptions& options = {});

/// Loads and validates every trial; errors name the trial and the violated invariant.
Dataset read_dataset(const std::filesystem::path& root);

DatasetManifest read_manifest(const std::filesystem::path& root);

/// Checks one trial against the manifest; throws DatasetError naming the trial.
void validate_trial(const Trial& trial, const DatasetManifest& manifest);

/// IEEE float32 little-endian WAVE (WAVE_FORMAT_EXTENSIBLE for more than two channels).
void write_wav(const std::filesystem::path& path, const Waveform& audio, double sample_rate);
Waveform read_wav(const std::filesystem::path& path, double* sample_rate = nullptr);

void write_table(const std::filesystem::path& path, const Trajectory& rows);
Trajectory read_table(const std::filesystem::path& path);

}  // namespace opnet
