#pragma once

// In-memory simulated datasets for the training, persistence and acceptance tests.

#include "opnet/datastore.hpp"
#include "opnet/features.hpp"
#include "opnet/sim.hpp"

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

namespace opnet::testing {

inline Dataset simulated_dataset(Index n, std::uint64_t seed, Preset preset = Preset::desk,
                                 std::optional<double> height = std::nullopt) {
  auto cfg = SimConfig::for_preset(preset);
  if (height) cfg.release_height = *height;
  const auto raw = generate_dataset(cfg, n, seed);
  Dataset ds;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "trial_%05zu", i);
    ds.trials.push_back(make_trial(raw[i], id));
  }
  ds.manifest = manifest_for(cfg, preset, ds.trials, seed);
  return ds;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("opnet_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace opnet::testing
