#pragma once

// Round-trip and corruption checks for datasets and checkpoints, shared with the acceptance run.
// Each returns an empty string on success, otherwise the first problem found.

#include "opnet/checkpoint.hpp"
#include "opnet/datastore.hpp"

#include <filesystem>
#include <fstream>
#include <string>

namespace opnet::testing {

inline bool bit_equal(const Trajectory& a, const Trajectory& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

inline std::string compare_trials(const Trial& a, const Trial& b) {
  const std::string who = "trial " + a.id + ": ";
  if (a.id != b.id) return who + "id changed to " + b.id;
  if (a.audio.rows() != b.audio.rows() || a.audio.cols() != b.audio.cols() ||
      std::memcmp(a.audio.data(), b.audio.data(), sizeof(float) * static_cast<std::size_t>(a.audio.size())) != 0) {
    return who + "audio differs";
  }
  if (!bit_equal(a.observed, b.observed)) return who + "observed differs";
  if (!bit_equal(a.complete, b.complete)) return who + "complete differs";
  if (a.end_location != b.end_location) return who + "end location differs";
  if (a.exit_time != b.exit_time) return who + "exit time differs";
  if (a.impacts.size() != b.impacts.size()) return who + "impact count differs";
  for (std::size_t i = 0; i < a.impacts.size(); ++i) {
    const auto &x = a.impacts[i], &y = b.impacts[i];
    if (x.time != y.time || x.position != y.position || x.energy != y.energy) return who + "impact differs";
  }
  return {};
}

inline std::string check_dataset_round_trip(const Dataset& ds, const std::filesystem::path& root) {
  write_dataset(ds.trials, ds.manifest, root);
  const auto back = read_dataset(root);
  if (back.trials.size() != ds.trials.size()) return "trial count changed";
  const auto& m = ds.manifest;
  const auto& n = back.manifest;
  if (n.trial_ids != m.trial_ids || n.sample_rate != m.sample_rate || n.fps != m.fps || n.duration_s != m.duration_s ||
      n.fov.width != m.fov.width || n.fov.height != m.fov.height || n.preset != m.preset ||
      n.master_seed != m.master_seed || n.cm_per_unit != m.cm_per_unit || n.object != m.object ||
      n.release_height != m.release_height || n.channels != m.channels) {
    return "manifest changed";
  }
  for (std::size_t i = 0; i < ds.trials.size(); ++i) {
    if (auto e = compare_trials(ds.trials[i], back.trials[i]); !e.empty()) return e;
  }
  return {};
}

// Cuts one trial's observed table to 64 rows on disk; loading must fail and name both the
// trial and the row-count invariant.
inline std::string check_corrupt_trial_named(const std::filesystem::path& root, const std::string& id) {
  const auto table = root / "trials" / id / "observed.csv";
  std::ifstream in(table);
  std::string text, line;
  for (int i = 0; i < 64 && std::getline(in, line); ++i) text += line + "\n";
  in.close();
  std::ofstream(table, std::ios::trunc) << text;
  try {
    read_dataset(root);
  } catch (const DatasetError& e) {
    const std::string what = e.what();
    if (what.find(id) == std::string::npos) return "error does not name the trial: " + what;
    if (what.find("64 rows") == std::string::npos) return "error does not name the invariant: " + what;
    return {};
  }
  return "corrupt trial was accepted";
}

template <typename Scalar>
std::string check_checkpoint_round_trip(Network<Scalar>& net, const ModelInput<Scalar>& input,
                                        const std::filesystem::path& path) {
  net.set_training(false);
  const auto before = net.forward(input);
  const auto snap = snapshot(net);
  write_checkpoint(path, snap);
  const auto read = read_checkpoint(path);
  if (read.kind != snap.kind || read.tensors.size() != snap.tensors.size()) return "checkpoint header changed";
  for (std::size_t i = 0; i < snap.tensors.size(); ++i) {
    const auto &a = snap.tensors[i], &b = read.tensors[i];
    if (a.name != b.name || a.shape != b.shape || a.values != b.values || a.trainable != b.trainable) {
      return "checkpoint tensor " + a.name + " changed";
    }
  }
  auto back = instantiate<Scalar>(read);
  back->set_training(false);
  const auto after = back->forward(input);
  if (after.shape() != before.shape() || !(after.data() == before.data()).all()) return "restored network predicts differently";
  return {};
}

}  // namespace opnet::testing
