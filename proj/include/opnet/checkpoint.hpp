#pragma once

#include "opnet/models.hpp"

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace opnet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'O', 'P', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  bool trainable = true;
  int width = 4;  // bytes per element on disk: 4 (float32) or 8 (float64)
  std::vector<double> values;
};

/// Every parameter and buffer of a network, plus what is needed to rebuild it.
struct Checkpoint {
  ModelKind kind = ModelKind::multimodal;
  ModelConfig config;
  std::vector<CheckpointTensor> tensors;
};

template <typename Scalar>
Checkpoint snapshot(const Network<Scalar>& net);

/// Copies values into `net`; names, order and shapes must match exactly.
template <typename Scalar>
void restore(Network<Scalar>& net, const Checkpoint& ckpt);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
std::unique_ptr<Network<Scalar>> instantiate(const Checkpoint& ckpt) {
  auto net = make_network<Scalar>(ckpt.kind, ckpt.config);
  restore(*net, ckpt);
  return net;
}

}  // namespace opnet
