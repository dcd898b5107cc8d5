#include "opnet/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace opnet {

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void put(T v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename T>
  T get(const char* what) {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is_) fail(std::string("truncated while reading ") + what);
    return to_little(v);
  }
  std::string get_string(const char* what, std::uint32_t limit = 1u << 24) {
    const auto n = get<std::uint32_t>(what);
    if (n > limit) fail(std::string(what) + " length " + std::to_string(n) + " is implausible");
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) fail(std::string("truncated while reading ") + what);
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const { throw CheckpointError(path_ + ": " + what); }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace

template <typename Scalar>
Checkpoint snapshot(const Network<Scalar>& net) {
  Checkpoint ckpt{net.kind(), net.config(), {}};
  for (const auto& e : net.params().entries()) {
    const auto& d = e.tensor.data();
    ckpt.tensors.push_back({e.name, e.tensor.shape(), e.trainable, static_cast<int>(sizeof(Scalar)),
                            std::vector<double>(d.data(), d.data() + d.size())});
  }
  return ckpt;
}

template <typename Scalar>
void restore(Network<Scalar>& net, const Checkpoint& ckpt) {
  if (ckpt.kind != net.kind()) {
    throw CheckpointError(std::string("checkpoint holds a ") + to_string(ckpt.kind) + " model, not " +
                          to_string(net.kind()));
  }
  auto& entries = net.params().entries();
  if (entries.size() != ckpt.tensors.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = ckpt.tensors[i];
    auto& dst = entries[i];
    if (src.name != dst.name || src.shape != dst.tensor.shape()) {
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " is " + src.name + " " + to_string(src.shape) +
                            ", model expects " + dst.name + " " + to_string(dst.tensor.shape()));
    }
    auto& d = dst.tensor.data();
    for (Index k = 0; k < d.size(); ++k) d[k] = static_cast<Scalar>(src.values[static_cast<std::size_t>(k)]);
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError(path.string() + ": cannot open for writing");
  Writer w(os);
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put_string(to_string(ckpt.kind));
  w.put_string(nlohmann::json(ckpt.config).dump());
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.width != 4 && t.width != 8) throw CheckpointError(t.name + ": element width must be 4 or 8");
    if (static_cast<Index>(t.values.size()) != numel(t.shape)) {
      throw CheckpointError(t.name + ": value count does not match shape " + to_string(t.shape));
    }
    w.put_string(t.name);
    w.put(static_cast<std::uint8_t>(t.trainable ? 1 : 0));
    w.put(static_cast<std::uint8_t>(t.width));
    w.put(static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) w.put(static_cast<std::uint64_t>(d));
    for (double v : t.values) {
      if (t.width == 4) {
        w.put(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        w.put(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  if (!os) throw CheckpointError(path.string() + ": write failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(path.string() + ": cannot open checkpoint");
  Reader r(is, path.string());
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) r.fail("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  try {
    ckpt.kind = parse_model_kind(r.get_string("model kind", 256));
    ckpt.config = nlohmann::json::parse(r.get_string("hyperparameters")).get<ModelConfig>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.get_string("tensor name", 4096);
    t.trainable = r.get<std::uint8_t>("trainable flag") != 0;
    t.width = r.get<std::uint8_t>("element width");
    if (t.width != 4 && t.width != 8) r.fail(t.name + ": element width " + std::to_string(t.width));
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.fail(t.name + ": rank " + std::to_string(rank) + " is implausible");
    Index n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>("dimension");
      if (d == 0 || d > (1ull << 32)) r.fail(t.name + ": dimension " + std::to_string(d) + " is invalid");
      t.shape.push_back(static_cast<Index>(d));
      n *= static_cast<Index>(d);
    }
    if (n > (Index{1} << 31)) r.fail(t.name + ": tensor too large");
    t.values.resize(static_cast<std::size_t>(n));
    for (auto& v : t.values) {
      v = t.width == 4 ? static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>("payload")))
                       : std::bit_cast<double>(r.get<std::uint64_t>("payload"));
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after the last tensor");
  return ckpt;
}

template Checkpoint snapshot<float>(const Network<float>&);
template Checkpoint snapshot<double>(const Network<double>&);
template void restore<float>(Network<float>&, const Checkpoint&);
template void restore<double>(Network<double>&, const Checkpoint&);

}  // namespace opnet
