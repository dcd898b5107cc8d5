#include "opnet/datastore.hpp"

#include "opnet/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace opnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// GUID of KSDATAFORMAT_SUBTYPE_IEEE_FLOAT.
constexpr std::array<unsigned char, 16> kFloatSubtype{0x03, 0x00, 0x00, 0x00, 0x00, 0x00, 0x10, 0x00,
                                                      0x80, 0x00, 0x00, 0xAA, 0x00, 0x38, 0x9B, 0x71};

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DatasetError(path.string() + ": cannot open for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  os.close();
  if (!os) throw DatasetError(path.string() + ": write failed");
}

json manifest_json(const DatasetManifest& m) {
  return json{{"format_version", m.format_version},
              {"trial_count", m.trial_count},
              {"sample_rate", m.sample_rate},
              {"channels", m.channels},
              {"fps", m.fps},
              {"duration_s", m.duration_s},
              {"units", m.units},
              {"cm_per_unit", m.cm_per_unit},
              {"fov", {{"width", m.fov.width}, {"height", m.fov.height}}},
              {"preset", to_string(m.preset)},
              {"master_seed", m.master_seed},
              {"object", m.object},
              {"release_height", m.release_height},
              {"trials", m.trial_ids}};
}

json meta_json(const Trial& t) {
  json impacts = json::array();
  for (const auto& e : t.impacts) {
    impacts.push_back({{"time", e.time}, {"x", e.position.x()}, {"y", e.position.y()}, {"energy", e.energy}});
  }
  return json{{"id", t.id},
              {"end_location", {t.end_location.x(), t.end_location.y()}},
              {"exit_time", t.exit_time ? json(*t.exit_time) : json(nullptr)},
              {"impacts", impacts}};
}

[[noreturn]] void trial_error(const std::string& id, const std::string& what) {
  throw DatasetError("trial " + id + ": " + what);
}

}  // namespace

Index DatasetManifest::samples() const { return static_cast<Index>(std::llround(sample_rate * duration_s)); }

void DatasetManifest::validate() const {
  const auto fail = [](const std::string& what) { throw DatasetError("manifest: " + what); };
  if (format_version != kDatasetFormatVersion) {
    fail("format_version " + std::to_string(format_version) + " is not supported (expected " +
         std::to_string(kDatasetFormatVersion) + ")");
  }
  if (channels != kChannels) fail("channels must be 7, got " + std::to_string(channels));
  if (!(sample_rate > 0) || !(fps > 0) || !(duration_s > 0)) fail("sample_rate, fps and duration_s must be positive");
  if (units != "meters") fail("units must be meters, got " + units);
  if (!(cm_per_unit > 0)) fail("cm_per_unit must be positive");
  if (!(fov.width > 0) || !(fov.height > 0)) fail("fov width and height must be positive");
  if (trial_count < 0 || static_cast<Index>(trial_ids.size()) != trial_count) {
    fail("trial_count " + std::to_string(trial_count) + " does not match " + std::to_string(trial_ids.size()) +
         " listed trials");
  }
  for (const auto& id : trial_ids) {
    if (id.empty() || id[0] == '.' || id.find_first_of("/\\") != std::string::npos) fail("invalid trial id '" + id + "'");
  }
  auto sorted = trial_ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("duplicate trial ids");
}

DatasetManifest manifest_for(const SimConfig& cfg, Preset preset, const std::vector<Trial>& trials,
                             std::uint64_t master_seed) {
  DatasetManifest m;
  m.trial_count = static_cast<Index>(trials.size());
  m.sample_rate = cfg.sample_rate;
  m.fps = cfg.fps;
  m.duration_s = cfg.duration;
  m.fov = cfg.fov;
  m.preset = preset;
  m.master_seed = master_seed;
  m.object = to_string(cfg.object);
  m.release_height = cfg.release_height;
  for (const auto& t : trials) m.trial_ids.push_back(t.id);
  return m;
}

void validate_trial(const Trial& t, const DatasetManifest& m) {
  if (t.observed.rows() != kObservedSteps) {
    trial_error(t.id, "observed table has " + std::to_string(t.observed.rows()) + " rows, expected 65");
  }
  if (t.complete.rows() != kCompleteSteps) {
    trial_error(t.id, "complete table has " + std::to_string(t.complete.rows()) + " rows, expected 135");
  }
  if (t.complete.topRows(kObservedSteps) != t.observed) {
    trial_error(t.id, "complete table does not start with the observed window");
  }
  if (t.audio.rows() != m.channels) {
    trial_error(t.id, "audio has " + std::to_string(t.audio.rows()) + " channels, expected " +
                          std::to_string(m.channels));
  }
  if (t.audio.cols() != m.samples()) {
    trial_error(t.id, "audio has " + std::to_string(t.audio.cols()) + " samples per channel, expected " +
                          std::to_string(m.samples()));
  }
  if (!t.observed.allFinite() || !t.complete.allFinite() || !t.audio.allFinite()) {
    trial_error(t.id, "non-finite values");
  }
}

void write_wav(const fs::path& path, const Waveform& audio, double sample_rate) {
  const auto C = static_cast<std::uint32_t>(audio.rows());
  const auto N = static_cast<std::uint32_t>(audio.cols());
  const std::uint32_t rate = static_cast<std::uint32_t>(std::llround(sample_rate));
  const bool extensible = C > 2;
  const std::uint32_t fmt_size = extensible ? 40 : 16;
  const std::uint32_t data_size = 4 * C * N;

  std::string out;
  out.reserve(72 + data_size);
  out += "RIFF";
  put_le<std::uint32_t>(out, 4 + (8 + fmt_size) + (8 + 4) + (8 + data_size));
  out += "WAVEfmt ";
  put_le<std::uint32_t>(out, fmt_size);
  put_le<std::uint16_t>(out, extensible ? 0xFFFE : 3);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(C));
  put_le<std::uint32_t>(out, rate);
  put_le<std::uint32_t>(out, rate * 4 * C);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(4 * C));
  put_le<std::uint16_t>(out, 32);
  if (extensible) {
    put_le<std::uint16_t>(out, 22);
    put_le<std::uint16_t>(out, 32);
    put_le<std::uint32_t>(out, 0);  // no speaker mapping
    out.append(reinterpret_cast<const char*>(kFloatSubtype.data()), kFloatSubtype.size());
  }
  out += "fact";
  put_le<std::uint32_t>(out, 4);
  put_le<std::uint32_t>(out, N);
  out += "data";
  put_le<std::uint32_t>(out, data_size);
  for (std::uint32_t n = 0; n < N; ++n) {
    for (std::uint32_t c = 0; c < C; ++c) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(audio(c, n)));
  }
  write_file(path, out);
}

Waveform read_wav(const fs::path& path, double* sample_rate) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto fail = [&](const std::string& what) -> void { throw DatasetError(path.string() + ": " + what); };
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0) fail("not a WAVE file");

  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const auto size = get_le<std::uint32_t>(p + pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) fail("chunk '" + id + "' overruns the file");
    if (id == "fmt ") {
      if (size < 16) fail("fmt chunk too short");
      const auto tag = get_le<std::uint16_t>(p + body);
      channels = get_le<std::uint16_t>(p + body + 2);
      rate = get_le<std::uint32_t>(p + body + 4);
      bits = get_le<std::uint16_t>(p + body + 14);
      bool is_float = tag == 3;
      if (tag == 0xFFFE && size >= 40) is_float = std::memcmp(p + body + 24, kFloatSubtype.data(), 16) == 0;
      if (!is_float || bits != 32) fail("audio must be 32-bit IEEE float");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail("data chunk precedes fmt chunk");
      if (channels == 0 || size % (4u * channels) != 0) fail("data chunk size is not a whole number of frames");
      const Index N = size / (4 * channels);
      Waveform audio(channels, N);
      for (Index n = 0; n < N; ++n) {
        for (Index c = 0; c < channels; ++c) {
          audio(c, n) = std::bit_cast<float>(get_le<std::uint32_t>(p + body + 4 * (n * channels + c)));
        }
      }
      if (sample_rate) *sample_rate = rate;
      return audio;
    }
    pos = body + size + (size & 1);
  }
  fail("no data chunk");
  return {};
}

void write_table(const fs::path& path, const Trajectory& rows) {
  std::string out;
  for (Index i = 0; i < rows.rows(); ++i) {
    out += format_double(rows(i, 0));
    out += ',';
    out += format_double(rows(i, 1));
    out += '\n';
  }
  write_file(path, out);
}

Trajectory read_table(const fs::path& path) {
  std::istringstream is(read_file(path));
  std::vector<std::array<double, 2>> values;
  std::string line;
  Index lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      values.push_back({parse_double(std::string_view(line).substr(0, comma)),
                        parse_double(std::string_view(line).substr(comma + 1))});
    } catch (const std::invalid_argument& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  Trajectory t(static_cast<Index>(values.size()), 2);
  for (Index i = 0; i < t.rows(); ++i) t.row(i) << values[static_cast<std::size_t>(i)][0], values[static_cast<std::size_t>(i)][1];
  return t;
}

void write_dataset(const std::vector<Trial>& trials, const DatasetManifest& manifest, const fs::path& root,
                   const WriteOptions& options) {
  manifest.validate();
  if (static_cast<Index>(trials.size()) != manifest.trial_count) {
    throw DatasetError("write_dataset: manifest lists " + std::to_string(manifest.trial_count) + " trials, got " +
                       std::to_string(trials.size()));
  }
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (trials[i].id != manifest.trial_ids[i]) {
      throw DatasetError("write_dataset: trial " + std::to_string(i) + " has id " + trials[i].id +
                         ", manifest lists " + manifest.trial_ids[i]);
    }
    validate_trial(trials[i], manifest);
  }

  const fs::path trial_root = root / "trials";
  std::error_code ec;
  fs::create_directories(trial_root, ec);
  if (ec) throw DatasetError(trial_root.string() + ": " + ec.message());
  const std::string tag = ".staging-" + std::to_string(::getpid()) + "-";

  for (const auto& t : trials) {
    const fs::path staging = trial_root / (tag + t.id);
    const fs::path final_dir = trial_root / t.id;
    fs::remove_all(staging, ec);
    fs::create_directory(staging, ec);
    if (ec) throw DatasetError(staging.string() + ": " + ec.message());
    try {
      write_wav(staging / "audio.wav", t.audio, manifest.sample_rate);
      write_table(staging / "observed.csv", t.observed);
      write_table(staging / "complete.csv", t.complete);
      write_file(staging / "meta.json", meta_json(t).dump(2) + "\n");
      if (options.before_commit) options.before_commit(t.id, staging);
      fs::remove_all(final_dir);
      fs::rename(staging, final_dir);
    } catch (...) {
      fs::remove_all(staging, ec);
      throw;
    }
  }

  const fs::path tmp = root / (tag + "manifest.json");
  write_file(tmp, manifest_json(manifest).dump(2) + "\n");
  fs::rename(tmp, root / "manifest.json", ec);
  if (ec) throw DatasetError((root / "manifest.json").string() + ": " + ec.message());
}

DatasetManifest read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  if (!fs::exists(path)) throw DatasetError(root.string() + ": missing manifest.json");
  DatasetManifest m;
  try {
    const json j = json::parse(read_file(path));
    j.at("format_version").get_to(m.format_version);
    if (m.format_version != kDatasetFormatVersion) m.validate();
    j.at("trial_count").get_to(m.trial_count);
    j.at("sample_rate").get_to(m.sample_rate);
    j.at("channels").get_to(m.channels);
    j.at("fps").get_to(m.fps);
    j.at("duration_s").get_to(m.duration_s);
    j.at("units").get_to(m.units);
    j.at("cm_per_unit").get_to(m.cm_per_unit);
    j.at("fov").at("width").get_to(m.fov.width);
    j.at("fov").at("height").get_to(m.fov.height);
    m.preset = parse_preset(j.at("preset").get<std::string>());
    j.at("master_seed").get_to(m.master_seed);
    m.object = j.value("object", std::string("cube"));
    m.release_height = j.value("release_height", 0.30);
    j.at("trials").get_to(m.trial_ids);
  } catch (const DatasetError&) {
    throw;
  } catch (const std::exception& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

Dataset read_dataset(const fs::path& root) {
  Dataset ds;
  ds.manifest = read_manifest(root);
  const auto& m = ds.manifest;

  const fs::path trial_root = root / "trials";
  Index dirs = 0;
  if (fs::is_directory(trial_root)) {
    for (const auto& e : fs::directory_iterator(trial_root)) {
      if (e.is_directory() && e.path().filename().string()[0] != '.') ++dirs;
    }
  }
  if (dirs != m.trial_count) {
    throw DatasetError(root.string() + ": manifest lists " + std::to_string(m.trial_count) + " trials but " +
                       std::to_string(dirs) + " trial directories exist");
  }

  ds.trials.reserve(static_cast<std::size_t>(m.trial_count));
  for (const auto& id : m.trial_ids) {
    const fs::path dir = trial_root / id;
    if (!fs::is_directory(dir)) trial_error(id, "directory is missing");
    Trial t;
    t.id = id;
    try {
      double rate = 0;
      t.audio = read_wav(dir / "audio.wav", &rate);
      if (std::llround(rate) != std::llround(m.sample_rate)) {
        trial_error(id, "audio sample rate " + format_double(rate) + " differs from manifest " +
                            format_double(m.sample_rate));
      }
      t.observed = read_table(dir / "observed.csv");
      t.complete = read_table(dir / "complete.csv");
      const json meta = json::parse(read_file(dir / "meta.json"));
      if (meta.at("id").get<std::string>() != id) trial_error(id, "meta.json names a different trial");
      const auto end = meta.at("end_location").get<std::array<double, 2>>();
      t.end_location = Vec2(end[0], end[1]);
      if (!meta.at("exit_time").is_null()) t.exit_time = meta.at("exit_time").get<double>();
      for (const auto& e : meta.at("impacts")) {
        t.impacts.push_back({e.at("time").get<double>(), Vec2(e.at("x").get<double>(), e.at("y").get<double>()),
                             e.at("energy").get<double>()});
      }
    } catch (const DatasetError& e) {
      const std::string what = e.what();
      if (what.rfind("trial ", 0) == 0) throw;
      trial_error(id, what);
    } catch (const std::exception& e) {
      trial_error(id, std::string("meta.json: ") + e.what());
    }
    validate_trial(t, m);
    ds.trials.push_back(std::move(t));
  }
  return ds;
}

}  // namespace opnet
