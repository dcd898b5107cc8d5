#include "fixtures.hpp"
#include "persistence_checks.hpp"

#include "opnet/train.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include "json.hpp"

using namespace opnet;
using namespace opnet::testing;
namespace fs = std::filesystem;

namespace {

const Dataset& sample() {
  static const Dataset ds = simulated_dataset(10, 31);
  return ds;
}

void edit_manifest(const fs::path& root, const std::function<void(nlohmann::json&)>& edit) {
  std::ifstream in(root / "manifest.json");
  auto j = nlohmann::json::parse(in);
  in.close();
  edit(j);
  std::ofstream(root / "manifest.json", std::ios::trunc) << j.dump(2);
}

std::string load_error(const fs::path& root) {
  try {
    read_dataset(root);
  } catch (const DatasetError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Datastore, RoundTripIsBitExact) {
  TempDir dir("rt");
  EXPECT_EQ(check_dataset_round_trip(sample(), dir.path()), "");
}

TEST(Datastore, LayoutHasOneDirectoryPerTrial) {
  TempDir dir("layout");
  write_dataset(sample().trials, sample().manifest, dir.path());
  Index dirs = 0;
  for (const auto& e : fs::directory_iterator(dir / "trials")) {
    ASSERT_TRUE(e.is_directory());
    for (const char* f : {"audio.wav", "observed.csv", "complete.csv", "meta.json"}) {
      EXPECT_TRUE(fs::exists(e.path() / f)) << e.path() << " " << f;
    }
    ++dirs;
  }
  EXPECT_EQ(dirs, 10);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  std::ifstream in(dir / "trials" / sample().trials[0].id / "observed.csv");
  std::string first;
  std::getline(in, first);
  EXPECT_NE(first.find(','), std::string::npos);
}

TEST(Datastore, WavIsLittleEndianFloat) {
  TempDir dir("wav");
  Waveform w(7, 5);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = 0.125f * static_cast<float>(i) - 1.0f;
  write_wav(dir / "a.wav", w, 8000);
  std::ifstream in(dir / "a.wav", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes.substr(0, 4), "RIFF");
  EXPECT_EQ(bytes.substr(8, 4), "WAVE");
  // the last sample, channel 6 of frame 4, is w(6, 4) in little-endian IEEE single precision
  const float last = w(6, 4);
  std::uint32_t bitsv;
  std::memcpy(&bitsv, &last, 4);
  const auto tail = bytes.substr(bytes.size() - 4);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(static_cast<unsigned char>(tail[static_cast<std::size_t>(k)]), (bitsv >> (8 * k)) & 0xFF);
  double rate = 0;
  const auto back = read_wav(dir / "a.wav", &rate);
  EXPECT_EQ(rate, 8000);
  EXPECT_TRUE((back.array() == w.array()).all());
}

TEST(Datastore, ShortObservedTableNamesTheTrial) {
  TempDir dir("corrupt");
  write_dataset(sample().trials, sample().manifest, dir.path());
  EXPECT_EQ(check_corrupt_trial_named(dir.path(), sample().trials[3].id), "");
}

TEST(Datastore, ShortAudioNamesTheTrial) {
  TempDir dir("audio");
  write_dataset(sample().trials, sample().manifest, dir.path());
  const auto& t = sample().trials[5];
  write_wav(dir / "trials" / t.id / "audio.wav", t.audio.leftCols(t.audio.cols() - 1), sample().manifest.sample_rate);
  const auto err = load_error(dir.path());
  EXPECT_NE(err.find(t.id), std::string::npos) << err;
  EXPECT_NE(err.find("samples per channel"), std::string::npos) << err;
}

TEST(Datastore, SixChannelManifestIsRejectedBeforeTrialsLoad) {
  TempDir dir("channels");
  write_dataset(sample().trials, sample().manifest, dir.path());
  edit_manifest(dir.path(), [](auto& j) { j["channels"] = 6; });
  // remove a trial too: the manifest error must come first
  fs::remove_all(dir / "trials" / sample().trials[0].id);
  const auto err = load_error(dir.path());
  EXPECT_NE(err.find("channels"), std::string::npos) << err;
  EXPECT_THROW(read_manifest(dir.path()), DatasetError);
}

TEST(Datastore, ManifestProblemsAreReported) {
  TempDir dir("manifest");
  EXPECT_NE(load_error(dir.path()).find("missing manifest"), std::string::npos);
  write_dataset(sample().trials, sample().manifest, dir.path());
  edit_manifest(dir.path(), [](auto& j) { j["format_version"] = 99; });
  EXPECT_NE(load_error(dir.path()).find("version"), std::string::npos);
  edit_manifest(dir.path(), [](auto& j) {
    j["format_version"] = kDatasetFormatVersion;
    j["trial_count"] = 11;
  });
  EXPECT_FALSE(load_error(dir.path()).empty());
  edit_manifest(dir.path(), [](auto& j) { j["trial_count"] = 10; });
  fs::remove_all(dir / "trials" / sample().trials[9].id);
  EXPECT_NE(load_error(dir.path()).find("trial directories"), std::string::npos);
}

TEST(Datastore, InterruptedWriteLeavesNoPartialTrial) {
  TempDir dir("fault");
  const auto& ds = sample();
  WriteOptions opts;
  int committed = 0;
  opts.before_commit = [&](const std::string& id, const fs::path& staging) {
    EXPECT_TRUE(fs::exists(staging / "meta.json"));
    if (id == ds.trials[4].id) throw std::runtime_error("simulated crash");
    ++committed;
  };
  EXPECT_THROW(write_dataset(ds.trials, ds.manifest, dir.path(), opts), std::runtime_error);
  EXPECT_EQ(committed, 4);
  std::vector<std::string> visible;
  for (const auto& e : fs::directory_iterator(dir / "trials")) visible.push_back(e.path().filename().string());
  std::sort(visible.begin(), visible.end());
  ASSERT_EQ(visible.size(), 4u);  // no staging leftovers either
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(visible[i], ds.trials[i].id);
    for (const char* f : {"audio.wav", "observed.csv", "complete.csv", "meta.json"}) {
      EXPECT_TRUE(fs::exists(dir / "trials" / visible[i] / f));
    }
  }
  EXPECT_FALSE(fs::exists(dir / "manifest.json"));
  // a clean rerun over the debris succeeds
  EXPECT_EQ(check_dataset_round_trip(ds, dir.path()), "");
}

TEST(Datastore, WriteRejectsInconsistentInput) {
  TempDir dir("bad");
  auto trials = sample().trials;
  auto m = sample().manifest;
  trials[2].observed = trials[2].observed.topRows(64);
  EXPECT_THROW(write_dataset(trials, m, dir.path()), DatasetError);
  trials = sample().trials;
  trials.pop_back();
  EXPECT_THROW(write_dataset(trials, m, dir.path()), DatasetError);
}

TEST(Datastore, TablesIgnoreTheLocale) {
  TempDir dir("table");
  Trajectory t(3, 2);
  t << 0.1, -2.5e-8, 1.0 / 3, 12345.678, -0.0, 7;
  write_table(dir / "t.csv", t);
  EXPECT_TRUE(bit_equal(read_table(dir / "t.csv"), t));
  std::ofstream(dir / "bad.csv") << "1,2\n3;4\n";
  EXPECT_THROW(read_table(dir / "bad.csv"), DatasetError);
}

TEST(Checkpoint, RoundTripsEveryModel) {
  const auto& ds = sample();
  TempDir dir("ckpt");
  for (ModelKind k : {ModelKind::multimodal, ModelKind::b2_delay_cnn, ModelKind::b3_socialgan_lite,
                      ModelKind::b4_seldnet_lite, ModelKind::b5_combo}) {
    auto net = make_network<float>(k, model_config_for(ds.manifest, 8));
    const auto in = make_input<float>(ds, {0, 1}, k);
    if (k == ModelKind::b2_delay_cnn) net->forward(in);
    EXPECT_EQ(check_checkpoint_round_trip(*net, in, dir / "m.ckpt"), "") << to_string(k);
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto& ds = sample();
  TempDir dir("ckpt_bad");
  auto net = make_network<float>(ModelKind::b3_socialgan_lite, model_config_for(ds.manifest, 9));
  write_checkpoint(dir / "m.ckpt", snapshot(*net));
  std::ifstream in(dir / "m.ckpt", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(read_checkpoint(dir / "short.ckpt"), CheckpointError);
  std::ofstream(dir / "long.ckpt", std::ios::binary) << bytes << "x";
  EXPECT_THROW(read_checkpoint(dir / "long.ckpt"), CheckpointError);
  std::string magic = bytes;
  magic[0] = 'X';
  std::ofstream(dir / "magic.ckpt", std::ios::binary) << magic;
  EXPECT_THROW(read_checkpoint(dir / "magic.ckpt"), CheckpointError);
  EXPECT_THROW(read_checkpoint(dir / "absent.ckpt"), CheckpointError);
  // restoring into a different architecture names the first mismatch
  auto other = make_network<float>(ModelKind::b5_combo, model_config_for(ds.manifest, 9));
  EXPECT_THROW(restore(*other, snapshot(*net)), CheckpointError);
}
