// opnet: simulate drop datasets, train and evaluate the predictors, draw figures.

#include "opnet/checkpoint.hpp"
#include "opnet/datastore.hpp"
#include "opnet/features.hpp"
#include "opnet/metrics.hpp"
#include "opnet/plot.hpp"
#include "opnet/sim.hpp"
#include "opnet/train.hpp"

#include "CLI11.hpp"

#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using namespace opnet;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LogLevel { quiet, info, debug };

LogLevel log_level() {
  const char* env = std::getenv("OPNET_LOG");
  if (!env) return LogLevel::info;
  const std::string v = env;
  if (v == "quiet" || v == "0") return LogLevel::quiet;
  if (v == "debug" || v == "2") return LogLevel::debug;
  return LogLevel::info;
}

void log(LogLevel level, const std::string& msg) {
  if (level <= log_level()) std::cerr << msg << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << text;
  if (!os) throw std::runtime_error(path.string() + ": write failed");
}

std::vector<Index> all_rows(const Dataset& ds) {
  std::vector<Index> rows(ds.trials.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
  return rows;
}

ModelKind model_flag(const std::string& name) {
  try {
    return parse_model_kind(name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

Index find_trial(const Dataset& ds, const std::string& key) {
  for (std::size_t i = 0; i < ds.trials.size(); ++i) {
    if (ds.trials[i].id == key) return static_cast<Index>(i);
  }
  try {
    std::size_t used = 0;
    const long long i = std::stoll(key, &used);
    if (used == key.size() && i >= 0 && i < static_cast<long long>(ds.trials.size())) return i;
  } catch (const std::exception&) {
  }
  throw UsageError("no trial '" + key + "' in the dataset");
}

std::vector<PredictionResult> run_model(ModelKind kind, const std::string& ckpt_path, const Dataset& ds,
                                        const std::vector<Index>& rows) {
  if (kind == ModelKind::b1_linear) return predict_b1(ds, rows);
  if (ckpt_path.empty()) throw UsageError(std::string(to_string(kind)) + " needs --ckpt");
  const Checkpoint ckpt = read_checkpoint(ckpt_path);
  if (ckpt.kind != kind) {
    throw UsageError("checkpoint " + ckpt_path + " holds a " + to_string(ckpt.kind) + " model, not " + to_string(kind));
  }
  auto net = instantiate<float>(ckpt);
  const ModelConfig expected = model_config_for(ds.manifest);
  if (net->config().samples != expected.samples || net->config().frames != expected.frames ||
      net->config().freq_bins != expected.freq_bins) {
    throw std::runtime_error("checkpoint " + ckpt_path + " was trained on a different recording geometry than " +
                             "this dataset (" + std::to_string(net->config().samples) + " vs " +
                             std::to_string(expected.samples) + " samples)");
  }
  return predict(*net, ds, rows);
}

std::vector<double> travel_distances(const Dataset& ds) {
  std::vector<double> out;
  for (const auto& t : ds.trials) {
    const Vec2 start = t.impacts.empty() ? Vec2(t.complete.row(0).transpose()) : t.impacts.front().position;
    out.push_back((t.end_location - start).norm());
  }
  return out;
}

std::vector<double> peak_durations(const Dataset& ds, Index* silent = nullptr) {
  std::vector<double> out;
  for (const auto& t : ds.trials) {
    try {
      const auto peaks = detect_peaks(t.audio, ds.manifest.sample_rate);
      out.push_back(peaks.back() - peaks.front());
    } catch (const SilentRecording&) {
      if (silent) ++*silent;
    }
  }
  return out;
}

void print_summary(const Dataset& ds) {
  Index silent = 0;
  const auto dist = mean_std(travel_distances(ds));
  const auto dur = mean_std(peak_durations(ds, &silent));
  std::vector<double> exits;
  for (const auto& t : ds.trials) {
    if (t.exit_time) exits.push_back(*t.exit_time);
  }
  const auto ex = mean_std(exits);
  std::printf("trials: %lld\n", static_cast<long long>(ds.trials.size()));
  std::printf("travel distance (m): mean %.4f std %.4f\n", dist.mean, dist.std);
  std::printf("bounce duration from audio peaks (s): mean %.4f std %.4f\n", dur.mean, dur.std);
  std::printf("exit time (s): mean %.4f std %.4f\n", ex.mean, ex.std);
  if (silent) std::printf("recordings without a detectable impact: %lld\n", static_cast<long long>(silent));
}

void require_positive(double v, const char* flag) {
  if (!(v > 0)) throw UsageError(std::string(flag) + " must be positive");
}

}  // namespace

int main(int argc, char** argv) {
  // Activations are tens of MB; keep freed blocks in the heap instead of returning them
  // to the kernel and faulting fresh pages in on the next batch.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Audio-visual object permanence: simulate, train, evaluate, plot"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic drop dataset");
  Index sim_n = 0;
  std::uint64_t sim_seed = 0;
  std::string sim_preset = "desk", sim_object = "cube", sim_out;
  double sim_height = 0.30, sim_snr = 30.0;
  bool sim_noiseless = false;
  sim->add_option("--n", sim_n, "Number of trials")->required();
  sim->add_option("--seed", sim_seed, "Master seed");
  sim->add_option("--preset", sim_preset, "desk (8 kHz) or paper (48 kHz)")->check(CLI::IsMember({"desk", "paper"}));
  sim->add_option("--object", sim_object, "cube or triangle")->check(CLI::IsMember({"cube", "triangle"}));
  sim->add_option("--height", sim_height, "Release height in meters");
  sim->add_option("--snr", sim_snr, "Noise level in dB below the nominal first impact");
  sim->add_flag("--noiseless", sim_noiseless, "Synthesize without background noise");
  sim->add_option("--out", sim_out, "Output dataset directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train one model on a dataset");
  std::string tr_model, tr_data, tr_out, tr_curve;
  TrainConfig tr_cfg;
  std::uint64_t tr_split_seed = 0;
  tr->add_option("--model", tr_model, "multimodal, b2, b3, b4 or b5")->required();
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--curve", tr_curve, "Loss-curve CSV (default: <out>.curve.csv)");
  tr->add_option("--epochs", tr_cfg.epochs, "Epochs");
  tr->add_option("--lr", tr_cfg.lr, "Learning rate");
  tr->add_option("--beta1", tr_cfg.beta1, "Adam beta1");
  tr->add_option("--batch", tr_cfg.batch_size, "Batch size");
  tr->add_option("--seed", tr_cfg.seed, "Seed for initialisation and shuffling");
  tr->add_option("--split-seed", tr_split_seed, "Seed of the 8:1:1 split");

  // finetune
  auto* ft = app.add_subcommand("finetune", "k-fold finetuning of a trained model on a novel dataset");
  std::string ft_ckpt, ft_data, ft_report;
  FinetuneConfig ft_cfg;
  ft->add_option("--ckpt", ft_ckpt, "Pretrained checkpoint")->required();
  ft->add_option("--data", ft_data, "Novel dataset directory")->required();
  ft->add_option("--out", ft_report, "Summary report path");
  ft->add_option("--epochs", ft_cfg.epochs, "Epochs per fold");
  ft->add_option("--lr", ft_cfg.lr, "Learning rate");
  ft->add_option("--beta1", ft_cfg.beta1, "Adam beta1");
  ft->add_option("--folds", ft_cfg.folds, "Number of folds");
  ft->add_option("--seed", ft_cfg.seed, "Fold and shuffle seed");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a model on the test split");
  std::string ev_model, ev_data, ev_ckpt, ev_out, ev_split = "test";
  std::uint64_t ev_split_seed = 0;
  ev->add_option("--model", ev_model, "multimodal, b1 .. b5")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint (not needed for b1)");
  ev->add_option("--out", ev_out, "Metrics report path");
  ev->add_option("--split", ev_split, "test or all")->check(CLI::IsMember({"test", "all"}));
  ev->add_option("--split-seed", ev_split_seed, "Seed of the 8:1:1 split");

  // predict
  auto* pr = app.add_subcommand("predict", "Predict one trial's trajectory");
  std::string pr_model, pr_data, pr_ckpt, pr_trial, pr_svg, pr_csv;
  pr->add_option("--model", pr_model, "multimodal, b1 .. b5")->required();
  pr->add_option("--data", pr_data, "Dataset directory")->required();
  pr->add_option("--ckpt", pr_ckpt, "Checkpoint (not needed for b1)");
  pr->add_option("--trial", pr_trial, "Trial id or index")->required();
  pr->add_option("--svg", pr_svg, "Write a predicted-vs-true plot");
  pr->add_option("--csv", pr_csv, "Write predicted and true trajectories as CSV");

  // stats
  auto* st = app.add_subcommand("stats", "Summary statistics of a dataset");
  std::string st_data;
  st->add_option("--data", st_data, "Dataset directory")->required();

  // plot
  auto* pl = app.add_subcommand("plot", "Draw a figure as SVG");
  std::string pl_kind, pl_data, pl_out, pl_trial;
  std::vector<std::string> pl_ckpts;
  bool pl_out_of_view = false, pl_b1 = false;
  Index pl_bins = 30;
  pl->add_option("--kind", pl_kind, "traj, hexbin, hist-duration or hist-distance")
      ->required()
      ->check(CLI::IsMember({"traj", "hexbin", "hist-duration", "hist-distance"}));
  pl->add_option("--data", pl_data, "Dataset directory")->required();
  pl->add_option("--out", pl_out, "Output SVG")->required();
  pl->add_option("--trial", pl_trial, "Trial id or index (traj)");
  pl->add_option("--ckpt", pl_ckpts, "Checkpoints whose predictions to overlay (traj)");
  pl->add_flag("--b1", pl_b1, "Overlay the closed-form baseline (traj)");
  pl->add_flag("--out-of-view", pl_out_of_view, "Only trials that end outside the wrist-camera view (hexbin)");
  pl->add_option("--bins", pl_bins, "Histogram bins");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sim->parsed()) {
      if (sim_n < 1) throw UsageError("--n must be at least 1");
      require_positive(sim_height, "--height");
      const Preset preset = parse_preset(sim_preset);
      SimConfig cfg = SimConfig::for_preset(preset);
      cfg.object = parse_object_kind(sim_object);
      cfg.release_height = sim_height;
      cfg.snr_db = sim_noiseless ? std::nullopt : std::optional<double>(sim_snr);
      try {
        cfg.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      if (fs::exists(sim_out) && !fs::is_empty(sim_out)) throw UsageError(sim_out + " exists and is not empty");
      log(LogLevel::info, "simulating " + std::to_string(sim_n) + " trials");
      const auto raw = generate_dataset(cfg, sim_n, sim_seed);
      std::vector<Trial> trials;
      for (std::size_t i = 0; i < raw.size(); ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "trial_%05zu", i);
        trials.push_back(make_trial(raw[i], id));
      }
      write_dataset(trials, manifest_for(cfg, preset, trials, sim_seed), sim_out);
      print_summary(read_dataset(sim_out));
      return 0;
    }

    if (tr->parsed()) {
      const ModelKind kind = model_flag(tr_model);
      if (!is_trainable(kind)) throw UsageError(std::string(to_string(kind)) + ": model has no trainable parameters");
      try {
        tr_cfg.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const Dataset ds = read_dataset(tr_data);
      const Split split = split_dataset(static_cast<Index>(ds.trials.size()), tr_split_seed);
      auto net = make_network<float>(kind, model_config_for(ds.manifest, tr_cfg.seed));
      log(LogLevel::info, std::string("training ") + to_string(kind) + " (" + std::to_string(net->params().count()) +
                              " parameters) on " + std::to_string(split.train.size()) + " trials");
      const auto result = train(*net, ds, split, tr_cfg, [](const EpochRecord& r) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "epoch %3d  train_mse %.6g  val_mse %.6g", r.epoch, r.train_mse, r.val_mse);
        log(LogLevel::info, buf);
      });
      write_checkpoint(tr_out, result.best);
      std::string curve = "epoch,train_mse,val_mse\n";
      for (const auto& r : result.curve) {
        curve += std::to_string(r.epoch) + "," + format_double(r.train_mse) + "," + format_double(r.val_mse) + "\n";
      }
      write_text(tr_curve.empty() ? tr_out + ".curve.csv" : tr_curve, curve);
      std::printf("best epoch %d, validation mse %.6g\n", result.best_epoch, result.best_val_mse);
      return 0;
    }

    if (ft->parsed()) {
      try {
        ft_cfg.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const Checkpoint ckpt = read_checkpoint(ft_ckpt);
      const Dataset ds = read_dataset(ft_data);
      const auto result = finetune<float>(ckpt, ds, ft_cfg);
      std::string text = "# opnet finetune report\nmodel = " + std::string(to_string(ckpt.kind)) + "\n";
      text += "folds = " + std::to_string(result.folds.size()) + "\n";
      text += "zero_shot_displacement_cm = " + format_double(result.zero_shot_displacement.mean) + " +- " +
              format_double(result.zero_shot_displacement.std) + "\n";
      text += "finetuned_displacement_cm = " + format_double(result.finetuned_displacement.mean) + " +- " +
              format_double(result.finetuned_displacement.std) + "\n";
      text += "zero_shot_success_rate = " + format_double(result.zero_shot_success.mean) + " +- " +
              format_double(result.zero_shot_success.std) + "\n";
      text += "finetuned_success_rate = " + format_double(result.finetuned_success.mean) + " +- " +
              format_double(result.finetuned_success.std) + "\n";
      text += "\nfold,trials,zero_shot_displacement_cm,finetuned_displacement_cm,zero_shot_success_rate,"
              "finetuned_success_rate\n";
      for (std::size_t f = 0; f < result.folds.size(); ++f) {
        const auto& r = result.folds[f];
        text += std::to_string(f) + "," + std::to_string(r.held_out.size()) + "," +
                format_double(r.zero_shot.mean_displacement_cm) + "," + format_double(r.finetuned.mean_displacement_cm) +
                "," + format_double(r.zero_shot.success_rate) + "," + format_double(r.finetuned.success_rate) + "\n";
      }
      if (!ft_report.empty()) write_text(ft_report, text);
      std::fputs(text.c_str(), stdout);
      return 0;
    }

    if (ev->parsed()) {
      const ModelKind kind = model_flag(ev_model);
      const Dataset ds = read_dataset(ev_data);
      const auto rows = ev_split == "all" ? all_rows(ds)
                                          : split_dataset(static_cast<Index>(ds.trials.size()), ev_split_seed).test;
      const auto report = evaluate(run_model(kind, ev_ckpt, ds, rows), ground_truth(ds, rows), ds.manifest.fov,
                                   ds.manifest.cm_per_unit);
      if (!ev_out.empty()) write_report(ev_out, report);
      std::printf("%s: success_rate %.4f  mean_displacement_cm %.3f  median_displacement_cm %.3f  (%lld trials)\n",
                  report.model.c_str(), report.success_rate, report.mean_displacement_cm,
                  report.median_displacement_cm, static_cast<long long>(report.trials));
      return 0;
    }

    if (pr->parsed()) {
      const ModelKind kind = model_flag(pr_model);
      const Dataset ds = read_dataset(pr_data);
      const Index row = find_trial(ds, pr_trial);
      const auto pred = run_model(kind, pr_ckpt, ds, {row}).front();
      const Trajectory truth = normalize_trajectory(ds.trials[static_cast<std::size_t>(row)].complete);
      std::string csv = "step,pred_x,pred_y,true_x,true_y\n";
      for (Index i = 0; i < kCompleteSteps; ++i) {
        csv += std::to_string(i) + "," + format_double(pred.trajectory(i, 0)) + "," +
               format_double(pred.trajectory(i, 1)) + "," + format_double(truth(i, 0)) + "," +
               format_double(truth(i, 1)) + "\n";
      }
      if (!pr_csv.empty()) write_text(pr_csv, csv);
      if (!pr_svg.empty()) {
        write_text(pr_svg, svg_trajectories({{"ground truth", truth, "#2ca02c", false},
                                             {to_string(kind), pred.trajectory, "#d62728", true}},
                                            "trial " + pred.trial_id));
      }
      const Vec2 err = pred.end_location - truth.row(kCompleteSteps - 1).transpose();
      std::printf("trial %s: predicted end (%.4f, %.4f), true end (%.4f, %.4f), displacement %.3f cm\n",
                  pred.trial_id.c_str(), pred.end_location.x(), pred.end_location.y(), truth(kCompleteSteps - 1, 0),
                  truth(kCompleteSteps - 1, 1), err.norm() * ds.manifest.cm_per_unit);
      return 0;
    }

    if (st->parsed()) {
      print_summary(read_dataset(st_data));
      return 0;
    }

    if (pl->parsed()) {
      const Dataset ds = read_dataset(pl_data);
      if (ds.trials.empty()) throw std::runtime_error(pl_data + ": dataset is empty");
      std::string svg;
      if (pl_kind == "traj") {
        if (pl_trial.empty()) throw UsageError("--kind traj needs --trial");
        const Index row = find_trial(ds, pl_trial);
        const auto& t = ds.trials[static_cast<std::size_t>(row)];
        std::vector<Series> series{{"observed", normalize_trajectory(t.observed), "#7f7f7f", false},
                                   {"ground truth", normalize_trajectory(t.complete), "#2ca02c", false}};
        static const char* colors[] = {"#d62728", "#1f77b4", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2"};
        std::size_t k = 0;
        if (pl_b1) {
          series.push_back({"b1_linear", predict_b1(ds, {row}).front().trajectory, colors[k++ % 6], true});
        }
        for (const auto& path : pl_ckpts) {
          const Checkpoint ckpt = read_checkpoint(path);
          series.push_back({to_string(ckpt.kind), run_model(ckpt.kind, path, ds, {row}).front().trajectory,
                            colors[k++ % 6], true});
        }
        svg = svg_trajectories(series, "trial " + t.id);
      } else if (pl_kind == "hexbin") {
        const Rect table;
        const Rect view{-ds.manifest.fov.width / 2, ds.manifest.fov.width / 2, -ds.manifest.fov.height / 2,
                        ds.manifest.fov.height / 2};
        std::vector<Vec2> ends;
        for (const auto& t : ds.trials) {
          const Vec2 start = t.complete.row(0).transpose();
          if (pl_out_of_view && ds.manifest.fov.contains(start, t.end_location)) continue;
          ends.push_back(t.end_location - start);
        }
        if (ends.empty()) throw std::runtime_error("no end locations to plot");
        svg = svg_hexbin(hexbin(ends, table), "end locations relative to release", view);
      } else {
        const bool duration = pl_kind == "hist-duration";
        const auto values = duration ? peak_durations(ds) : travel_distances(ds);
        if (values.empty()) throw std::runtime_error("no values to plot");
        svg = svg_histogram(values, pl_bins, duration ? "bounce duration" : "travel distance",
                            duration ? "seconds" : "meters");
      }
      write_text(pl_out, svg);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
