#include "opnet/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace opnet {

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(std::string_view text) {
  double v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw std::invalid_argument("not a number: '" + std::string(text) + "'");
  }
  return v;
}

bool fov_success(const Vec2& predicted, const Vec2& truth, const FovSpec& fov) {
  return fov.contains(predicted, truth);
}

MetricsReport evaluate(const std::vector<PredictionResult>& predictions, const std::vector<GroundTruth>& truth,
                       const FovSpec& fov, double cm_per_unit) {
  fov.validate();
  if (!(cm_per_unit > 0) || !std::isfinite(cm_per_unit)) throw std::invalid_argument("evaluate: scale must be positive");
  if (predictions.empty()) throw std::invalid_argument("evaluate: no predictions");
  if (predictions.size() != truth.size()) {
    throw std::invalid_argument("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(truth.size()) + " ground-truth trials");
  }
  std::map<std::string, Vec2> by_id;
  for (const auto& t : truth) {
    if (!by_id.emplace(t.trial_id, t.end_location).second) {
      throw std::invalid_argument("evaluate: duplicate ground-truth trial " + t.trial_id);
    }
  }

  MetricsReport r;
  r.model = to_string(predictions.front().model);
  r.fov = fov;
  r.cm_per_unit = cm_per_unit;
  std::vector<double> displacements;
  for (const auto& p : predictions) {
    const auto it = by_id.find(p.trial_id);
    if (it == by_id.end()) throw std::invalid_argument("evaluate: no ground truth for trial " + p.trial_id);
    TrialMetric m{p.trial_id, (p.end_location - it->second).norm() * cm_per_unit,
                  fov_success(p.end_location, it->second, fov)};
    by_id.erase(it);
    r.successes += m.success ? 1 : 0;
    displacements.push_back(m.displacement_cm);
    r.per_trial.push_back(std::move(m));
  }
  r.trials = static_cast<Index>(r.per_trial.size());
  r.success_rate = static_cast<double>(r.successes) / static_cast<double>(r.trials);
  r.mean_displacement_cm = mean_std(displacements).mean;
  std::sort(displacements.begin(), displacements.end());
  const std::size_t n = displacements.size();
  r.median_displacement_cm = n % 2 ? displacements[n / 2] : 0.5 * (displacements[n / 2 - 1] + displacements[n / 2]);
  return r;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::string format_report(const MetricsReport& r) {
  std::ostringstream os;
  os << "# opnet metrics report\n";
  os << "model = " << r.model << "\n";
  os << "trials = " << r.trials << "\n";
  os << "successes = " << r.successes << "\n";
  os << "success_rate = " << format_double(r.success_rate) << "\n";
  os << "mean_displacement_cm = " << format_double(r.mean_displacement_cm) << "\n";
  os << "median_displacement_cm = " << format_double(r.median_displacement_cm) << "\n";
  os << "fov_width = " << format_double(r.fov.width) << "\n";
  os << "fov_height = " << format_double(r.fov.height) << "\n";
  os << "cm_per_unit = " << format_double(r.cm_per_unit) << "\n";
  os << "\ntrial_id,displacement_cm,success\n";
  for (const auto& m : r.per_trial) {
    os << m.trial_id << "," << format_double(m.displacement_cm) << "," << (m.success ? 1 : 0) << "\n";
  }
  return os.str();
}

MetricsReport parse_report(const std::string& text) {
  MetricsReport r;
  std::istringstream is(text);
  std::string line;
  bool table = false;
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!table) {
      if (line == "trial_id,displacement_cm,success") {
        table = true;
        continue;
      }
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) throw std::invalid_argument("report: malformed line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 3);
      continue;
    }
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw std::invalid_argument("report: malformed row '" + line + "'");
    const std::string flag = line.substr(b + 1);
    if (flag != "0" && flag != "1") throw std::invalid_argument("report: bad success flag in '" + line + "'");
    r.per_trial.push_back({line.substr(0, a), parse_double(line.substr(a + 1, b - a - 1)), flag == "1"});
  }
  const auto get = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("report: missing key ") + key);
    return it->second;
  };
  r.model = get("model");
  r.trials = std::stoll(get("trials"));
  r.successes = std::stoll(get("successes"));
  r.success_rate = parse_double(get("success_rate"));
  r.mean_displacement_cm = parse_double(get("mean_displacement_cm"));
  r.median_displacement_cm = parse_double(get("median_displacement_cm"));
  r.fov.width = parse_double(get("fov_width"));
  r.fov.height = parse_double(get("fov_height"));
  r.cm_per_unit = parse_double(get("cm_per_unit"));
  if (static_cast<Index>(r.per_trial.size()) != r.trials) {
    throw std::invalid_argument("report: header says " + std::to_string(r.trials) + " trials, table has " +
                                std::to_string(r.per_trial.size()));
  }
  return r;
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << format_report(report);
  if (!os) throw std::runtime_error(path.string() + ": write failed");
}

MetricsReport read_report(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path.string() + ": cannot open report");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_report(ss.str());
}

}  // namespace opnet
