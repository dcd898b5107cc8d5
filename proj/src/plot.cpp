#include "opnet/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace opnet {

namespace {

constexpr double kWidth = 640, kHeight = 480;
constexpr double kLeft = 60, kRight = 150, kTop = 40, kBottom = 50;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Maps data coordinates into the plot area, y up.
struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

Frame padded(double x0, double x1, double y0, double y1) {
  if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
  if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
  const double mx = 0.05 * (x1 - x0), my = 0.05 * (y1 - y0);
  return {x0 - mx, x1 + mx, y0 - my, y1 + my};
}

void header(std::ostringstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
}

void axes(std::ostringstream& os, const Frame& f, const std::string& x_label, const std::string& y_label) {
  const double left = kLeft, right = kWidth - kRight, top = kTop, bottom = kHeight - kBottom;
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << right - left << "\" height=\"" << bottom - top
     << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4, yv = f.y0 + (f.y1 - f.y0) * i / 4;
    os << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << bottom + 16 << "\" text-anchor=\"middle\">" << num(xv)
       << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
       << "</text>\n";
  }
  os << "<text x=\"" << (left + right) / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
     << escape(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << (top + bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (top + bottom) / 2 << ")\">" << escape(y_label) << "</text>\n";
}

// Light-to-dark blue ramp for t in [0, 1].
std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(222 - t * (222 - 8)));
  const int g = static_cast<int>(std::lround(235 - t * (235 - 48)));
  const int b = static_cast<int>(std::lround(247 - t * (247 - 107)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

std::string svg_trajectories(const std::vector<Series>& series, const std::string& title) {
  if (series.empty()) throw std::invalid_argument("svg_trajectories: nothing to plot");
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.points.rows() == 0) throw std::invalid_argument("svg_trajectories: series '" + s.label + "' is empty");
    x0 = std::min(x0, s.points.col(0).minCoeff());
    x1 = std::max(x1, s.points.col(0).maxCoeff());
    y0 = std::min(y0, s.points.col(1).minCoeff());
    y1 = std::max(y1, s.points.col(1).maxCoeff());
  }
  const Frame f = padded(x0, x1, y0, y1);
  std::ostringstream os, legend;
  header(os, title);
  axes(os, f, "x", "y");
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\"";
    if (s.dashed) os << " stroke-dasharray=\"6 4\"";
    os << " points=\"";
    for (Index k = 0; k < s.points.rows(); ++k) {
      os << (k ? " " : "") << num(f.px(s.points(k, 0))) << "," << num(f.py(s.points(k, 1)));
    }
    os << "\"/>\n";
    const Index last = s.points.rows() - 1;
    os << "<circle cx=\"" << num(f.px(s.points(last, 0))) << "\" cy=\"" << num(f.py(s.points(last, 1)))
       << "\" r=\"4\" fill=\"" << s.color << "\"/>\n";
    const double ly = kTop + 10 + 20 * static_cast<double>(i), lx = kWidth - kRight + 12;
    legend << "<line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx + 22 << "\" y2=\"" << ly << "\" stroke=\""
           << s.color << "\" stroke-width=\"2\"" << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
    legend << "<text x=\"" << lx + 28 << "\" y=\"" << ly + 4 << "\">" << escape(s.label) << "</text>\n";
  }
  os << "<g class=\"legend\">\n" << legend.str() << "</g>\n";
  os << "</svg>\n";
  return os.str();
}

bool HexGrid::inside(const HexCell& cell, const Rect& r) const {
  const double rx = dx / 2, ry = 2 * dy / 3;  // half-width and circumradius in y
  return cell.center.x() - rx >= r.x_min && cell.center.x() + rx <= r.x_max && cell.center.y() - ry >= r.y_min &&
         cell.center.y() + ry <= r.y_max;
}

HexGrid hexbin(const std::vector<Vec2>& points, const Rect& bounds, Index columns, Index rows) {
  if (columns < 1 || rows < 1) throw std::invalid_argument("hexbin: grid must have at least one cell");
  HexGrid g;
  g.bounds = bounds;
  g.columns = columns;
  g.rows = rows;
  g.dx = bounds.width() / static_cast<double>(columns);
  g.dy = bounds.height() / static_cast<double>(rows);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < columns; ++c) {
      const double shift = (r % 2) ? 0.5 : 0.0;
      g.cells.push_back({Vec2(bounds.x_min + (c + 0.25 + shift) * g.dx, bounds.y_min + (r + 0.5) * g.dy), 0});
    }
  }
  // Nearest centre in a metric where the lattice is regular hexagonal.
  const double sy = g.dx * std::sqrt(3.0) / 2 / g.dy;
  for (const auto& p : points) {
    if (!bounds.contains(p)) continue;
    const Index r0 = std::clamp<Index>(static_cast<Index>((p.y() - bounds.y_min) / g.dy), 0, rows - 1);
    Index best = -1;
    double best_d = INFINITY;
    for (Index r = std::max<Index>(0, r0 - 1); r <= std::min(rows - 1, r0 + 1); ++r) {
      const double shift = (r % 2) ? 0.5 : 0.0;
      const Index c0 = static_cast<Index>(std::floor((p.x() - bounds.x_min) / g.dx - 0.25 - shift));
      for (Index c = std::max<Index>(0, c0 - 1); c <= std::min(columns - 1, c0 + 1); ++c) {
        const auto& cell = g.cells[static_cast<std::size_t>(r * columns + c)];
        const double ex = p.x() - cell.center.x(), ey = (p.y() - cell.center.y()) * sy;
        const double d = ex * ex + ey * ey;
        if (d < best_d) best_d = d, best = r * columns + c;
      }
    }
    if (best >= 0) ++g.cells[static_cast<std::size_t>(best)].count;
  }
  return g;
}

std::string svg_hexbin(const HexGrid& grid, const std::string& title, const std::optional<Rect>& outline) {
  const Rect& b = grid.bounds;
  const Frame f{b.x_min, b.x_max, b.y_min, b.y_max};
  Index max_count = 0;
  for (const auto& c : grid.cells) max_count = std::max(max_count, c.count);
  std::ostringstream os;
  header(os, title);
  axes(os, f, "x (m)", "y (m)");
  const double rx = grid.dx / 2, ry = 2 * grid.dy / 3;
  for (const auto& c : grid.cells) {
    if (c.count == 0) continue;
    os << "<polygon fill=\"" << ramp(static_cast<double>(c.count) / static_cast<double>(max_count)) << "\" points=\"";
    for (int k = 0; k < 6; ++k) {
      const double a = std::numbers::pi / 6 + k * std::numbers::pi / 3;
      os << (k ? " " : "") << num(f.px(c.center.x() + rx / std::cos(std::numbers::pi / 6) * std::cos(a)))
         << "," << num(f.py(c.center.y() + ry * std::sin(a)));
    }
    os << "\"><title>" << c.count << "</title></polygon>\n";
  }
  if (outline) {
    os << "<rect x=\"" << num(f.px(outline->x_min)) << "\" y=\"" << num(f.py(outline->y_max)) << "\" width=\""
       << num(f.px(outline->x_max) - f.px(outline->x_min)) << "\" height=\""
       << num(f.py(outline->y_min) - f.py(outline->y_max)) << "\" fill=\"none\" stroke=\"#d62728\" stroke-dasharray=\"4 3\"/>\n";
  }
  const double lx = kWidth - kRight + 16;
  for (int i = 0; i <= 4; ++i) {
    const double t = i / 4.0;
    os << "<rect x=\"" << lx << "\" y=\"" << kTop + 20 * i << "\" width=\"16\" height=\"16\" fill=\"" << ramp(t)
       << "\"/>\n";
    os << "<text x=\"" << lx + 22 << "\" y=\"" << kTop + 20 * i + 12 << "\">"
       << static_cast<Index>(std::lround(t * static_cast<double>(max_count))) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<double> gaussian_kde(const std::vector<double>& samples, const std::vector<double>& x) {
  if (samples.empty()) throw std::invalid_argument("gaussian_kde: no samples");
  const double n = static_cast<double>(samples.size());
  double mean = 0;
  for (double s : samples) mean += s;
  mean /= n;
  double var = 0;
  for (double s : samples) var += (s - mean) * (s - mean);
  const double sd = samples.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  double h = 1.06 * sd * std::pow(n, -0.2);
  if (!(h > 0)) h = 1e-3;
  std::vector<double> out;
  out.reserve(x.size());
  const double norm = 1.0 / (n * h * std::sqrt(2 * std::numbers::pi));
  for (double xv : x) {
    double acc = 0;
    for (double s : samples) {
      const double u = (xv - s) / h;
      acc += std::exp(-0.5 * u * u);
    }
    out.push_back(acc * norm);
  }
  return out;
}

std::string svg_histogram(const std::vector<double>& values, Index bins, const std::string& title,
                          const std::string& x_label) {
  if (values.empty()) throw std::invalid_argument("svg_histogram: no values");
  if (bins < 1) throw std::invalid_argument("svg_histogram: bins must be positive");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (!(hi > lo)) lo -= 0.5, hi += 0.5;
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<double> density(static_cast<std::size_t>(bins), 0.0);
  for (double v : values) {
    const auto b = std::min<Index>(bins - 1, static_cast<Index>((v - lo) / width));
    density[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& d : density) d /= static_cast<double>(values.size()) * width;

  std::vector<double> xs;
  for (int i = 0; i <= 200; ++i) xs.push_back(lo + (hi - lo) * i / 200.0);
  const auto kde = gaussian_kde(values, xs);
  const double top = std::max(*std::max_element(density.begin(), density.end()), *std::max_element(kde.begin(), kde.end()));
  const Frame f{lo, hi, 0.0, top * 1.1};

  std::ostringstream os;
  header(os, title);
  axes(os, f, x_label, "density");
  for (Index b = 0; b < bins; ++b) {
    const double x0 = lo + b * width, d = density[static_cast<std::size_t>(b)];
    os << "<rect x=\"" << num(f.px(x0)) << "\" y=\"" << num(f.py(d)) << "\" width=\"" << num(f.px(x0 + width) - f.px(x0))
       << "\" height=\"" << num(f.py(0) - f.py(d)) << "\" fill=\"#9ecae1\" stroke=\"white\"/>\n";
  }
  os << "<polyline fill=\"none\" stroke=\"#08306b\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? " " : "") << num(f.px(xs[i])) << "," << num(f.py(kde[i]));
  os << "\"/>\n";
  const double lx = kWidth - kRight + 12;
  os << "<rect x=\"" << lx << "\" y=\"" << kTop + 4 << "\" width=\"16\" height=\"12\" fill=\"#9ecae1\"/>\n";
  os << "<text x=\"" << lx + 22 << "\" y=\"" << kTop + 14 << "\">histogram</text>\n";
  os << "<line x1=\"" << lx << "\" y1=\"" << kTop + 30 << "\" x2=\"" << lx + 16 << "\" y2=\"" << kTop + 30
     << "\" stroke=\"#08306b\" stroke-width=\"2\"/>\n";
  os << "<text x=\"" << lx + 22 << "\" y=\"" << kTop + 34 << "\">KDE</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace opnet
