// Copyright 2026 The dglab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dglab/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

#include <Eigen/Dense>

#include "dglab/error.hpp"

namespace dglab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

double nice_step(double range, int target) {
  const double raw = range / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double f = raw / mag;
  return (f < 1.5 ? 1 : f < 3 ? 2 : f < 7 ? 5 : 10) * mag;
}

// Plot frame with linear axes.
class Canvas {
 public:
  Canvas(double w, double h, std::string title) : w_(w), h_(h) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" viewBox=\"0 0 " << w << ' ' << h << "\" font-family=\"sans-serif\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
        << escape(title) << "</text>\n";
  }

  void set_range(double x0, double x1, double y0, double y1) {
    if (!(x1 > x0)) { x0 -= 0.5; x1 += 0.5; }
    if (!(y1 > y0)) { y0 -= 0.5; y1 += 0.5; }
    const double px = 0.04 * (x1 - x0), py = 0.06 * (y1 - y0);
    x0_ = x0 - px; x1_ = x1 + px; y0_ = y0 - py; y1_ = y1 + py;
  }

  double X(double x) const { return left_ + (x - x0_) / (x1_ - x0_) * (w_ - left_ - right_); }
  double Y(double y) const { return h_ - bottom_ - (y - y0_) / (y1_ - y0_) * (h_ - top_ - bottom_); }

  void axes(const std::string& xlabel, const std::string& ylabel) {
    os_ << "<rect x=\"" << left_ << "\" y=\"" << top_ << "\" width=\"" << w_ - left_ - right_
        << "\" height=\"" << h_ - top_ - bottom_ << "\" fill=\"none\" stroke=\"#333\"/>\n";
    const double sx = nice_step(x1_ - x0_, 6), sy = nice_step(y1_ - y0_, 5);
    for (double t = std::ceil(x0_ / sx) * sx; t <= x1_; t += sx) {
      os_ << "<line x1=\"" << num(X(t)) << "\" y1=\"" << h_ - bottom_ << "\" x2=\"" << num(X(t))
          << "\" y2=\"" << h_ - bottom_ + 5 << "\" stroke=\"#333\"/>"
          << "<text x=\"" << num(X(t)) << "\" y=\"" << h_ - bottom_ + 18
          << "\" text-anchor=\"middle\" font-size=\"11\">" << tick_label(t) << "</text>\n";
    }
    for (double t = std::ceil(y0_ / sy) * sy; t <= y1_; t += sy) {
      os_ << "<line x1=\"" << left_ - 5 << "\" y1=\"" << num(Y(t)) << "\" x2=\"" << left_
          << "\" y2=\"" << num(Y(t)) << "\" stroke=\"#333\"/>"
          << "<text x=\"" << left_ - 8 << "\" y=\"" << num(Y(t) + 4)
          << "\" text-anchor=\"end\" font-size=\"11\">" << tick_label(t) << "</text>\n";
    }
    os_ << "<text x=\"" << (left_ + w_ - right_) / 2 << "\" y=\"" << h_ - 12
        << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xlabel) << "</text>\n"
        << "<text x=\"16\" y=\"" << (top_ + h_ - bottom_) / 2
        << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
        << (top_ + h_ - bottom_) / 2 << ")\">" << escape(ylabel) << "</text>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                bool dashed = false) {
    if (pts.empty()) return;
    os_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.4\""
        << (dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
    for (const auto& [x, y] : pts) os_ << num(X(x)) << ',' << num(Y(y)) << ' ';
    os_ << "\"/>\n";
  }

  void marker(double px, double py, int shape, const std::string& color) {
    const double r = 4.0;
    switch (shape % 4) {
      case 0:
        os_ << "<circle cx=\"" << num(px) << "\" cy=\"" << num(py) << "\" r=\"" << r
            << "\" fill=\"" << color << "\" fill-opacity=\"0.75\"/>\n";
        break;
      case 1:
        os_ << "<polygon points=\"" << num(px) << ',' << num(py - r - 1) << ' ' << num(px - r - 1)
            << ',' << num(py + r) << ' ' << num(px + r + 1) << ',' << num(py + r) << "\" fill=\""
            << color << "\" fill-opacity=\"0.75\"/>\n";
        break;
      case 2:
        os_ << "<rect x=\"" << num(px - r) << "\" y=\"" << num(py - r) << "\" width=\"" << 2 * r
            << "\" height=\"" << 2 * r << "\" fill=\"" << color << "\" fill-opacity=\"0.75\"/>\n";
        break;
      default:
        os_ << "<polygon points=\"" << num(px) << ',' << num(py - r - 1) << ' ' << num(px + r + 1)
            << ',' << num(py) << ' ' << num(px) << ',' << num(py + r + 1) << ' ' << num(px - r - 1)
            << ',' << num(py) << "\" fill=\"none\" stroke=\"" << color << "\"/>\n";
    }
  }

  void point(double x, double y, int shape, const std::string& color) {
    marker(X(x), Y(y), shape, color);
  }

  void legend_line(int row, const std::string& label, const std::string& color, int shape,
                   bool line, bool dashed = false) {
    const double lx = w_ - right_ + 14, ly = top_ + 10 + 18 * row;
    if (line) {
      os_ << "<line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx + 18 << "\" y2=\"" << ly
          << "\" stroke=\"" << color << "\" stroke-width=\"2\""
          << (dashed ? " stroke-dasharray=\"5,3\"" : "") << "/>\n";
    } else {
      marker(lx + 9, ly, shape, color);
    }
    os_ << "<text x=\"" << lx + 24 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">"
        << escape(label) << "</text>\n";
  }

  void set_right_margin(double r) { right_ = r; }

  void save(const fs::path& p) {
    os_ << "</svg>\n";
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw ConfigError("cannot write " + p.string());
    f << os_.str();
  }

 private:
  double w_, h_;
  double left_ = 64, right_ = 20, top_ = 36, bottom_ = 48;
  double x0_ = 0, x1_ = 1, y0_ = 0, y1_ = 1;
  std::ostringstream os_;
};

template <class F>
void bounds(const std::vector<NamedLog>& logs, F value, double& lo, double& hi,
            double& steps) {
  lo = std::numeric_limits<double>::infinity();
  hi = -lo;
  steps = 1;
  for (const auto& l : logs) {
    for (const auto& r : l.records) {
      const auto v = value(r);
      if (!v) continue;
      lo = std::min(lo, *v);
      hi = std::max(hi, *v);
      steps = std::max(steps, static_cast<double>(r.step));
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
}

}  // namespace

std::vector<std::array<double, 2>> pca_2d(const FeatureDump& dump) {
  const auto n = static_cast<Eigen::Index>(dump.rows());
  const auto d = static_cast<Eigen::Index>(dump.dim);
  std::vector<std::array<double, 2>> out(dump.rows(), {0.0, 0.0});
  if (n < 2) return out;
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = dump.row(static_cast<std::size_t>(r));
    for (Eigen::Index c = 0; c < d; ++c) X(r, c) = row[static_cast<std::size_t>(c)];
  }
  X.rowwise() -= X.colwise().mean();
  // Gram-matrix route: rows are few, feature dimension is large.
  const Eigen::MatrixXd G = X * X.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  for (int k = 0; k < 2 && k < n; ++k) {
    const Eigen::Index col = n - 1 - k;
    Eigen::VectorXd u = es.eigenvectors().col(col);
    Eigen::Index imax;
    u.cwiseAbs().maxCoeff(&imax);
    if (u(imax) < 0) u = -u;
    const double s = std::sqrt(std::max(es.eigenvalues()(col), 0.0));
    for (Eigen::Index r = 0; r < n; ++r) out[static_cast<std::size_t>(r)][k] = u(r) * s;
  }
  return out;
}

void plot_embedding(const FeatureDump& dump, const fs::path& svg, const std::string& title) {
  const auto pts = pca_2d(dump);
  std::map<int, int> domain_colour;
  std::map<std::string, int> run_marker;
  for (const auto& l : dump.labels) {
    domain_colour.emplace(l.domain_id, static_cast<int>(domain_colour.size()));
    run_marker.emplace(l.run, static_cast<int>(run_marker.size()));
  }
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    x0 = i ? std::min(x0, pts[i][0]) : pts[i][0];
    x1 = i ? std::max(x1, pts[i][0]) : pts[i][0];
    y0 = i ? std::min(y0, pts[i][1]) : pts[i][1];
    y1 = i ? std::max(y1, pts[i][1]) : pts[i][1];
  }
  Canvas c(760, 520, title);
  c.set_right_margin(170);
  c.set_range(x0, x1, y0, y1);
  c.axes("PC 1", "PC 2");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& l = dump.labels[i];
    c.point(pts[i][0], pts[i][1], run_marker[l.run], kPalette[domain_colour[l.domain_id] % 8]);
  }
  int row = 0;
  for (const auto& [k, ci] : domain_colour)
    c.legend_line(row++, "domain " + std::to_string(k), kPalette[ci % 8], 0, false);
  for (const auto& [run, mi] : run_marker)
    c.legend_line(row++, run.empty() ? "run" : run, "#444", mi, false);
  c.save(svg);
}

void plot_loss_curves(const std::vector<NamedLog>& logs, const fs::path& svg) {
  double lo, hi, steps;
  bounds(logs, [](const RunRecord& r) { return std::optional<double>(r.total); }, lo, hi, steps);
  double lo2, hi2, s2;
  bounds(logs, [](const RunRecord& r) { return std::optional<double>(r.L_stu_src); }, lo2, hi2, s2);
  Canvas c(760, 460, "training losses");
  c.set_right_margin(190);
  c.set_range(0, steps, std::min({lo, lo2, 0.0}), std::max(hi, hi2));
  c.axes("step", "loss");
  int row = 0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    std::vector<std::pair<double, double>> total, src;
    for (const auto& r : logs[i].records) {
      total.emplace_back(static_cast<double>(r.step), r.total);
      src.emplace_back(static_cast<double>(r.step), r.L_stu_src);
    }
    const std::string colour = kPalette[i % 8];
    c.polyline(total, colour);
    c.polyline(src, colour, true);
    c.legend_line(row++, logs[i].name + " total", colour, 0, true);
    c.legend_line(row++, logs[i].name + " L_stu_src", colour, 0, true, true);
  }
  c.save(svg);
}

void plot_gate_rate(const std::vector<NamedLog>& logs, const fs::path& svg, int window) {
  if (window < 1) throw ConfigError("gate-rate window must be >= 1");
  double lo, hi, steps;
  bounds(logs, [](const RunRecord&) { return std::optional<double>(0.0); }, lo, hi, steps);
  Canvas c(760, 460, "teacher update rate (window " + std::to_string(window) + ")");
  c.set_right_margin(190);
  c.set_range(0, steps, 0, 1);
  c.axes("step", "fraction of steps updating the teacher");
  int row = 0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    std::vector<std::pair<double, double>> pts;
    std::vector<int> open;
    for (const auto& r : logs[i].records) {
      if (!r.gate) continue;
      open.push_back(r.gate->updated ? 1 : 0);
      const std::size_t w = std::min<std::size_t>(open.size(), static_cast<std::size_t>(window));
      double sum = 0;
      for (std::size_t k = open.size() - w; k < open.size(); ++k) sum += open[k];
      pts.emplace_back(static_cast<double>(r.step), sum / static_cast<double>(w));
    }
    if (pts.empty()) continue;
    c.polyline(pts, kPalette[i % 8]);
    c.legend_line(row++, logs[i].name, kPalette[i % 8], 0, true);
  }
  c.save(svg);
}

}  // namespace dglab
