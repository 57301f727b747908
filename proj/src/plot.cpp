#include "locus/errors.hpp"
#include "locus/harness.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace locus {

namespace {

struct Point {
  double sum = 0.0;
  int n = 0;
  double mean() const { return sum / n; }
};

std::string series_name(const EvalReport& r) {
  std::string s = r.regime + " " + r.mode;
  if (r.imputation != "corrupt-passthrough") s += " +" + r.imputation;
  return s;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {
    out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" "
         << "font-family=\"sans-serif\" font-size=\"12\">\n"
         << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& color, double width = 1.0,
            const std::string& dash = "") {
    out_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2 << "\" stroke=\"" << color
         << "\" stroke-width=\"" << width << "\"";
    if (!dash.empty()) out_ << " stroke-dasharray=\"" << dash << "\"";
    out_ << "/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "start") {
    out_ << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor << "\">" << escape(s) << "</text>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& color) {
    out_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h << "\" fill=\"" << color
         << "\"/>\n";
  }
  void circle(double x, double y, const std::string& color) {
    out_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3\" fill=\"" << color << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color) {
    out_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : pts) out_ << x << "," << y << " ";
    out_ << "\"/>\n";
  }
  void save(const std::filesystem::path& p) {
    out_ << "</svg>\n";
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw DataError("cannot write plot: " + p.string());
    f << out_.str();
  }
  double width() const { return w_; }
  double height() const { return h_; }

 private:
  double w_, h_;
  std::ostringstream out_;
};

double nice_ceiling(double v) {
  if (!(v > 0.0)) return 1.0;
  const double p = std::pow(10.0, std::floor(std::log10(v)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * p >= v) return m * p;
  }
  return 10.0 * p;
}

}  // namespace

std::vector<std::filesystem::path> plot_results(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("results directory not found: " + dir.string());
  std::vector<EvalReport> reports;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".json") continue;
    try {
      reports.push_back(read_report(e.path()));
    } catch (const DataError&) {
      // config.json, timing.json and other non-report files
    }
  }
  if (reports.empty()) throw DataError("no evaluation reports under " + dir.string());

  // series -> mdp -> E_DoA averaged over seeds
  std::map<std::string, std::map<double, Point>> series;
  std::optional<double> clean_ref;
  Point clean_acc;
  for (const auto& r : reports) {
    const double e = r.e_doa_deg();
    if (!std::isfinite(e)) continue;
    auto& p = series[series_name(r)][r.eval_mdp_pct];
    p.sum += e;
    ++p.n;
    if (r.mode == "clean" && r.eval_mdp_pct == 0.0) {
      clean_acc.sum += e;
      ++clean_acc.n;
    }
  }
  if (clean_acc.n > 0) clean_ref = clean_acc.mean();
  else spdlog::warn("no clean reference report (mode clean, MDP 0) under {}; plotting without a reference line", dir.string());

  double y_max = clean_ref.value_or(0.0);
  double x_max = 0.0;
  for (const auto& [_, pts] : series) {
    for (const auto& [x, p] : pts) {
      y_max = std::max(y_max, p.mean());
      x_max = std::max(x_max, x);
    }
  }
  y_max = nice_ceiling(y_max * 1.1);
  if (x_max <= 0.0) x_max = 100.0;

  std::vector<std::filesystem::path> written;
  const double left = 60, right = 220, top = 30, bottom = 50;

  {
    Svg svg(720, 420);
    const double pw = svg.width() - left - right, ph = svg.height() - top - bottom;
    auto sx = [&](double x) { return left + pw * x / x_max; };
    auto sy = [&](double y) { return top + ph * (1.0 - y / y_max); };
    svg.line(left, top + ph, left + pw, top + ph, "black");
    svg.line(left, top, left, top + ph, "black");
    for (int i = 0; i <= 4; ++i) {
      const double yv = y_max * i / 4.0, xv = x_max * i / 4.0;
      svg.text(left - 6, sy(yv) + 4, std::to_string(static_cast<int>(std::lround(yv))), "end");
      svg.text(sx(xv), top + ph + 16, std::to_string(static_cast<int>(std::lround(xv))), "middle");
    }
    svg.text(left + pw / 2, svg.height() - 12, "MDP (%)", "middle");
    svg.text(14, top - 10, "E_DoA (deg)");
    int k = 0;
    for (const auto& [name, pts] : series) {
      const std::string color = kPalette[k % 8];
      std::vector<std::pair<double, double>> poly;
      for (const auto& [x, p] : pts) {
        poly.emplace_back(sx(x), sy(p.mean()));
        svg.circle(sx(x), sy(p.mean()), color);
      }
      if (poly.size() > 1) svg.polyline(poly, color);
      svg.line(left + pw + 15, top + 10 + 18 * k, left + pw + 35, top + 10 + 18 * k, color, 2);
      svg.text(left + pw + 40, top + 14 + 18 * k, name);
      ++k;
    }
    if (clean_ref) {
      svg.line(left, sy(*clean_ref), left + pw, sy(*clean_ref), "gray", 1.5, "6,4");
      svg.text(left + pw - 4, sy(*clean_ref) - 4, "clean reference", "end");
    }
    written.push_back(dir / "e_doa_vs_mdp.svg");
    svg.save(written.back());
  }

  {
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& [name, pts] : series) {
      for (const auto& [x, p] : pts) {
        char label[160];
        std::snprintf(label, sizeof(label), "%s @%g%%", name.c_str(), x);
        bars.emplace_back(label, p.mean());
      }
    }
    const double bar_h = 22;
    Svg svg(760, top + bottom + bar_h * static_cast<double>(bars.size()));
    const double label_w = 300, pw = svg.width() - label_w - 40;
    auto sx = [&](double v) { return label_w + pw * v / y_max; };
    for (std::size_t i = 0; i < bars.size(); ++i) {
      const double y = top + bar_h * static_cast<double>(i);
      svg.text(label_w - 8, y + 15, bars[i].first, "end");
      svg.rect(label_w, y + 3, sx(bars[i].second) - label_w, bar_h - 6, kPalette[i % 8]);
      char v[32];
      std::snprintf(v, sizeof(v), "%.1f", bars[i].second);
      svg.text(sx(bars[i].second) + 4, y + 15, v);
    }
    svg.line(label_w, top, label_w, top + bar_h * static_cast<double>(bars.size()), "black");
    if (clean_ref) svg.line(sx(*clean_ref), top - 5, sx(*clean_ref), svg.height() - bottom + 5, "gray", 1.5, "6,4");
    svg.text(label_w + pw / 2, svg.height() - 15, "E_DoA (deg)", "middle");
    written.push_back(dir / "conditions.svg");
    svg.save(written.back());
  }
  return written;
}

}  // namespace locus
