#pragma once

// Static SVG charts: line plots for loss curves and grouped bar charts for the
// method comparison.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "istn/dataset.hpp"

namespace istn {

struct Series {
  std::string name;
  std::vector<double> y;
};

namespace detail {

inline constexpr std::array<const char*, 8> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                                        "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace detail

inline std::string line_plot_svg(const std::string& title, const std::vector<Series>& series, const std::string& xlabel,
                                 const std::string& ylabel, bool log_y = false) {
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 1;
  auto tr = [&](double v) { return log_y ? std::log10(std::max(v, 1e-12)) : v; };
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, tr(v));
      hi = std::max(hi, tr(v));
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1;
  auto px = [&](double i) { return L + (W - L - R) * (n > 1 ? i / double(n - 1) : 0.5); };
  auto py = [&](double v) { return T + (H - T - B) * (1.0 - (tr(v) - lo) / (hi - lo)); };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + detail::xml_escape(title) + "</text>\n";
  s += "<line x1=\"" + detail::fmt(L) + "\" y1=\"" + detail::fmt(H - B) + "\" x2=\"" + detail::fmt(W - R) + "\" y2=\"" +
       detail::fmt(H - B) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + detail::fmt(L) + "\" y1=\"" + detail::fmt(T) + "\" x2=\"" + detail::fmt(L) + "\" y2=\"" +
       detail::fmt(H - B) + "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const double y = T + (H - T - B) * (1.0 - k / 4.0);
    s += "<text x=\"" + detail::fmt(L - 6) + "\" y=\"" + detail::fmt(y + 4) + "\" text-anchor=\"end\">" +
         detail::fmt(log_y ? std::pow(10.0, v) : v) + "</text>\n";
  }
  s += "<text x=\"" + detail::fmt((L + W - R) / 2) + "\" y=\"" + detail::fmt(H - 12) + "\" text-anchor=\"middle\">" +
       detail::xml_escape(xlabel) + " (0.." + std::to_string(n - 1) + ")</text>\n";
  s += "<text x=\"16\" y=\"" + detail::fmt((T + H - B) / 2) + "\" transform=\"rotate(-90 16 " +
       detail::fmt((T + H - B) / 2) + ")\" text-anchor=\"middle\">" + detail::xml_escape(ylabel) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* colour = detail::kPalette[k % detail::kPalette.size()];
    std::string pts;
    for (std::size_t i = 0; i < series[k].y.size(); ++i) {
      if (!std::isfinite(series[k].y[i])) continue;
      pts += detail::fmt(px(double(i))) + "," + detail::fmt(py(series[k].y[i])) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    const double ly = T + 16.0 * k;
    s += "<rect x=\"" + detail::fmt(W - R + 10) + "\" y=\"" + detail::fmt(ly) + "\" width=\"12\" height=\"3\" fill=\"" +
         colour + "\"/>\n";
    s += "<text x=\"" + detail::fmt(W - R + 26) + "\" y=\"" + detail::fmt(ly + 5) + "\">" +
         detail::xml_escape(series[k].name) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

struct BarGroup {
  std::string label;
  std::vector<double> values;  // one per series
  std::vector<double> errors;  // optional, same length
};

inline std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& series_names,
                                 const std::vector<BarGroup>& groups, const std::string& ylabel, double y_max) {
  const double W = 120.0 + 90.0 * std::max<std::size_t>(groups.size(), 1), H = 400, L = 60, T = 40, B = 70;
  const double plot_w = W - L - 20;
  const double gw = plot_w / std::max<std::size_t>(groups.size(), 1);
  const std::size_t ns = std::max<std::size_t>(series_names.size(), 1);
  const double bw = 0.8 * gw / ns;
  auto py = [&](double v) { return T + (H - T - B) * (1.0 - std::clamp(v / y_max, 0.0, 1.0)); };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt(W) +
                  "\" height=\"400\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + detail::fmt(W / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
       detail::xml_escape(title) + "</text>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = y_max * k / 5.0;
    s += "<line x1=\"" + detail::fmt(L) + "\" y1=\"" + detail::fmt(py(v)) + "\" x2=\"" + detail::fmt(W - 20) +
         "\" y2=\"" + detail::fmt(py(v)) + "\" stroke=\"#ddd\"/>\n";
    s += "<text x=\"" + detail::fmt(L - 6) + "\" y=\"" + detail::fmt(py(v) + 4) + "\" text-anchor=\"end\">" +
         detail::fmt(v) + "</text>\n";
  }
  s += "<text x=\"14\" y=\"" + detail::fmt((T + H - B) / 2) + "\" transform=\"rotate(-90 14 " +
       detail::fmt((T + H - B) / 2) + ")\" text-anchor=\"middle\">" + detail::xml_escape(ylabel) + "</text>\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double x0 = L + gw * g + 0.1 * gw;
    for (std::size_t k = 0; k < groups[g].values.size(); ++k) {
      const double v = groups[g].values[k];
      if (!std::isfinite(v)) continue;
      const double x = x0 + bw * k;
      s += "<rect x=\"" + detail::fmt(x) + "\" y=\"" + detail::fmt(py(v)) + "\" width=\"" + detail::fmt(bw - 1) +
           "\" height=\"" + detail::fmt(H - B - py(v)) + "\" fill=\"" + detail::kPalette[k % detail::kPalette.size()] +
           "\"/>\n";
      if (k < groups[g].errors.size() && std::isfinite(groups[g].errors[k])) {
        const double e = groups[g].errors[k], cx = x + (bw - 1) / 2;
        s += "<line x1=\"" + detail::fmt(cx) + "\" y1=\"" + detail::fmt(py(v - e)) + "\" x2=\"" + detail::fmt(cx) +
             "\" y2=\"" + detail::fmt(py(v + e)) + "\" stroke=\"black\"/>\n";
      }
    }
    s += "<text x=\"" + detail::fmt(L + gw * (g + 0.5)) + "\" y=\"" + detail::fmt(H - B + 16) +
         "\" text-anchor=\"middle\">" + detail::xml_escape(groups[g].label) + "</text>\n";
  }
  for (std::size_t k = 0; k < series_names.size(); ++k) {
    const double x = L + 110.0 * k;
    s += "<rect x=\"" + detail::fmt(x) + "\" y=\"" + detail::fmt(H - 24) + "\" width=\"12\" height=\"12\" fill=\"" +
         detail::kPalette[k % detail::kPalette.size()] + "\"/>\n";
    s += "<text x=\"" + detail::fmt(x + 16) + "\" y=\"" + detail::fmt(H - 14) + "\">" +
         detail::xml_escape(series_names[k]) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// Grid of grayscale tiles written as a PNG. tiles[r][c] may be empty.
inline void write_montage(const std::filesystem::path& path, const std::vector<std::vector<Image>>& tiles, double lo,
                          double hi, int gap = 2) {
  int th = 0, tw = 0;
  std::size_t cols = 0;
  for (const auto& row : tiles) {
    cols = std::max(cols, row.size());
    for (const auto& t : row) {
      th = std::max(th, t.height());
      tw = std::max(tw, t.width());
    }
  }
  if (tiles.empty() || cols == 0 || th == 0) throw DataError("empty montage");
  const int W = static_cast<int>(cols) * (tw + gap) + gap;
  const int H = static_cast<int>(tiles.size()) * (th + gap) + gap;
  std::vector<unsigned char> px(static_cast<std::size_t>(W) * H, 255);
  for (std::size_t r = 0; r < tiles.size(); ++r) {
    for (std::size_t c = 0; c < tiles[r].size(); ++c) {
      const Image& t = tiles[r][c];
      if (t.empty()) continue;
      const auto g = to_gray8(t, lo, hi);
      const int oy = gap + static_cast<int>(r) * (th + gap), ox = gap + static_cast<int>(c) * (tw + gap);
      for (int y = 0; y < t.height(); ++y) {
        for (int x = 0; x < t.width(); ++x) {
          px[static_cast<std::size_t>(oy + y) * W + ox + x] = g[static_cast<std::size_t>(y) * t.width() + x];
        }
      }
    }
  }
  write_png(path, W, H, 1, px);
}

}  // namespace istn
