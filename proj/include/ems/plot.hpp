// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Static line charts (SVG) and their data tables (CSV) for metrics logs and
// comparison reports. Output is a pure function of the input bytes.

#include "ems/corpus_io.hpp"

#include <map>
#include <numeric>
#include <sstream>

namespace ems::plot {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Chart {
  std::string title, x_label, y_label;
  std::vector<Series> series;
};

inline std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof(b), "%.6g", v);
  return b;
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string render_svg(const Chart& c) {
  constexpr double W = 640, H = 400, L = 70, R = 160, Tm = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : c.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (x1 <= x0) x0 -= 0.5, x1 += 0.5;
  if (y1 <= y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tm - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(c.title) << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    o << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(c.x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << (Tm + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (Tm + H - B) / 2 << ")\">"
    << xml_escape(c.y_label) << "</text>\n";
  for (std::size_t k = 0; k < c.series.size(); ++k) {
    const auto& s = c.series[k];
    const char* col = colors[k % 8];
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? " " : "") << fmt(px(s.x[i])) << "," << fmt(py(s.y[i]));
    o << "\"/>\n";
    if (s.x.size() < 20)
      for (std::size_t i = 0; i < s.x.size(); ++i)
        o << "<circle cx=\"" << fmt(px(s.x[i])) << "\" cy=\"" << fmt(py(s.y[i])) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    const double ly = Tm + 16.0 * static_cast<double>(k);
    o << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly << "\" stroke=\"" << col
      << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 34 << "\" y=\"" << ly + 4 << "\">" << xml_escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string render_csv(const Chart& c, const std::string& x_col, const std::string& y_col) {
  std::string out = "series," + x_col + "," + y_col + "\n";
  for (const auto& s : c.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) out += s.name + "," + fmt(s.x[i]) + "," + fmt(s.y[i]) + "\n";
  return out;
}

/// Loss curves from a metrics JSONL file. Throws on empty or malformed input.
inline Chart loss_chart(const std::string& text, const std::string& title) {
  Series total{"total", {}, {}}, score{"l_score", {}, {}}, joint{"l_joint_input", {}, {}}, vq{"l_vq", {}, {}};
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const double step = j.at("step").get<double>();
      total.x.push_back(step);
      total.y.push_back(j.at("total").get<double>());
      score.x.push_back(step);
      score.y.push_back(j.at("l_score").get<double>());
      joint.x.push_back(step);
      joint.y.push_back(j.at("l_joint_input").get<double>());
      if (j.contains("l_vq") && !j["l_vq"].is_null()) {
        vq.x.push_back(step);
        vq.y.push_back(j["l_vq"].get<double>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error("plot: malformed metrics record on line " + std::to_string(n) + ": " + e.what());
    }
  }
  if (total.x.empty()) throw Error("plot: metrics file holds no records");
  Chart c{title, "step", "loss", {total, score, joint}};
  if (!vq.x.empty()) c.series.push_back(vq);
  return c;
}

namespace detail {

inline void add_point(std::map<std::string, Series>& by, const std::string& name, double x, double y) {
  auto& s = by[name];
  s.name = name;
  s.x.push_back(x);
  s.y.push_back(y);
}

inline Chart finish_accuracy(std::map<std::string, Series> by, const std::string& title) {
  if (by.empty()) throw Error("plot: comparison report has no successful cells");
  Chart c{title, "masking parameter (k% or mask size)", "mean utterance accuracy", {}};
  for (auto& [name, s] : by) {
    std::vector<std::size_t> idx(s.x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
    Series sorted{name, {}, {}};
    for (auto i : idx) sorted.x.push_back(s.x[i]), sorted.y.push_back(s.y[i]);
    c.series.push_back(std::move(sorted));
  }
  return c;
}

}  // namespace detail

/// Accuracy against the masking parameter, one series per
/// strategy/input-mode/family, from a report JSON document.
inline Chart accuracy_chart_from_json(const std::string& text, const std::string& title) {
  std::map<std::string, Series> by;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& [strategy, cells] : j.at("cells").items())
      for (const auto& [key, cell] : cells.items()) {
        if (!cell.contains("mean_accuracy")) continue;
        const auto slash = key.find('/');
        const double param = std::stod(key.substr(0, slash));
        const std::string series = strategy + key.substr(slash);
        detail::add_point(by, series, param, cell.at("mean_accuracy").get<double>());
      }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("plot: malformed comparison report: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error("plot: malformed cell key in comparison report");
  }
  return detail::finish_accuracy(std::move(by), title);
}

/// Same chart from the report CSV (rows of kind "mean").
inline Chart accuracy_chart_from_csv(const std::string& text, const std::string& title) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("kind,name,family,strategy,parameter,input_mode,seed,metric,value,status", 0) != 0)
    throw Error("plot: CSV is not a comparison report");
  std::map<std::string, Series> by;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw Error("plot: malformed report row " + std::to_string(n));
    if (f[0] != "mean" || f[7] != "utterance_accuracy") continue;
    try {
      detail::add_point(by, f[3] + "/" + f[5] + "/" + f[2], std::stod(f[4]), std::stod(f[8]));
    } catch (const std::exception&) {
      throw Error("plot: malformed number in report row " + std::to_string(n));
    }
  }
  return detail::finish_accuracy(std::move(by), title);
}

}  // namespace ems::plot
