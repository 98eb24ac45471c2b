#include "wilke/plots.hpp"

#include "wilke/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace wilke {

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw FormatError("csv: missing column '" + name + "'");
  return static_cast<int>(it - header.begin());
}

double CsvTable::number(std::size_t row, const std::string& name) const {
  const auto& cell = rows.at(row).at(column(name));
  if (cell == "nan") return std::nan("");
  try {
    return std::stod(cell);
  } catch (const std::exception&) {
    throw FormatError("csv: non-numeric '" + cell + "' in column " + name);
  }
}

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

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

std::string shade(double v, double max) {
  const double t = max > 0 ? std::clamp(v / max, 0.0, 1.0) : 0.0;
  const int g = static_cast<int>(std::lround(255 * (1 - t)));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02xff", g, g);
  return buf;
}

// blue for positive, red for negative
std::string diverging(double v, double max) {
  const double t = max > 0 ? std::clamp(std::abs(v) / max, 0.0, 1.0) : 0.0;
  const int g = static_cast<int>(std::lround(255 * (1 - t)));
  char buf[16];
  if (v >= 0) std::snprintf(buf, sizeof buf, "#%02x%02xff", g, g);
  else std::snprintf(buf, sizeof buf, "#ff%02x%02x", g, g);
  return buf;
}

struct Panel {
  double x0, y0, w, h;
  double xmin, xmax, ymin, ymax;
  double px(double x) const { return x0 + (xmax > xmin ? (x - xmin) / (xmax - xmin) : 0.5) * w; }
  double py(double y) const { return y0 + h - (ymax > ymin ? (y - ymin) / (ymax - ymin) : 0.5) * h; }
};

void axes(std::ostringstream& s, const Panel& p, const std::string& xlabel, const std::string& ylabel) {
  s << "<rect x=\"" << fmt(p.x0) << "\" y=\"" << fmt(p.y0) << "\" width=\"" << fmt(p.w) << "\" height=\"" << fmt(p.h)
    << "\" fill=\"none\" stroke=\"#000\"/>\n";
  s << "<text x=\"" << fmt(p.x0 + p.w / 2) << "\" y=\"" << fmt(p.y0 + p.h + 30)
    << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xlabel) << "</text>\n";
  s << "<text x=\"" << fmt(p.x0 - 45) << "\" y=\"" << fmt(p.y0 + p.h / 2) << "\" font-size=\"12\" transform=\"rotate(-90 "
    << fmt(p.x0 - 45) << ' ' << fmt(p.y0 + p.h / 2) << ")\" text-anchor=\"middle\">" << escape(ylabel) << "</text>\n";
  s << "<text x=\"" << fmt(p.x0) << "\" y=\"" << fmt(p.y0 + p.h + 14) << "\" font-size=\"10\">" << fmt(p.xmin)
    << "</text>\n";
  s << "<text x=\"" << fmt(p.x0 + p.w) << "\" y=\"" << fmt(p.y0 + p.h + 14) << "\" font-size=\"10\" text-anchor=\"end\">"
    << fmt(p.xmax) << "</text>\n";
  s << "<text x=\"" << fmt(p.x0 - 4) << "\" y=\"" << fmt(p.y0 + p.h) << "\" font-size=\"10\" text-anchor=\"end\">"
    << fmt(p.ymin) << "</text>\n";
  s << "<text x=\"" << fmt(p.x0 - 4) << "\" y=\"" << fmt(p.y0 + 10) << "\" font-size=\"10\" text-anchor=\"end\">"
    << fmt(p.ymax) << "</text>\n";
}

void polyline(std::ostringstream& s, const Panel& p, const std::vector<std::pair<double, double>>& pts,
              const std::string& color, bool dashed) {
  if (pts.empty()) return;
  s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
  if (dashed) s << " stroke-dasharray=\"6,4\"";
  s << " points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i) s << ' ';
    s << fmt(p.px(pts[i].first)) << ',' << fmt(p.py(pts[i].second));
  }
  s << "\"/>\n";
}

std::string open_svg(double w, double h, const std::string& title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(w) << "\" height=\"" << fmt(h) << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n";
  s << "<text x=\"" << fmt(w / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
    << "</text>\n";
  return s.str();
}

}  // namespace

std::string heatmap_svg(const std::string& csv, const std::string& title) {
  const auto t = parse_csv(csv);
  int rows = 0, cols = 0;
  double max = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    rows = std::max(rows, static_cast<int>(t.number(i, "row")) + 1);
    cols = std::max(cols, static_cast<int>(t.number(i, "col")) + 1);
    max = std::max(max, std::abs(t.number(i, "value")));
  }
  const double cell = 6, x0 = 40, y0 = 40;
  std::ostringstream s;
  s << open_svg(x0 * 2 + cols * cell, y0 * 2 + rows * cell, title);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const int r = static_cast<int>(t.number(i, "row"));
    const int c = static_cast<int>(t.number(i, "col"));
    s << "<rect x=\"" << fmt(x0 + c * cell) << "\" y=\"" << fmt(y0 + r * cell) << "\" width=\"" << fmt(cell)
      << "\" height=\"" << fmt(cell) << "\" fill=\"" << shade(std::abs(t.number(i, "value")), max) << "\"/>\n";
  }
  s << "<text x=\"" << fmt(x0) << "\" y=\"" << fmt(y0 + rows * cell + 20) << "\" font-size=\"10\">max |dW| per cell "
    << max << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

std::string norm_trace_svg(const std::string& csv, int layer, const std::string& title) {
  const auto t = parse_csv(csv);
  std::vector<std::pair<double, double>> actual, baseline;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (static_cast<int>(t.number(i, "layer")) != layer) continue;
    const double step = t.number(i, "step");
    actual.emplace_back(step, t.number(i, "frobenius_norm"));
    baseline.emplace_back(step, t.number(i, "baseline_norm"));
  }
  Panel p{70, 40, 520, 300, 0, 1, 0, 1};
  if (!actual.empty()) {
    p.xmin = actual.front().first;
    p.xmax = actual.back().first;
    p.ymin = p.ymax = baseline.front().second;
    for (const auto& [x, y] : actual) p.ymin = std::min(p.ymin, y), p.ymax = std::max(p.ymax, y);
    for (const auto& [x, y] : baseline) p.ymin = std::min(p.ymin, y), p.ymax = std::max(p.ymax, y);
    const double pad = std::max(1e-9, 0.05 * (p.ymax - p.ymin));
    p.ymin -= pad;
    p.ymax += pad;
  }
  if (actual.size() == 1) p.xmax = p.xmin + 1;
  std::ostringstream s;
  s << open_svg(640, 400, title);
  axes(s, p, "editing step", "L2 norm of W_proj, layer " + std::to_string(layer));
  if (baseline.size() == 1) baseline.emplace_back(p.xmax, baseline.front().second);
  polyline(s, p, baseline, "#d62728", true);
  if (actual.size() > 1) polyline(s, p, actual, "#1f77b4", false);
  s << "</svg>\n";
  return s.str();
}

std::string sweep_svg(const std::string& csv, const std::string& title) {
  const auto t = parse_csv(csv);
  std::vector<std::pair<double, double>> pre, post;
  Panel p{70, 40, 520, 300, 0, 1, 0, 1};
  bool first = true;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const double l = t.number(i, "layer");
    const double a = t.number(i, "pre_norm"), b = t.number(i, "post_norm");
    pre.emplace_back(l, a);
    post.emplace_back(l, b);
    if (first) p.xmin = p.xmax = l, p.ymin = p.ymax = a, first = false;
    p.xmin = std::min(p.xmin, l), p.xmax = std::max(p.xmax, l);
    p.ymin = std::min({p.ymin, a, b}), p.ymax = std::max({p.ymax, a, b});
  }
  std::ostringstream s;
  s << open_svg(640, 400, title);
  axes(s, p, "edited layer", "L2 norm of W_proj");
  polyline(s, p, pre, "#d62728", true);
  polyline(s, p, post, "#1f77b4", false);
  s << "</svg>\n";
  return s.str();
}

std::string cma_svg(const std::string& csv, const std::string& title) {
  const auto t = parse_csv(csv);
  std::map<std::string, std::vector<std::size_t>> by_site;
  int layers = 0, tokens = 0;
  double max = 0;
  const int site_col = t.column("site");
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    by_site[t.rows[i].at(site_col)].push_back(i);
    layers = std::max(layers, static_cast<int>(t.number(i, "layer")) + 1);
    tokens = std::max(tokens, static_cast<int>(t.number(i, "token")) + 1);
    max = std::max(max, std::abs(t.number(i, "IE")));
  }
  const double cell = 16, gap = 40, x0 = 40, y0 = 50;
  const double panel_w = layers * cell;
  std::ostringstream s;
  s << open_svg(x0 * 2 + by_site.size() * (panel_w + gap), y0 * 2 + tokens * cell, title);
  double px = x0;
  for (const auto& [site, idx] : by_site) {
    s << "<text x=\"" << fmt(px + panel_w / 2) << "\" y=\"" << fmt(y0 - 8) << "\" text-anchor=\"middle\" font-size=\"12\">"
      << escape(site) << "</text>\n";
    for (std::size_t i : idx) {
      const int l = static_cast<int>(t.number(i, "layer"));
      const int k = static_cast<int>(t.number(i, "token"));
      s << "<rect x=\"" << fmt(px + l * cell) << "\" y=\"" << fmt(y0 + k * cell) << "\" width=\"" << fmt(cell)
        << "\" height=\"" << fmt(cell) << "\" fill=\"" << diverging(t.number(i, "IE"), max) << "\"/>\n";
    }
    px += panel_w + gap;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace wilke
