#pragma once

// Output writers: CSV tables, content digests and small hand-rolled SVG plots. Everything here
// is byte-deterministic for a given input; numbers are printed with round-trip precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "attrbench/error.hpp"
#include "attrbench/stats.hpp"

namespace attrbench {

/// Shortest text that parses back to the same double; "nan", "inf" and "-inf" otherwise.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  for (int precision = 6; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline double parse_number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw InvalidInput("not a number: '" + s + "'");
  return v;
}

/// 64-bit FNV-1a, as 16 hex digits.
class Digest {
 public:
  Digest& update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 1099511628211ULL;
    }
    return *this;
  }
  Digest& update(std::string_view s) { return update(s.data(), s.size()); }
  Digest& update(std::span<const double> v) { return update(v.data(), v.size() * sizeof(double)); }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

 private:
  std::uint64_t h_ = 14695981039346656037ULL;
};

inline std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  return Digest().update(bytes).hex();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
  if (!out) throw InvalidInput("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// ---------------------------------------------------------------------------------------------
// CSV

/// Minimal RFC 4180 writer: fields containing separators, quotes or newlines are quoted.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

  CsvWriter& row(const std::vector<std::string>& fields) {
    if (fields.size() != columns_) throw InvalidInput("CSV row has the wrong number of fields");
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      const std::string& f = fields[i];
      if (f.find_first_of(",\"\n\r") == std::string::npos) {
        out_ << f;
      } else {
        out_ << '"';
        for (char c : f) out_ << (c == '"' ? "\"\"" : std::string(1, c));
        out_ << '"';
      }
    }
    out_ << '\n';
    return *this;
  }

  std::string str() const { return out_.str(); }
  void save(const std::filesystem::path& path) const { write_text(path, str()); }

 private:
  std::size_t columns_;
  std::ostringstream out_;
};

/// Parses CSV text written by CsvWriter (or anything RFC 4180-shaped). Returns rows including
/// the header.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("unterminated quoted CSV field", text.size());
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------------------------
// SVG

namespace svg {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

class Canvas {
 public:
  Canvas(double width, double height) : w_(width), h_(height) {}

  void rect(double x, double y, double w, double h, const std::string& fill, const std::string& stroke = "none") {
    body_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\"" << num(h)
          << "\" fill=\"" << fill << "\" stroke=\"" << stroke << "\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0) {
    body_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
          << "\" stroke=\"" << stroke << "\" stroke-width=\"" << num(width) << "\"/>\n";
  }

  void circle(double cx, double cy, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << num(cx) << "\" cy=\"" << num(cy) << "\" r=\"" << num(r) << "\" fill=\"" << fill
          << "\"/>\n";
  }

  /// anchor: start, middle or end. A non-zero angle rotates about the anchor point.
  void text(double x, double y, const std::string& s, const std::string& anchor = "start", double size = 11,
            double angle = 0) {
    body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << num(size)
          << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\"";
    if (angle != 0) body_ << " transform=\"rotate(" << num(angle) << ' ' << num(x) << ' ' << num(y) << ")\"";
    body_ << '>' << escape(s) << "</text>\n";
  }

  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w_) << "\" height=\"" << num(h_)
        << "\" viewBox=\"0 0 " << num(w_) << ' ' << num(h_) << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << body_.str() << "</svg>\n";
    return out.str();
  }

 private:
  double w_, h_;
  std::ostringstream body_;
};

/// Blue (-1) through white (0) to red (+1).
inline std::string diverging(double v) {
  if (!std::isfinite(v)) return "#dddddd";
  v = std::clamp(v, -1.0, 1.0);
  const int a = static_cast<int>(std::lround(255.0 * (1.0 - std::abs(v))));
  char buf[8];
  if (v >= 0) {
    std::snprintf(buf, sizeof buf, "#ff%02x%02x", a, a);
  } else {
    std::snprintf(buf, sizeof buf, "#%02x%02xff", a, a);
  }
  return buf;
}

}  // namespace svg

/// Metrics as rows, methods as columns. A significant cell holds a square whose side and shade
/// scale with the normalized effect; non-significant cells stay empty.
inline std::string significance_svg(const SignificanceGrid& grid) {
  const double cell = 28, left = 150, top = 110;
  svg::Canvas c(left + cell * static_cast<double>(grid.methods.size()) + 20,
                top + cell * static_cast<double>(grid.metrics.size()) + 40);
  c.text(left, 20, "significantly better than " + grid.baseline + " (p < 0.01)", "start", 13);
  for (std::size_t j = 0; j < grid.methods.size(); ++j) {
    c.text(left + cell * (static_cast<double>(j) + 0.5), top - 8, grid.methods[j], "start", 10, -60);
  }
  for (std::size_t i = 0; i < grid.metrics.size(); ++i) {
    const double y = top + cell * static_cast<double>(i);
    c.text(left - 6, y + cell * 0.65, grid.metrics[i], "end", 10);
    for (std::size_t j = 0; j < grid.methods.size(); ++j) {
      const double x = left + cell * static_cast<double>(j);
      c.rect(x, y, cell, cell, "none", "#cccccc");
      const TestOutcome& t = grid.cells[i][j];
      if (!t.significant) continue;
      const double e = std::clamp(t.normalized_effect.value_or(0.0), 0.0, 1.0);
      const double side = 4 + (cell - 8) * e;
      c.rect(x + (cell - side) / 2, y + (cell - side) / 2, side, side, svg::diverging(0.25 + 0.75 * e));
    }
  }
  return c.str();
}

inline std::string correlation_svg(const CorrelationMatrix& m, const std::string& title) {
  const double cell = 24, left = 150, top = 110;
  const double n = static_cast<double>(m.metrics.size());
  svg::Canvas c(left + cell * n + 20, top + cell * n + 40);
  c.text(left, 20, title, "start", 13);
  for (std::size_t j = 0; j < m.metrics.size(); ++j) {
    c.text(left + cell * (static_cast<double>(j) + 0.5), top - 8, m.metrics[j], "start", 10, -60);
  }
  for (std::size_t i = 0; i < m.metrics.size(); ++i) {
    const double y = top + cell * static_cast<double>(i);
    c.text(left - 6, y + cell * 0.65, m.metrics[i], "end", 10);
    for (std::size_t j = 0; j < m.metrics.size(); ++j) {
      c.rect(left + cell * static_cast<double>(j), y, cell, cell, svg::diverging(m.rho[i][j]), "#ffffff");
    }
  }
  return c.str();
}

struct CompareRow {
  std::string metric;
  bool higher_is_better = true;
  double cles = 0.5;
  TestOutcome test;
};

/// One horizontal bar per metric, anchored at 0.5 and extending to the CLES of A over B, drawn
/// only when the two-sided test is significant.
inline std::string compare_svg(const std::string& a, const std::string& b, const std::vector<CompareRow>& rows) {
  const double left = 150, width = 300, top = 50, row_h = 22;
  svg::Canvas c(left + width + 40, top + row_h * static_cast<double>(rows.size()) + 40);
  c.text(left, 20, "CLES of " + a + " over " + b, "start", 13);
  const double mid = left + width / 2;
  c.line(mid, top - 6, mid, top + row_h * static_cast<double>(rows.size()), "#444444");
  c.text(left, top + row_h * static_cast<double>(rows.size()) + 16, "0", "middle", 10);
  c.text(mid, top + row_h * static_cast<double>(rows.size()) + 16, "0.5", "middle", 10);
  c.text(left + width, top + row_h * static_cast<double>(rows.size()) + 16, "1", "middle", 10);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = top + row_h * static_cast<double>(i);
    c.text(left - 6, y + row_h * 0.65, rows[i].metric, "end", 10);
    if (!rows[i].test.significant) continue;
    const double x = left + width * rows[i].cles;
    c.rect(std::min(x, mid), y + 4, std::abs(x - mid), row_h - 8, rows[i].cles >= 0.5 ? "#d6604d" : "#4393c3");
  }
  return c.str();
}

struct StabilityPanel {
  std::string metric;
  std::vector<double> snr;  // finite per-image values
  double median_snr = 0.0;
  double noise_fraction = 0.0;
};

/// Left: per-image SNR on a log10 axis with the median marked. Right: noise fraction of variance.
inline std::string stability_svg(const std::vector<StabilityPanel>& panels) {
  const double left = 60, pw = 300, gap = 80, top = 40, ph = 220;
  svg::Canvas c(left + 2 * pw + gap + 30, top + ph + 80);
  c.text(left, 20, "SNR (log10, per image)", "start", 12);
  c.text(left + pw + gap, 20, "noise fraction of variance", "start", 12);
  double lo = 0.0, hi = 1.0;
  bool first = true;
  for (const auto& p : panels) {
    for (double s : p.snr) {
      if (!(s > 0.0) || !std::isfinite(s)) continue;
      const double l = std::log10(s);
      lo = first ? l : std::min(lo, l);
      hi = first ? l : std::max(hi, l);
      first = false;
    }
  }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  const double slot = pw / std::max<double>(1.0, static_cast<double>(panels.size()));
  auto ysnr = [&](double l) { return top + ph - ph * (l - lo) / (hi - lo); };
  c.line(left, top, left, top + ph, "#444444");
  c.text(left - 4, top + 8, format_number(std::round(hi * 100) / 100), "end", 9);
  c.text(left - 4, top + ph, format_number(std::round(lo * 100) / 100), "end", 9);
  const double rx = left + pw + gap;
  c.line(rx, top, rx, top + ph, "#444444");
  c.text(rx - 4, top + 8, "1", "end", 9);
  c.text(rx - 4, top + ph, "0", "end", 9);
  for (std::size_t k = 0; k < panels.size(); ++k) {
    const StabilityPanel& p = panels[k];
    const double cx = left + slot * (static_cast<double>(k) + 0.5);
    for (double s : p.snr) {
      if (s > 0.0 && std::isfinite(s)) c.circle(cx, ysnr(std::log10(s)), 1.6, "#7f7f7f");
    }
    if (p.median_snr > 0.0 && std::isfinite(p.median_snr)) {
      const double y = ysnr(std::log10(p.median_snr));
      c.line(cx - slot * 0.3, y, cx + slot * 0.3, y, "#d6604d", 2.0);
    }
    c.text(cx, top + ph + 16, p.metric, "middle", 10);
    const double bx = rx + slot * static_cast<double>(k) + slot * 0.2;
    const double f = std::clamp(p.noise_fraction, 0.0, 1.0);
    c.rect(bx, top + ph - ph * f, slot * 0.6, ph * f, "#4393c3");
    c.text(bx + slot * 0.3, top + ph + 16, p.metric, "middle", 10);
  }
  return c.str();
}

}  // namespace attrbench
