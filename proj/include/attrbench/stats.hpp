#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attrbench/correlation.hpp"
#include "attrbench/error.hpp"
#include "attrbench/metrics.hpp"

namespace attrbench {

inline constexpr double kSignificanceLevel = 0.01;

enum class Alternative { greater, less, two_sided };

struct TestOutcome {
  double p_value = std::numeric_limits<double>::quiet_NaN();
  bool significant = false;
  /// No nonzero differences: the test cannot be run.
  bool inconclusive = false;
  bool exact = false;
  std::size_t n = 0;          // nonzero differences
  double statistic = 0.0;     // W+, sum of ranks of positive differences
  double median_difference = 0.0;
  std::optional<double> normalized_effect;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return (lo + hi) / 2.0;
}

/// Null distribution of 2*W+ for the given doubled ranks: counts[t] = number of sign
/// assignments with doubled statistic t.
inline std::vector<double> signed_rank_null_counts(std::span<const std::size_t> doubled_ranks) {
  std::size_t total = 0;
  for (std::size_t r : doubled_ranks) total += r;
  std::vector<double> counts(total + 1, 0.0);
  counts[0] = 1.0;
  std::size_t reach = 0;
  for (std::size_t r : doubled_ranks) {
    reach += r;
    for (std::size_t t = reach; t >= r; --t) {
      counts[t] += counts[t - r];
      if (t == r) break;
    }
  }
  return counts;
}

/// Paired Wilcoxon signed-rank test of a - b. Zero differences are discarded; exact null
/// distribution for n <= 20, normal approximation with tie and continuity correction above.
inline TestOutcome wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b, Alternative alt,
                                        double alpha = kSignificanceLevel) {
  if (a.size() != b.size()) throw InvalidInput("wilcoxon: samples must have equal length");
  TestOutcome out;
  std::vector<double> diffs(a.size()), nonzero;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diffs[i] = a[i] - b[i];
    if (diffs[i] != 0.0) nonzero.push_back(diffs[i]);
  }
  out.median_difference = median(diffs);
  out.n = nonzero.size();
  if (nonzero.empty()) {
    out.inconclusive = true;
    return out;
  }
  std::vector<double> mags(nonzero.size());
  for (std::size_t i = 0; i < nonzero.size(); ++i) mags[i] = std::abs(nonzero[i]);
  const std::vector<double> ranks = average_ranks(mags);
  double w_plus = 0.0;
  for (std::size_t i = 0; i < nonzero.size(); ++i) {
    if (nonzero[i] > 0) w_plus += ranks[i];
  }
  out.statistic = w_plus;
  const std::size_t n = nonzero.size();

  double p_greater = 0.0, p_less = 0.0;
  if (n <= 20) {
    out.exact = true;
    std::vector<std::size_t> doubled(n);
    for (std::size_t i = 0; i < n; ++i) doubled[i] = static_cast<std::size_t>(std::lround(2.0 * ranks[i]));
    const std::vector<double> counts = signed_rank_null_counts(doubled);
    const std::size_t obs = static_cast<std::size_t>(std::lround(2.0 * w_plus));
    const double total = std::ldexp(1.0, static_cast<int>(n));
    double ge = 0.0, le = 0.0;
    for (std::size_t t = 0; t < counts.size(); ++t) {
      if (t >= obs) ge += counts[t];
      if (t <= obs) le += counts[t];
    }
    p_greater = ge / total;
    p_less = le / total;
  } else {
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    double tie = 0.0;
    std::map<double, std::size_t> groups;
    for (double r : ranks) ++groups[r];
    for (const auto& [r, t] : groups) {
      const double tt = static_cast<double>(t);
      tie += tt * tt * tt - tt;
    }
    const double sd = std::sqrt(nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie / 48.0);
    if (!(sd > 0.0)) {
      out.inconclusive = true;
      return out;
    }
    const double zg = (w_plus - mean - 0.5) / sd;
    const double zl = (w_plus - mean + 0.5) / sd;
    p_greater = 0.5 * std::erfc(zg / std::sqrt(2.0));
    p_less = 0.5 * std::erfc(-zl / std::sqrt(2.0));
  }
  switch (alt) {
    case Alternative::greater: out.p_value = p_greater; break;
    case Alternative::less: out.p_value = p_less; break;
    case Alternative::two_sided: out.p_value = std::min(1.0, 2.0 * std::min(p_greater, p_less)); break;
  }
  out.significant = out.p_value < alpha;
  return out;
}

// ---------------------------------------------------------------------------------------------
// Score tables

/// Complete (image x method) score matrix for one metric implementation.
struct ScoreTable {
  std::string metric;
  bool higher_is_better = true;
  std::vector<std::string> methods;
  std::vector<std::size_t> images;
  std::vector<std::vector<double>> scores;  // [row][method]
  /// Images dropped because one of their scores was flagged or missing.
  std::vector<std::size_t> dropped_images;

  std::size_t rows() const noexcept { return images.size(); }

  std::size_t method_index(const std::string& m) const {
    const auto it = std::find(methods.begin(), methods.end(), m);
    if (it == methods.end()) throw InvalidInput("method '" + m + "' not in score table for " + metric);
    return static_cast<std::size_t>(it - methods.begin());
  }

  bool has_method(const std::string& m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

  std::vector<double> column(std::size_t j) const {
    std::vector<double> out(rows());
    for (std::size_t i = 0; i < rows(); ++i) out[i] = scores[i][j];
    return out;
  }

  std::vector<double> column(const std::string& m) const { return column(method_index(m)); }
};

/// Assembles a table from loose results; an image is dropped as a unit when any method's
/// score is excluded or absent.
inline ScoreTable build_score_table(const std::string& metric, bool higher_is_better,
                                    const std::vector<std::string>& methods,
                                    const std::vector<MetricResult>& results) {
  ScoreTable t;
  t.metric = metric;
  t.higher_is_better = higher_is_better;
  t.methods = methods;
  std::map<std::size_t, std::vector<std::optional<double>>> rows;
  for (const MetricResult& r : results) {
    if (r.metric != metric) continue;
    const auto it = std::find(methods.begin(), methods.end(), r.method);
    if (it == methods.end()) continue;
    auto& row = rows[r.image_id];
    row.resize(methods.size());
    row[static_cast<std::size_t>(it - methods.begin())] =
        r.excluded() ? std::nullopt : std::optional<double>(r.score);
  }
  for (const auto& [image, row] : rows) {
    const bool complete = std::all_of(row.begin(), row.end(), [](const auto& v) { return v.has_value(); });
    if (!complete) {
      t.dropped_images.push_back(image);
      continue;
    }
    t.images.push_back(image);
    std::vector<double> values(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) values[j] = *row[j];
    t.scores.push_back(std::move(values));
  }
  return t;
}

// ---------------------------------------------------------------------------------------------
// Significance against the baseline

struct SignificanceGrid {
  std::vector<std::string> metrics;
  std::vector<std::string> methods;  // excludes the baseline
  std::string baseline;
  std::vector<std::vector<TestOutcome>> cells;  // [metric][method]

  std::size_t significant_count() const {
    std::size_t n = 0;
    for (const auto& row : cells) {
      for (const TestOutcome& c : row) n += c.significant;
    }
    return n;
  }
};

/// One-sided test of every method against the baseline in each metric's good direction.
/// Normalized effects divide the oriented median difference by the largest one among the
/// metric's significant cells.
inline SignificanceGrid significance_grid(const std::vector<ScoreTable>& tables, const std::string& baseline,
                                          double alpha = kSignificanceLevel) {
  SignificanceGrid grid;
  grid.baseline = baseline;
  for (const ScoreTable& t : tables) {
    for (const std::string& m : t.methods) {
      if (m != baseline && std::find(grid.methods.begin(), grid.methods.end(), m) == grid.methods.end()) {
        grid.methods.push_back(m);
      }
    }
  }
  for (const ScoreTable& t : tables) {
    if (!t.has_method(baseline)) throw InvalidInput("baseline '" + baseline + "' missing from " + t.metric);
    grid.metrics.push_back(t.metric);
    std::vector<TestOutcome> row(grid.methods.size());
    const std::vector<double> base = t.column(baseline);
    const Alternative alt = t.higher_is_better ? Alternative::greater : Alternative::less;
    double best = 0.0;
    for (std::size_t j = 0; j < grid.methods.size(); ++j) {
      if (!t.has_method(grid.methods[j]) || t.rows() == 0) {
        row[j].inconclusive = true;
        continue;
      }
      row[j] = wilcoxon_signed_rank(t.column(grid.methods[j]), base, alt, alpha);
      if (!t.higher_is_better) row[j].median_difference = -row[j].median_difference;
      if (row[j].significant) best = std::max(best, row[j].median_difference);
    }
    for (TestOutcome& c : row) {
      if (!c.significant) continue;
      c.normalized_effect = best > 0.0 ? std::max(0.0, c.median_difference) / best : 0.0;
    }
    grid.cells.push_back(std::move(row));
  }
  return grid;
}

// ---------------------------------------------------------------------------------------------
// Inter-metric correlation

struct CorrelationMatrix {
  std::vector<std::string> metrics;
  std::vector<std::vector<double>> rho;           // averaged Spearman, NaN when never defined
  std::vector<std::vector<std::size_t>> coverage;  // methods contributing to each cell
};

/// Spearman correlation over images between every pair of metrics, per method, averaged over
/// methods other than `exclude` (the baseline). Pairs with a constant score vector are skipped
/// for that method.
inline CorrelationMatrix inter_metric_correlation(const std::vector<ScoreTable>& tables,
                                                  const std::string& exclude = {}) {
  CorrelationMatrix out;
  const std::size_t M = tables.size();
  for (const ScoreTable& t : tables) out.metrics.push_back(t.metric);
  out.rho.assign(M, std::vector<double>(M, std::numeric_limits<double>::quiet_NaN()));
  out.coverage.assign(M, std::vector<std::size_t>(M, 0));
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = 0; b < M; ++b) {
      const ScoreTable& ta = tables[a];
      const ScoreTable& tb = tables[b];
      // Images present in both tables.
      std::vector<std::pair<std::size_t, std::size_t>> common;
      for (std::size_t i = 0, j = 0; i < ta.rows() && j < tb.rows();) {
        if (ta.images[i] == tb.images[j]) {
          common.emplace_back(i++, j++);
        } else if (ta.images[i] < tb.images[j]) {
          ++i;
        } else {
          ++j;
        }
      }
      if (common.size() < 3) continue;
      double sum = 0.0;
      std::size_t used = 0;
      for (std::size_t ma = 0; ma < ta.methods.size(); ++ma) {
        const std::string& method = ta.methods[ma];
        if (method == exclude || !tb.has_method(method)) continue;
        const std::size_t mb = tb.method_index(method);
        std::vector<double> xa, xb;
        for (const auto& [i, j] : common) {
          xa.push_back(ta.scores[i][ma]);
          xb.push_back(tb.scores[j][mb]);
        }
        const double r = spearman(xa, xb);
        if (!std::isfinite(r)) continue;
        sum += r;
        ++used;
      }
      if (used > 0) out.rho[a][b] = sum / static_cast<double>(used);
      out.coverage[a][b] = used;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Ranking consistency

/// Per-image ranks of the methods, 1 = best, ties averaged.
inline std::vector<std::vector<double>> method_ranks(const ScoreTable& t) {
  std::vector<std::vector<double>> out;
  for (const auto& row : t.scores) {
    std::vector<double> key(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) key[j] = t.higher_is_better ? -row[j] : row[j];
    out.push_back(average_ranks(key));
  }
  return out;
}

/// Krippendorff's alpha with the ordinal difference function for complete data.
/// values[u] holds the values assigned to unit u by every coder.
inline double krippendorff_alpha_ordinal(const std::vector<std::vector<double>>& values) {
  std::vector<double> domain;
  for (const auto& unit : values) domain.insert(domain.end(), unit.begin(), unit.end());
  std::sort(domain.begin(), domain.end());
  domain.erase(std::unique(domain.begin(), domain.end()), domain.end());
  const std::size_t V = domain.size();
  if (V < 2) return std::numeric_limits<double>::quiet_NaN();
  auto index = [&](double v) {
    return static_cast<std::size_t>(std::lower_bound(domain.begin(), domain.end(), v) - domain.begin());
  };
  std::vector<std::vector<double>> o(V, std::vector<double>(V, 0.0));
  for (const auto& unit : values) {
    const std::size_t m = unit.size();
    if (m < 2) continue;
    std::vector<std::size_t> counts(V, 0);
    for (double v : unit) ++counts[index(v)];
    for (std::size_t c = 0; c < V; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t k = 0; k < V; ++k) {
        const double pairs = static_cast<double>(counts[c]) * static_cast<double>(c == k ? counts[k] - 1 : counts[k]);
        o[c][k] += pairs / static_cast<double>(m - 1);
      }
    }
  }
  std::vector<double> nc(V, 0.0);
  double n = 0.0;
  for (std::size_t c = 0; c < V; ++c) {
    for (std::size_t k = 0; k < V; ++k) nc[c] += o[c][k];
    n += nc[c];
  }
  std::vector<double> cum(V + 1, 0.0);
  for (std::size_t c = 0; c < V; ++c) cum[c + 1] = cum[c] + nc[c];
  auto delta2 = [&](std::size_t c, std::size_t k) {
    if (c > k) std::swap(c, k);
    const double d = (cum[k + 1] - cum[c]) - (nc[c] + nc[k]) / 2.0;
    return d * d;
  };
  double observed = 0.0, expected = 0.0;
  for (std::size_t c = 0; c < V; ++c) {
    for (std::size_t k = 0; k < V; ++k) {
      if (c == k) continue;
      const double d2 = delta2(c, k);
      observed += o[c][k] * d2;
      expected += nc[c] * nc[k] * d2;
    }
  }
  if (!(expected > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return 1.0 - (n - 1.0) * observed / expected;
}

/// Consistency of the method ranking across images: units are methods, coders are images and
/// the coded values are per-image ranks. NaN when α is undefined.
inline double krippendorff_alpha(const ScoreTable& t) {
  if (t.rows() < 2 || t.methods.size() < 2) throw InvalidInput("krippendorff_alpha needs >= 2 images and >= 2 methods");
  const auto ranks = method_ranks(t);
  std::vector<std::vector<double>> units(t.methods.size());
  for (const auto& row : ranks) {
    for (std::size_t j = 0; j < row.size(); ++j) units[j].push_back(row[j]);
  }
  return krippendorff_alpha_ordinal(units);
}

// ---------------------------------------------------------------------------------------------
// Effect size and stability

/// Fraction of pairs on which a beats b in the good direction, ties counting one half.
inline double cles(std::span<const double> a, std::span<const double> b, bool higher_is_better) {
  if (a.size() != b.size() || a.empty()) throw InvalidInput("cles needs equal, non-empty samples");
  double wins = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      wins += 0.5;
    } else if ((a[i] > b[i]) == higher_is_better) {
      wins += 1.0;
    }
  }
  return wins / static_cast<double>(a.size());
}

struct StabilityReport {
  std::vector<double> snr;  // per image; +inf when the repeats agree exactly
  double median_snr = 0.0;
  double noise_fraction = 0.0;
};

inline double sample_variance(std::span<const double> v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size() - 1);
}

/// scores[image][repeat]. SNR = mu^2 / sigma^2 per image; noise fraction = mean within-image
/// variance over the variance of all measurements pooled.
inline StabilityReport stability_analysis(const std::vector<std::vector<double>>& scores) {
  if (scores.empty()) throw InvalidInput("stability analysis needs at least one image");
  const std::size_t R = scores.front().size();
  if (R < 2) throw ConfigError("stability analysis needs at least 2 repeats");
  StabilityReport out;
  std::vector<double> pooled;
  double within = 0.0;
  for (const auto& row : scores) {
    if (row.size() != R) throw InvalidInput("stability analysis needs the same repeat count for every image");
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(R);
    const double var = sample_variance(row);
    within += var;
    out.snr.push_back(var > 0.0 ? mean * mean / var : std::numeric_limits<double>::infinity());
    pooled.insert(pooled.end(), row.begin(), row.end());
  }
  within /= static_cast<double>(scores.size());
  const double total = pooled.size() > 1 ? sample_variance(pooled) : 0.0;
  out.noise_fraction = total > 0.0 ? within / total : 0.0;
  out.median_snr = median(out.snr);
  return out;
}

}  // namespace attrbench
