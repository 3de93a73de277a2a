#pragma once

// The benchmarking workflow: train a model, fix a cohort of correctly classified images,
// compute attribution maps once per (image, method), run a pilot to pick metrics, benchmark
// every method against the baseline, compare pairs in detail and measure metric stability.
// Every stage writes its tables and a JSON summary into the run's output directory.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "attrbench/attribution.hpp"
#include "attrbench/config.hpp"
#include "attrbench/dataset.hpp"
#include "attrbench/idx.hpp"
#include "attrbench/metrics.hpp"
#include "attrbench/model_io.hpp"
#include "attrbench/parallel.hpp"
#include "attrbench/patch.hpp"
#include "attrbench/report.hpp"
#include "attrbench/segmentation.hpp"
#include "attrbench/stats.hpp"
#include "attrbench/synthetic.hpp"
#include "attrbench/training.hpp"

namespace attrbench {

// ---------------------------------------------------------------------------------------------
// Pilot selection

/// Why a metric implementation was kept or dropped after the pilot.
inline constexpr const char* kSelected = "SELECTED";
inline constexpr const char* kPinned = "PINNED";
inline constexpr const char* kLowAlpha = "LOW_ALPHA";
inline constexpr const char* kUndefinedAlpha = "UNDEFINED_ALPHA";
inline constexpr const char* kCorrelated = "CORRELATED";

struct MetricDecision {
  std::string metric;
  double alpha = std::numeric_limits<double>::quiet_NaN();
  bool selected = false;
  std::string code;
  /// CORRELATED: the kept metric it duplicates.
  std::string partner;
  double partner_rho = std::numeric_limits<double>::quiet_NaN();
  /// Its MoRF/LeRF counterpart was evaluated too; such pairs tend to be strongly anti-correlated.
  std::string order_counterpart;
  double counterpart_rho = std::numeric_limits<double>::quiet_NaN();
};

/// The implementation with the masking order swapped ("IROF_MoRF@blur" <-> "IROF_LeRF@blur"),
/// or empty when the metric has no order.
inline std::string order_counterpart(const std::string& implementation) {
  for (const auto& [from, to] : {std::pair{"MoRF", "LeRF"}, std::pair{"LeRF", "MoRF"}}) {
    const auto at = implementation.find(from);
    if (at != std::string::npos) return implementation.substr(0, at) + to + implementation.substr(at + 4);
  }
  return {};
}

/// Discards alpha < threshold, then walks the survivors by decreasing alpha (pinned ones first)
/// and drops any metric whose |rho| with an already kept one reaches the correlation threshold.
inline std::vector<MetricDecision> select_metrics(const std::vector<std::string>& ids, const std::vector<double>& alpha,
                                                  const CorrelationMatrix& corr, const PilotConfig& cfg) {
  if (ids.size() != alpha.size() || corr.metrics != ids) throw InvalidInput("pilot inputs are inconsistent");
  const std::size_t n = ids.size();
  std::vector<MetricDecision> out(n);
  auto pinned = [&](std::size_t i) {
    return std::find(cfg.pinned.begin(), cfg.pinned.end(), ids[i]) != cfg.pinned.end();
  };
  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < n; ++i) {
    out[i].metric = ids[i];
    out[i].alpha = alpha[i];
    if (std::isnan(alpha[i])) {
      out[i].code = kUndefinedAlpha;
    } else if (alpha[i] < cfg.alpha_threshold) {
      out[i].code = kLowAlpha;
    } else {
      survivors.push_back(i);
    }
    const std::string other = order_counterpart(ids[i]);
    for (std::size_t j = 0; j < n; ++j) {
      if (!other.empty() && ids[j] == other) {
        out[i].order_counterpart = other;
        out[i].counterpart_rho = corr.rho[i][j];
      }
    }
  }
  std::stable_sort(survivors.begin(), survivors.end(), [&](std::size_t a, std::size_t b) {
    if (pinned(a) != pinned(b)) return pinned(a);
    return alpha[a] > alpha[b];
  });
  std::vector<std::size_t> kept;
  for (std::size_t i : survivors) {
    MetricDecision& d = out[i];
    if (pinned(i)) {
      d.selected = true;
      d.code = kPinned;
      kept.push_back(i);
      continue;
    }
    for (std::size_t k : kept) {
      const double r = corr.rho[i][k];
      if (std::isfinite(r) && std::abs(r) >= cfg.correlation_threshold) {
        d.code = kCorrelated;
        d.partner = ids[k];
        d.partner_rho = r;
        break;
      }
    }
    if (d.code.empty()) {
      d.selected = true;
      d.code = kSelected;
      kept.push_back(i);
    }
  }
  return out;
}

struct PilotReport {
  std::size_t images = 0;
  std::vector<MetricDecision> decisions;
  CorrelationMatrix correlation;

  std::vector<std::string> selected() const {
    std::vector<std::string> out;
    for (const MetricDecision& d : decisions) {
      if (d.selected) out.push_back(d.metric);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------------------------
// Stage results

struct TrainSummary {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::string model_digest;
};

struct BenchmarkResult {
  std::vector<std::string> metrics;
  std::vector<std::string> methods;  // including the baseline, last
  std::vector<MetricResult> results;
  std::vector<ScoreTable> tables;
  SignificanceGrid grid;
  CorrelationMatrix correlation;
  std::vector<double> alpha;  // per metric, over the non-baseline methods
};

struct CompareReport {
  std::string a, b;
  std::vector<CompareRow> rows;
};

struct StabilityMetric {
  std::string metric;
  std::vector<std::size_t> images;
  std::vector<std::vector<double>> scores;  // [image][repeat]
  std::vector<std::size_t> dropped;
  StabilityReport report;
};

struct StabilityComparison {
  std::string higher, lower;  // alternative: SNR(higher) > SNR(lower)
  TestOutcome test;
};

struct StabilityResult {
  std::string method;
  std::size_t repeats = 0;
  std::vector<StabilityMetric> metrics;
  std::vector<StabilityComparison> comparisons;
};

// ---------------------------------------------------------------------------------------------
// Descriptions used in manifests and cache keys

inline Json describe(const MethodEntry& m) {
  const MethodConfig& c = m.config;
  Json j;
  j["id"] = m.id;
  j["method"] = method_name(m.kind);
  j["seed"] = c.seed;
  j["path_steps"] = c.path_steps;
  j["expected_draws"] = c.expected_draws;
  j["ensemble"] = c.ensemble;
  j["noise_level"] = c.noise_level;
  j["noise_sigma"] = c.noise_sigma ? Json(*c.noise_sigma) : Json(nullptr);
  j["references"] = c.references;
  j["surrogate_samples"] = c.surrogate_samples;
  j["superpixels"] = c.superpixels;
  j["ridge"] = c.ridge;
  j["kernel_width"] = c.lime_kernel_width;
  j["enumerate"] = c.enumerate_coalitions;
  j["masker"] = c.masker.name();
  j["blur_kernel"] = c.masker.blur_kernel;
  return j;
}

inline Json describe(const MetricEntry& m) {
  const MetricSpec& s = m.spec;
  Json j;
  j["implementation"] = m.implementation;
  j["metric"] = s.id();
  j["higher_is_better"] = s.higher_is_better();
  j["stochastic"] = s.stochastic();
  if (s.uses_masker()) {
    j["masker"] = s.masker.name();
    if (s.masker.kind == MaskerKind::blur) j["blur_kernel"] = s.masker.blur_kernel;
  }
  switch (s.kind) {
    case MetricKind::deletion:
    case MetricKind::insertion:
      j["steps"] = s.steps;
      j["cap"] = s.cap;
      break;
    case MetricKind::minimal_subset_deletion:
    case MetricKind::minimal_subset_insertion:
      j["exact_scan"] = s.exact_scan;
      break;
    case MetricKind::seg_sensitivity_n:
    case MetricKind::sensitivity_n:
      j["subsets"] = s.subsets;
      j["subset_size"] = s.subset_size ? Json(*s.subset_size) : Json(nullptr);
      break;
    case MetricKind::infidelity_nb:
      j["samples"] = s.samples;
      j["noise_sigma"] = s.noise_sigma;
      break;
    case MetricKind::infidelity_sq:
      j["samples"] = s.samples;
      j["square_side"] = s.square_side;
      break;
    case MetricKind::max_sensitivity:
      j["radius"] = s.radius;
      j["draws"] = s.draws;
      break;
    default:
      break;
  }
  if (s.needs_segmentation()) {
    j["segments"] = s.segmentation.target_segments;
    j["compactness"] = s.segmentation.compactness;
  }
  return j;
}

inline std::string safe_file_name(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return s;
}

// ---------------------------------------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), out_(output_directory(cfg_)), log_(log) {
    threads_ = cfg_.threads == 0 ? default_thread_count() : cfg_.threads;
  }

  const RunConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& output() const noexcept { return out_; }

  // -- train --------------------------------------------------------------------------------

  TrainSummary train() {
    load_data();
    say("train", "training on " + std::to_string(train_->size()) + " images");
    const Model init = make_small_cnn(train_->image_shape(), train_->num_classes, cfg_.model.cnn,
                                      derive_seed(cfg_.seed, "init"));
    TrainResult r = train_sgd(init, *train_, cfg_.model.train);
    model_ = std::move(r.model);
    std::filesystem::create_directories(out_);
    save_model(*model_, (out_ / "model.attb").string());
    TrainSummary s;
    s.epoch_loss = r.epoch_loss;
    s.train_accuracy = accuracy(*model_, *train_);
    s.test_accuracy = accuracy(*model_, *test_);
    s.model_digest = file_digest(out_ / "model.attb");
    Json j;
    j["epoch_loss"] = s.epoch_loss;
    j["train_accuracy"] = s.train_accuracy;
    j["test_accuracy"] = s.test_accuracy;
    j["model"] = "model.attb";
    j["model_digest"] = s.model_digest;
    write_text(out_ / "train.json", j.dump(2) + "\n");
    say("train", "test accuracy " + format_number(s.test_accuracy));
    return s;
  }

  // -- attribute ------------------------------------------------------------------------------

  /// Cohort selection and attribution maps for every configured method and the baseline.
  Cohort attribute() {
    const Cohort cohort = select(cfg_.cohort);
    attributions(cohort, cfg_.all_methods());
    CsvWriter csv({"position", "image", "label"});
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      csv.row({std::to_string(i), std::to_string(cohort.indices[i]), std::to_string(cohort.predicted[i])});
    }
    csv.save(out_ / "cohort.csv");
    return cohort;
  }

  // -- pilot ----------------------------------------------------------------------------------

  PilotReport pilot() {
    if (cfg_.metrics.empty()) throw ConfigError("the pilot needs at least one metric");
    if (cfg_.pilot.images < 3) throw ConfigError("pilot cohort too small: need at least 3 images");
    const Cohort cohort = select(cfg_.pilot.images);
    const auto methods = cfg_.all_methods();
    const auto maps = attributions(cohort, methods);
    std::vector<const MetricEntry*> metrics;
    for (const MetricEntry& m : cfg_.metrics) metrics.push_back(&m);
    say("pilot", std::to_string(metrics.size()) + " metric implementations on " + std::to_string(cohort.size()) +
                     " images");
    const std::vector<MetricResult> results = evaluate(cohort, metrics, methods, maps, std::nullopt);
    const std::vector<ScoreTable> tables = score_tables(metrics, methods, results);

    PilotReport rep;
    rep.images = cohort.size();
    rep.correlation = inter_metric_correlation(tables, cfg_.baseline);
    std::vector<std::string> ids;
    std::vector<double> alpha;
    for (const ScoreTable& t : tables) {
      ids.push_back(t.metric);
      alpha.push_back(ranking_alpha(t));
    }
    rep.decisions = select_metrics(ids, alpha, rep.correlation, cfg_.pilot);

    CsvWriter csv({"metric", "alpha", "selected", "code", "partner", "partner_rho", "order_counterpart",
                   "counterpart_rho"});
    Json decisions = Json::array();
    for (const MetricDecision& d : rep.decisions) {
      csv.row({d.metric, format_number(d.alpha), d.selected ? "1" : "0", d.code, d.partner,
               d.partner.empty() ? "" : format_number(d.partner_rho), d.order_counterpart,
               d.order_counterpart.empty() ? "" : format_number(d.counterpart_rho)});
      Json j;
      j["metric"] = d.metric;
      j["alpha"] = json_number(d.alpha);
      j["selected"] = d.selected;
      j["code"] = d.code;
      if (!d.partner.empty()) {
        j["partner"] = d.partner;
        j["partner_rho"] = json_number(d.partner_rho);
      }
      if (!d.order_counterpart.empty()) {
        j["order_counterpart"] = d.order_counterpart;
        j["counterpart_rho"] = json_number(d.counterpart_rho);
        j["redundant_candidate"] = true;
      }
      decisions.push_back(j);
    }
    csv.save(out_ / "pilot.csv");
    write_correlation(rep.correlation, out_ / "pilot_correlation.csv");
    write_text(out_ / "pilot_correlation.svg", correlation_svg(rep.correlation, "pilot inter-metric Spearman"));
    Json j;
    j["images"] = rep.images;
    j["alpha_threshold"] = cfg_.pilot.alpha_threshold;
    j["correlation_threshold"] = cfg_.pilot.correlation_threshold;
    j["pinned"] = cfg_.pilot.pinned;
    j["selected"] = rep.selected();
    j["decisions"] = decisions;
    write_text(out_ / "pilot.json", j.dump(2) + "\n");
    write_results_csv(results, out_ / "pilot_scores.csv");
    say("pilot", std::to_string(rep.selected().size()) + " of " + std::to_string(ids.size()) + " selected");
    return rep;
  }

  // -- benchmark ------------------------------------------------------------------------------

  BenchmarkResult benchmark() {
    std::vector<const MetricEntry*> metrics;
    if (cfg_.selection == "pilot") {
      const std::filesystem::path p = out_ / "pilot.json";
      if (!std::filesystem::exists(p)) throw ConfigError("selection is 'pilot' but no pilot has been run");
      const Json pilot = Json::parse(read_text(p));
      for (const auto& id : pilot.at("selected")) metrics.push_back(&cfg_.metric(id.get<std::string>()));
    } else {
      for (const MetricEntry& m : cfg_.metrics) metrics.push_back(&m);
    }
    if (metrics.empty()) throw ConfigError("no metrics to benchmark");
    const Cohort cohort = select(cfg_.cohort);
    const auto methods = cfg_.all_methods();
    const auto maps = attributions(cohort, methods);
    say("benchmark", std::to_string(metrics.size()) + " metrics x " + std::to_string(methods.size()) +
                         " methods x " + std::to_string(cohort.size()) + " images");

    BenchmarkResult b;
    for (const MetricEntry* m : metrics) b.metrics.push_back(m->implementation);
    for (const MethodEntry* m : methods) b.methods.push_back(m->id);
    b.results = evaluate(cohort, metrics, methods, maps, std::nullopt);
    b.tables = score_tables(metrics, methods, b.results);
    b.grid = significance_grid(b.tables, cfg_.baseline);
    b.correlation = inter_metric_correlation(b.tables, cfg_.baseline);
    for (const ScoreTable& t : b.tables) b.alpha.push_back(ranking_alpha(t));

    write_results_csv(b.results, out_ / "scores.csv");
    write_grid(b.grid, b.tables, out_ / "significance.csv");
    write_text(out_ / "significance.svg", significance_svg(b.grid));
    write_correlation(b.correlation, out_ / "correlation.csv");
    write_text(out_ / "correlation.svg", correlation_svg(b.correlation, "inter-metric Spearman"));
    CsvWriter alpha({"metric", "alpha", "images", "dropped_images"});
    for (std::size_t i = 0; i < b.tables.size(); ++i) {
      alpha.row({b.tables[i].metric, format_number(b.alpha[i]), std::to_string(b.tables[i].rows()),
                 std::to_string(b.tables[i].dropped_images.size())});
    }
    alpha.save(out_ / "alpha.csv");

    Json summary;
    summary["cohort"] = cohort.size();
    summary["significant_cells"] = b.grid.significant_count();
    Json per_metric = Json::array();
    for (std::size_t i = 0; i < b.tables.size(); ++i) {
      Json j;
      j["metric"] = b.tables[i].metric;
      j["images"] = b.tables[i].rows();
      j["dropped_images"] = b.tables[i].dropped_images;
      j["flags"] = flag_counts(b.results, b.tables[i].metric);
      if (b.tables[i].rows() == 0) j["code"] = "NO_COMPLETE_IMAGES";
      per_metric.push_back(j);
    }
    summary["metrics"] = per_metric;
    if (patch_) {
      summary["patch"] = patch_summary();
    }
    write_text(out_ / "benchmark.json", summary.dump(2) + "\n");
    write_manifest(cohort, metrics, methods);
    say("benchmark", std::to_string(b.grid.significant_count()) + " significant cells");
    return b;
  }

  // -- compare --------------------------------------------------------------------------------

  /// Two-sided paired test and CLES of method a against b on the stored benchmark scores.
  CompareReport compare(const std::string& a, const std::string& b, std::vector<std::string> metric_ids = {}) {
    const std::filesystem::path p = out_ / "scores.csv";
    if (!std::filesystem::exists(p)) throw InvalidInput("no score table at " + p.string() + "; run benchmark first");
    const std::vector<MetricResult> results = read_results_csv(p);
    if (metric_ids.empty()) {
      for (const MetricResult& r : results) {
        if (std::find(metric_ids.begin(), metric_ids.end(), r.metric) == metric_ids.end()) metric_ids.push_back(r.metric);
      }
    }
    CompareReport rep{a, b, {}};
    for (const std::string& id : metric_ids) {
      const bool hib = cfg_.metric(id).spec.higher_is_better();
      // A self-comparison reads one column twice.
      const ScoreTable t = a == b ? build_score_table(id, hib, {a}, results) : build_score_table(id, hib, {a, b}, results);
      if (t.rows() == 0) throw ConfigError("no paired scores for " + a + " and " + b + " on " + id);
      const std::vector<double> xa = t.column(0), xb = t.column(a == b ? 0 : 1);
      CompareRow row;
      row.metric = id;
      row.higher_is_better = hib;
      row.cles = cles(xa, xb, hib);
      row.test = wilcoxon_signed_rank(xa, xb, Alternative::two_sided);
      rep.rows.push_back(row);
    }
    const std::string stem = "compare_" + safe_file_name(a) + "_vs_" + safe_file_name(b);
    CsvWriter csv({"metric", "higher_is_better", "n", "cles", "p_value", "significant", "median_difference"});
    Json rows = Json::array();
    for (const CompareRow& r : rep.rows) {
      csv.row({r.metric, r.higher_is_better ? "1" : "0", std::to_string(r.test.n), format_number(r.cles),
               format_number(r.test.p_value), r.test.significant ? "1" : "0",
               format_number(r.test.median_difference)});
      Json j;
      j["metric"] = r.metric;
      j["cles"] = r.cles;
      j["p_value"] = json_number(r.test.p_value);
      j["significant"] = r.test.significant;
      rows.push_back(j);
    }
    csv.save(out_ / (stem + ".csv"));
    Json j;
    j["a"] = a;
    j["b"] = b;
    j["rows"] = rows;
    write_text(out_ / (stem + ".json"), j.dump(2) + "\n");
    write_text(out_ / (stem + ".svg"), compare_svg(a, b, rep.rows));
    return rep;
  }

  // -- stability ------------------------------------------------------------------------------

  StabilityResult stability() {
    const StabilityConfig& sc = cfg_.stability;
    if (sc.metrics.empty()) throw ConfigError("stability needs stability.metrics");
    if (sc.repeats < 2) throw ConfigError("stability needs at least 2 repeats; the variance of one run is undefined");
    std::vector<MetricEntry> entries;
    for (const std::string& id : sc.metrics) {
      MetricEntry e;
      if (const MetricEntry* known = cfg_.find_metric(id)) {
        e = *known;
      } else {
        e.spec = parse_metric_id(id);
        e.implementation = id;
      }
      if (!e.spec.stochastic()) {
        throw ConfigError(id + " is deterministic, so repeated runs carry no noise. Stability analysis applies to "
                               "Sens_n, SegSens_n, INFD_NB, INFD_SQ, SENS_MAX, COV or a random masker.");
      }
      entries.push_back(e);
    }
    const MethodEntry& method = cfg_.method(sc.method);
    const Cohort cohort = select(sc.images.value_or(cfg_.cohort));
    const std::vector<const MethodEntry*> methods{&method};
    const auto maps = attributions(cohort, methods);
    say("stability", std::to_string(entries.size()) + " metrics x " + std::to_string(sc.repeats) + " repeats x " +
                         std::to_string(cohort.size()) + " images");

    StabilityResult res;
    res.method = method.id;
    res.repeats = sc.repeats;
    CsvWriter scores({"metric", "image", "repeat", "score", "flags"});
    for (const MetricEntry& e : entries) {
      std::vector<std::vector<MetricResult>> runs(sc.repeats);
      for (std::size_t r = 0; r < sc.repeats; ++r) runs[r] = evaluate(cohort, {&e}, methods, maps, r);
      StabilityMetric sm;
      sm.metric = e.implementation;
      for (std::size_t i = 0; i < cohort.size(); ++i) {
        std::vector<double> row(sc.repeats);
        bool ok = true;
        for (std::size_t r = 0; r < sc.repeats; ++r) {
          const MetricResult& m = runs[r][i];
          scores.row({e.implementation, std::to_string(m.image_id), std::to_string(r), format_number(m.score), m.flags});
          ok = ok && !m.excluded();
          row[r] = m.score;
        }
        if (ok) {
          sm.images.push_back(cohort.indices[i]);
          sm.scores.push_back(std::move(row));
        } else {
          sm.dropped.push_back(cohort.indices[i]);
        }
      }
      if (sm.scores.empty()) throw NumericalError("every image was degenerate for " + e.implementation);
      sm.report = stability_analysis(sm.scores);
      res.metrics.push_back(std::move(sm));
    }
    for (std::size_t a = 0; a < res.metrics.size(); ++a) {
      for (std::size_t b = 0; b < res.metrics.size(); ++b) {
        if (a == b) continue;
        res.comparisons.push_back({res.metrics[a].metric, res.metrics[b].metric,
                                   snr_test(res.metrics[a], res.metrics[b])});
      }
    }
    write_stability(res, scores);
    return res;
  }

  // -- report ---------------------------------------------------------------------------------

  /// Collects the JSON summaries present in the output directory into report.json and a short
  /// human-readable report.md.
  Json report() {
    if (!std::filesystem::exists(out_)) throw InvalidInput("output directory " + out_.string() + " does not exist");
    Json rep;
    rep["output"] = out_.string();
    std::ostringstream md;
    md << "# attrbench report\n\n";
    for (const char* stage : {"train", "pilot", "benchmark", "stability"}) {
      const std::filesystem::path p = out_ / (std::string(stage) + ".json");
      if (std::filesystem::exists(p)) rep[stage] = Json::parse(read_text(p));
    }
    if (rep.contains("train")) {
      md << "## Model\n\ntest accuracy " << format_number(rep["train"]["test_accuracy"].get<double>()) << "\n\n";
    }
    if (rep.contains("pilot")) {
      md << "## Pilot\n\n| metric | alpha | decision |\n|---|---|---|\n";
      for (const auto& d : rep["pilot"]["decisions"]) {
        md << "| " << d["metric"].get<std::string>() << " | "
           << (d["alpha"].is_number() ? format_number(d["alpha"].get<double>()) : "nan") << " | "
           << d["code"].get<std::string>() << (d.contains("partner") ? " (" + d["partner"].get<std::string>() + ")" : "")
           << " |\n";
      }
      md << "\n";
    }
    const std::filesystem::path sig = out_ / "significance.csv";
    if (std::filesystem::exists(sig)) {
      md << "## Significantly better than the baseline (p < 0.01)\n\n";
      std::vector<std::pair<std::string, std::vector<std::string>>> wins;  // metric order as in the grid
      const auto rows = parse_csv(read_text(sig));
      for (std::size_t i = 1; i < rows.size(); ++i) {
        if (wins.empty() || wins.back().first != rows[i][0]) wins.push_back({rows[i][0], {}});
        if (rows[i][6] == "1") wins.back().second.push_back(rows[i][1]);
      }
      for (const auto& [metric, methods] : wins) {
        md << "- " << metric << ":";
        for (std::size_t k = 0; k < methods.size(); ++k) md << (k ? ", " : " ") << methods[k];
        if (methods.empty()) md << " none";
        md << "\n";
      }
      md << "\n";
    }
    if (rep.contains("stability")) {
      md << "## Stability\n\n| metric | median SNR | noise fraction |\n|---|---|---|\n";
      for (const auto& m : rep["stability"]["metrics"]) {
        md << "| " << m["metric"].get<std::string>() << " | " << m["median_snr"].dump() << " | "
           << m["noise_fraction"].dump() << " |\n";
      }
      md << "\n";
    }
    Json files = Json::object();
    std::vector<std::filesystem::path> paths;
    for (const auto& entry : std::filesystem::directory_iterator(out_)) {
      const std::string name = entry.path().filename().string();
      if (entry.is_regular_file() && name != "report.json" && name != "report.md") paths.push_back(entry.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) files[p.filename().string()] = file_digest(p);
    rep["files"] = files;
    write_text(out_ / "report.json", rep.dump(2) + "\n");
    write_text(out_ / "report.md", md.str());
    return rep;
  }

  // -- shared state, exposed for tests and tools ------------------------------------------------

  const Dataset& train_data() {
    load_data();
    return *train_;
  }

  const Dataset& test_data() {
    load_data();
    return *test_;
  }

  /// The configured weights, the run's saved model, or a freshly trained one, in that order.
  const Model& model() {
    if (model_) return *model_;
    load_data();
    if (cfg_.model.weights) {
      model_ = load_model(cfg_.resolve(*cfg_.model.weights).string());
    } else if (std::filesystem::exists(out_ / "model.attb")) {
      model_ = load_model((out_ / "model.attb").string());
    } else {
      train();
    }
    if (model_->input_shape() != test_->image_shape()) {
      throw InvalidInput("model input shape does not match the dataset images");
    }
    if (model_->output_size() != test_->num_classes) {
      throw InvalidInput("model has " + std::to_string(model_->output_size()) + " outputs but the dataset has " +
                         std::to_string(test_->num_classes) + " classes");
    }
    return *model_;
  }

  Cohort select(std::size_t n) { return select_cohort(model(), test_data(), n); }

  using MapTable = std::vector<std::vector<Tensor>>;  // [cohort position][method]

  /// Attribution maps for the cohort, served from the on-disk cache when the stored entry was
  /// produced under the same model, data and method settings and its digest still matches.
  MapTable attributions(const Cohort& cohort, const std::vector<const MethodEntry*>& methods) {
    const Model& m = model();
    load_cache();
    MapTable maps(cohort.size(), std::vector<Tensor>(methods.size()));
    std::vector<std::string> contexts;
    for (const MethodEntry* me : methods) contexts.push_back(method_context_digest(*me));
    std::vector<std::pair<std::size_t, std::size_t>> missing;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      for (std::size_t k = 0; k < methods.size(); ++k) {
        const std::string key = attribution_key("test", cohort.indices[i], methods[k]->id, cohort.predicted[i]);
        const auto hit = cache_.find(key);
        if (hit != cache_.end() && hit->second.context == contexts[k] &&
            hit->second.digest == digest(hit->second.values)) {
          maps[i][k] = hit->second.values;
        } else {
          missing.emplace_back(i, k);
        }
      }
    }
    if (!missing.empty()) {
      say("attribute", "computing " + std::to_string(missing.size()) + " attribution maps");
      parallel_for(missing.size(), threads_, [&](std::size_t j) {
        const auto [i, k] = missing[j];
        const std::size_t image = cohort.indices[i];
        const AttributionMethod method = instantiate(*methods[k], image);
        const Tensor x = test_->image(image);
        const Tensor region = test_->regions ? test_->region(image) : Tensor();
        maps[i][k] = method(m, x, cohort.predicted[i], context(image, region));
        if (!maps[i][k].all_finite()) {
          throw NumericalError(methods[k]->id + " produced a non-finite attribution for image " + std::to_string(image));
        }
      });
      for (const auto& [i, k] : missing) {
        const std::string key = attribution_key("test", cohort.indices[i], methods[k]->id, cohort.predicted[i]);
        cache_[key] = CacheEntry{maps[i][k], contexts[k], digest(maps[i][k])};
      }
      save_cache();
    }
    return maps;
  }

  /// Scores for every (metric, image, method), in that nesting order. `repeat` reseeds the
  /// stochastic parts for stability runs; nullopt is the benchmark's own draw.
  std::vector<MetricResult> evaluate(const Cohort& cohort, const std::vector<const MetricEntry*>& metrics,
                                     const std::vector<const MethodEntry*>& methods, const MapTable& maps,
                                     std::optional<std::size_t> repeat) {
    const Model& m = model();
    const std::size_t I = cohort.size(), K = methods.size();
    bool needs_patch = false;
    for (const MetricEntry* me : metrics) needs_patch = needs_patch || me->spec.kind == MetricKind::impact_coverage;
    if (needs_patch) patch();
    const auto segs = segmentations(cohort, metrics);
    std::vector<MetricResult> out(metrics.size() * I * K);
    parallel_for(out.size(), threads_, [&](std::size_t job) {
      const std::size_t mi = job / (I * K), i = (job / K) % I, k = job % K;
      const MetricEntry& me = *metrics[mi];
      const std::size_t image = cohort.indices[i];
      std::uint64_t seed = derive_seed(derive_seed(cfg_.seed, "metric:" + me.implementation), image);
      if (repeat) seed = derive_seed(seed, *repeat + 1);
      MetricSpec spec = me.spec;
      spec.masker.stats = test_->stats;
      spec.masker.seed = derive_seed(seed, "masker");
      const Tensor x = test_->image(image);
      const Tensor region = test_->regions ? test_->region(image) : Tensor();
      const AttributionMethod method = instantiate(*methods[k], image);
      MetricJob j;
      j.model = &m;
      j.x = &x;
      j.target = cohort.predicted[i];
      j.attribution = &maps[i][k];
      j.method = &method;
      j.method_context = context(image, region);
      j.segmentation = segs[mi].empty() ? nullptr : segs[mi][i];
      j.patch = patch_ ? &*patch_ : nullptr;
      j.seed = seed;
      MetricResult r = evaluate_metric(spec, j);
      r.metric = me.implementation;
      r.method = methods[k]->id;
      r.image_id = image;
      out[job] = std::move(r);
    });
    return out;
  }

  /// The adversarial patch for Impact Coverage, trained on first use.
  const AdversarialPatch& patch() {
    if (patch_) return *patch_;
    const Model& m = model();
    std::size_t target = 0;
    if (cfg_.patch_target) {
      target = *cfg_.patch_target;
      if (target >= test_->num_classes) throw ConfigError("patch.target is not a class of the dataset");
    } else {
      target = least_predicted_class(m, *test_);
    }
    say("patch", "training patch for class " + std::to_string(target));
    patch_ = train_patch(m, *train_, target, cfg_.patch);
    write_text(out_ / "patch.json", patch_summary().dump(2) + "\n");
    if (patch_->success_rate < 0.5) {
      say("patch", "warning: success rate " + format_number(patch_->success_rate) + " is below 0.5");
    }
    return *patch_;
  }

 private:
  struct CacheEntry {
    Tensor values;
    std::string context;
    std::uint64_t digest = 0;
  };

  void say(const std::string& stage, const std::string& msg) const {
    if (log_ != nullptr) *log_ << "[" << stage << "] " << msg << std::endl;
  }

  static Json json_number(double v) { return std::isfinite(v) ? Json(v) : Json(format_number(v)); }

  void load_data() {
    if (train_) return;
    const DatasetConfig& d = cfg_.dataset;
    Dataset train, test;
    if (d.kind == "synthetic") {
      train = synth_generate(derive_seed(cfg_.seed, "data:train"), d.train_count, d.size, d.classes);
      test = synth_generate(derive_seed(cfg_.seed, "data:test"), d.test_count, d.size, d.classes);
    } else {
      train = load_idx(cfg_.resolve(d.train_images).string(), cfg_.resolve(d.train_labels).string());
      test = load_idx(cfg_.resolve(d.test_images).string(), cfg_.resolve(d.test_labels).string());
      const std::size_t classes = std::max(train.num_classes, test.num_classes);
      train.num_classes = test.num_classes = classes;
      if (train.image_shape() != test.image_shape()) throw InvalidInput("train and test images differ in shape");
    }
    train.validate();
    test.validate();
    if (d.normalize) {
      const ChannelStats stats = compute_channel_stats(train);
      train = normalized(std::move(train), stats);
      test = normalized(std::move(test), stats);
    }
    const std::size_t pool = std::min(cfg_.reference_pool, train.size());
    for (std::size_t i = 0; i < pool; ++i) references_.push_back(train.image(i));
    train_ = std::move(train);
    test_ = std::move(test);
  }

  AttributionMethod instantiate(const MethodEntry& e, std::size_t image) const {
    AttributionMethod m{e.id, e.kind, e.config};
    // Random baselines are already a function of the image id; everything else gets a fresh
    // stream per image so that images are independent draws.
    if (e.kind != MethodKind::random_baseline) m.config.seed = derive_seed(e.config.seed, image);
    m.config.masker.stats = test_->stats;
    m.config.masker.seed = derive_seed(m.config.seed, "masker");
    return m;
  }

  MethodContext context(std::size_t image, const Tensor& region) const {
    MethodContext ctx;
    ctx.reference_pool = references_;
    ctx.image_id = image;
    ctx.region = region.size() ? &region : nullptr;
    return ctx;
  }

  std::size_t least_predicted_class(const Model& m, const Dataset& data) const {
    std::vector<std::size_t> counts(data.num_classes, 0);
    for (std::size_t i = 0; i < data.size(); ++i) ++counts[predict_class(m, data.image(i))];
    return static_cast<std::size_t>(std::min_element(counts.begin(), counts.end()) - counts.begin());
  }

  Json patch_summary() const {
    Json j;
    j["target"] = patch_->target;
    j["side"] = patch_->side();
    j["success_rate"] = patch_->success_rate;
    j["history"] = patch_->history;
    j["warning"] = patch_->success_rate < 0.5 ? Json("PATCH_WEAK: success rate below 0.5") : Json(nullptr);
    return j;
  }

  // Per metric: one segmentation per cohort image, or empty when the metric needs none. SLIC
  // results are cached for the lifetime of the pipeline, so stability repeats reuse them.
  std::vector<std::vector<const Segmentation*>> segmentations(const Cohort& cohort,
                                                              const std::vector<const MetricEntry*>& metrics) {
    std::vector<std::vector<const Segmentation*>> out(metrics.size());
    for (std::size_t mi = 0; mi < metrics.size(); ++mi) {
      const MetricSpec& s = metrics[mi]->spec;
      if (!s.needs_segmentation()) continue;
      const SlicParams& p = s.segmentation;
      std::vector<std::size_t> todo;
      for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (!seg_cache_.count(seg_key(cohort.indices[i], p))) todo.push_back(i);
      }
      std::vector<Segmentation> fresh(todo.size());
      parallel_for(todo.size(), threads_,
                   [&](std::size_t t) { fresh[t] = slic(test_->image(cohort.indices[todo[t]]), p); });
      for (std::size_t t = 0; t < todo.size(); ++t) {
        seg_cache_.emplace(seg_key(cohort.indices[todo[t]], p), std::move(fresh[t]));
      }
      for (std::size_t i = 0; i < cohort.size(); ++i) out[mi].push_back(&seg_cache_.at(seg_key(cohort.indices[i], p)));
    }
    return out;
  }

  using SegKey = std::tuple<std::size_t, std::size_t, double, std::size_t>;
  static SegKey seg_key(std::size_t image, const SlicParams& p) {
    return {image, p.target_segments, p.compactness, p.iterations};
  }

  std::vector<ScoreTable> score_tables(const std::vector<const MetricEntry*>& metrics,
                                       const std::vector<const MethodEntry*>& methods,
                                       const std::vector<MetricResult>& results) const {
    std::vector<std::string> ids;
    for (const MethodEntry* m : methods) ids.push_back(m->id);
    std::vector<ScoreTable> tables;
    for (const MetricEntry* m : metrics) {
      tables.push_back(build_score_table(m->implementation, m->spec.higher_is_better(), ids, results));
    }
    return tables;
  }

  /// Krippendorff's alpha of the method rankings, leaving out the baseline.
  double ranking_alpha(const ScoreTable& t) const {
    ScoreTable u = t;
    if (u.has_method(cfg_.baseline)) {
      const std::size_t b = u.method_index(cfg_.baseline);
      u.methods.erase(u.methods.begin() + static_cast<std::ptrdiff_t>(b));
      for (auto& row : u.scores) row.erase(row.begin() + static_cast<std::ptrdiff_t>(b));
    }
    if (u.rows() < 2 || u.methods.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    return krippendorff_alpha(u);
  }

  static Json flag_counts(const std::vector<MetricResult>& results, const std::string& metric) {
    std::map<std::string, std::size_t> counts;
    for (const MetricResult& r : results) {
      if (r.metric == metric && !r.flags.empty()) ++counts[r.flags];
    }
    Json j = Json::object();
    for (const auto& [k, v] : counts) j[k] = v;
    return j;
  }

  static TestOutcome snr_test(const StabilityMetric& a, const StabilityMetric& b) {
    std::vector<double> xa, xb;
    for (std::size_t i = 0; i < a.images.size(); ++i) {
      const auto it = std::find(b.images.begin(), b.images.end(), a.images[i]);
      if (it == b.images.end()) continue;
      double va = a.report.snr[i], vb = b.report.snr[static_cast<std::size_t>(it - b.images.begin())];
      if (std::isinf(va) && std::isinf(vb)) va = vb = 0.0;  // both noise-free: a tie
      xa.push_back(va);
      xb.push_back(vb);
    }
    return wilcoxon_signed_rank(xa, xb, Alternative::greater);
  }

  void write_results_csv(const std::vector<MetricResult>& results, const std::filesystem::path& path) const {
    CsvWriter csv({"metric", "method", "image", "score", "flags"});
    for (const MetricResult& r : results) {
      csv.row({r.metric, r.method, std::to_string(r.image_id), format_number(r.score), r.flags});
    }
    csv.save(path);
  }

  static std::vector<MetricResult> read_results_csv(const std::filesystem::path& path) {
    const auto rows = parse_csv(read_text(path));
    if (rows.empty() || rows[0] != std::vector<std::string>{"metric", "method", "image", "score", "flags"}) {
      throw FormatError("unexpected header in " + path.string(), 0);
    }
    std::vector<MetricResult> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].size() != 5) throw FormatError("bad row in " + path.string(), i);
      MetricResult r;
      r.metric = rows[i][0];
      r.method = rows[i][1];
      r.image_id = static_cast<std::size_t>(std::stoull(rows[i][2]));
      r.score = parse_number(rows[i][3]);
      r.flags = rows[i][4];
      out.push_back(std::move(r));
    }
    return out;
  }

  static void write_grid(const SignificanceGrid& g, const std::vector<ScoreTable>& tables,
                         const std::filesystem::path& path) {
    CsvWriter csv({"metric", "method", "higher_is_better", "n", "statistic", "p_value", "significant",
                   "median_difference", "normalized_effect", "inconclusive"});
    for (std::size_t i = 0; i < g.metrics.size(); ++i) {
      for (std::size_t j = 0; j < g.methods.size(); ++j) {
        const TestOutcome& t = g.cells[i][j];
        csv.row({g.metrics[i], g.methods[j], tables[i].higher_is_better ? "1" : "0", std::to_string(t.n),
                 format_number(t.statistic), format_number(t.p_value), t.significant ? "1" : "0",
                 format_number(t.median_difference),
                 t.normalized_effect ? format_number(*t.normalized_effect) : "", t.inconclusive ? "1" : "0"});
      }
    }
    csv.save(path);
  }

  static void write_correlation(const CorrelationMatrix& m, const std::filesystem::path& path) {
    std::vector<std::string> header{"metric"};
    header.insert(header.end(), m.metrics.begin(), m.metrics.end());
    CsvWriter csv(header);
    for (std::size_t i = 0; i < m.metrics.size(); ++i) {
      std::vector<std::string> row{m.metrics[i]};
      for (double r : m.rho[i]) row.push_back(format_number(r));
      csv.row(row);
    }
    csv.save(path);
  }

  void write_stability(const StabilityResult& res, const CsvWriter& scores) const {
    scores.save(out_ / "stability_scores.csv");
    CsvWriter summary({"metric", "images", "dropped_images", "median_snr", "noise_fraction"});
    CsvWriter snr({"metric", "image", "snr"});
    Json metrics = Json::array();
    std::vector<StabilityPanel> panels;
    for (const StabilityMetric& m : res.metrics) {
      summary.row({m.metric, std::to_string(m.images.size()), std::to_string(m.dropped.size()),
                   format_number(m.report.median_snr), format_number(m.report.noise_fraction)});
      StabilityPanel p{m.metric, {}, m.report.median_snr, m.report.noise_fraction};
      for (std::size_t i = 0; i < m.images.size(); ++i) {
        snr.row({m.metric, std::to_string(m.images[i]), format_number(m.report.snr[i])});
        if (std::isfinite(m.report.snr[i])) p.snr.push_back(m.report.snr[i]);
      }
      panels.push_back(std::move(p));
      Json j;
      j["metric"] = m.metric;
      j["images"] = m.images.size();
      j["dropped_images"] = m.dropped;
      j["median_snr"] = json_number(m.report.median_snr);
      j["noise_fraction"] = json_number(m.report.noise_fraction);
      metrics.push_back(j);
    }
    Json comparisons = Json::array();
    for (const StabilityComparison& c : res.comparisons) {
      Json j;
      j["higher"] = c.higher;
      j["lower"] = c.lower;
      j["n"] = c.test.n;
      j["p_value"] = json_number(c.test.p_value);
      j["significant"] = c.test.significant;
      comparisons.push_back(j);
    }
    summary.save(out_ / "stability_summary.csv");
    snr.save(out_ / "stability_snr.csv");
    Json j;
    j["method"] = res.method;
    j["repeats"] = res.repeats;
    j["metrics"] = metrics;
    j["snr_comparisons"] = comparisons;
    write_text(out_ / "stability.json", j.dump(2) + "\n");
    write_text(out_ / "stability.svg", stability_svg(panels));
  }

  std::string model_digest() {
    const std::vector<std::uint8_t> bytes = encode_model(model());
    return Digest().update(bytes.data(), bytes.size()).hex();
  }

  std::string data_digest() {
    load_data();
    Digest d;
    d.update(train_->images.values()).update(test_->images.values());
    for (std::size_t l : test_->labels) d.update(&l, sizeof l);
    return d.hex();
  }

  std::string method_context_digest(const MethodEntry& m) {
    if (model_digest_.empty()) model_digest_ = model_digest();
    if (data_digest_.empty()) data_digest_ = data_digest();
    return Digest().update(model_digest_).update(data_digest_).update(describe(m).dump()).hex();
  }

  void load_cache() {
    if (cache_loaded_) return;
    cache_loaded_ = true;
    const auto bin = out_ / "attributions.attb", idx = out_ / "attributions.json";
    if (!std::filesystem::exists(bin) || !std::filesystem::exists(idx)) return;
    try {
      AttributionStore store = decode_attributions(io::read_file(bin.string()));
      const Json j = Json::parse(read_text(idx));
      for (auto& [key, t] : store) {
        if (!j.at("entries").contains(key)) continue;
        const Json& e = j.at("entries").at(key);
        cache_[key] = CacheEntry{std::move(t), e.at("context").get<std::string>(),
                                 std::stoull(e.at("digest").get<std::string>(), nullptr, 16)};
      }
    } catch (const std::exception& e) {
      // A damaged cache is only a cache: start over.
      say("attribute", std::string("ignoring unreadable attribution cache: ") + e.what());
      cache_.clear();
    }
  }

  void save_cache() const {
    std::filesystem::create_directories(out_);
    AttributionStore store;
    Json entries = Json::object();
    for (const auto& [key, e] : cache_) {
      store.emplace(key, e.values);
      char hex[17];
      std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(e.digest));
      entries[key] = Json{{"context", e.context}, {"digest", hex}};
    }
    io::write_file((out_ / "attributions.attb").string(), encode_attributions(store));
    write_text(out_ / "attributions.json", Json{{"entries", entries}}.dump(1) + "\n");
  }

  void write_manifest(const Cohort& cohort, const std::vector<const MetricEntry*>& metrics,
                      const std::vector<const MethodEntry*>& methods) {
    Json j;
    j[kManifestKey] = 1;
    j["config"] = cfg_.source;
    j["config_dir"] = cfg_.base_dir.string();
    j["seed"] = cfg_.seed;
    j["data_digest"] = data_digest();
    j["model_digest"] = model_digest();
    j["cohort"] = cohort.indices;
    Json ms = Json::array();
    for (const MethodEntry* m : methods) ms.push_back(describe(*m));
    j["methods"] = ms;
    Json mt = Json::array();
    for (const MetricEntry* m : metrics) {
      Json d = describe(*m);
      d["seed"] = derive_seed(cfg_.seed, "metric:" + m->implementation);
      mt.push_back(d);
    }
    j["metrics"] = mt;
    Json outputs = Json::object();
    for (const char* f : {"scores.csv", "significance.csv", "correlation.csv", "alpha.csv"}) {
      outputs[f] = file_digest(out_ / f);
    }
    j["outputs"] = outputs;
    write_text(out_ / "manifest.json", j.dump(2) + "\n");
  }

  RunConfig cfg_;
  std::filesystem::path out_;
  std::ostream* log_;
  std::size_t threads_ = 1;
  std::optional<Dataset> train_, test_;
  std::vector<Tensor> references_;
  std::optional<Model> model_;
  std::optional<AdversarialPatch> patch_;
  std::map<std::string, CacheEntry> cache_;
  std::map<SegKey, Segmentation> seg_cache_;
  bool cache_loaded_ = false;
  std::string model_digest_, data_digest_;
};

}  // namespace attrbench
