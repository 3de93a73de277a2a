// attrbench: command-line front end for the benchmarking pipeline.
//
//   attrbench train      CONFIG
//   attrbench attribute  CONFIG [--pgm]
//   attrbench pilot      CONFIG
//   attrbench benchmark  CONFIG
//   attrbench compare    CONFIG --a METHOD --b METHOD [--metrics ID...]
//   attrbench stability  CONFIG [--repeats N]
//   attrbench report     CONFIG
//   attrbench export-idx CONFIG DIR
//
// Outputs go to the config's "output" directory, resolved against $ATTRBENCH_OUT when relative.
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical degeneracy.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attrbench/config.hpp"
#include "attrbench/error.hpp"
#include "attrbench/idx.hpp"
#include "attrbench/pipeline.hpp"
#include "attrbench/segmentation.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct Options {
  std::string config;
  std::optional<std::size_t> threads;
  bool quiet = false;
  // compare
  std::string a, b;
  std::vector<std::string> metrics;
  // stability
  std::optional<std::size_t> repeats;
  // attribute
  bool pgm = false;
  // export-idx
  std::string idx_dir;
};

attrbench::Pipeline make_pipeline(const Options& opt) {
  attrbench::RunConfig cfg = attrbench::load_run_config(opt.config);
  if (opt.threads) cfg.threads = *opt.threads;
  if (opt.repeats) cfg.stability.repeats = *opt.repeats;
  return attrbench::Pipeline(std::move(cfg), opt.quiet ? nullptr : &std::cerr);
}

void print_outputs(const attrbench::Pipeline& p) { std::cout << "outputs in " << p.output().string() << "\n"; }

int run(const std::string& command, const Options& opt) {
  attrbench::Pipeline p = make_pipeline(opt);
  if (command == "train") {
    const auto s = p.train();
    std::cout << "test accuracy " << attrbench::format_number(s.test_accuracy) << "\n";
  } else if (command == "attribute") {
    const attrbench::Cohort cohort = p.attribute();
    if (opt.pgm) {
      const auto dir = p.output() / "segments";
      std::filesystem::create_directories(dir);
      for (std::size_t image : cohort.indices) {
        const attrbench::Segmentation seg = attrbench::slic(p.test_data().image(image), attrbench::SlicParams{});
        attrbench::write_pgm(seg, (dir / ("image_" + std::to_string(image) + ".pgm")).string());
      }
    }
    std::cout << cohort.size() << " cohort images attributed\n";
  } else if (command == "pilot") {
    const auto rep = p.pilot();
    for (const auto& d : rep.decisions) {
      std::cout << d.metric << "  alpha=" << attrbench::format_number(d.alpha) << "  " << d.code
                << (d.partner.empty() ? "" : " (" + d.partner + ")") << "\n";
    }
  } else if (command == "benchmark") {
    const auto b = p.benchmark();
    std::cout << b.grid.significant_count() << " significant cells over " << b.metrics.size() << " metrics\n";
  } else if (command == "compare") {
    const auto rep = p.compare(opt.a, opt.b, opt.metrics);
    for (const auto& r : rep.rows) {
      std::cout << r.metric << "  CLES=" << attrbench::format_number(r.cles)
                << "  p=" << attrbench::format_number(r.test.p_value) << (r.test.significant ? "  *" : "") << "\n";
    }
  } else if (command == "stability") {
    const auto s = p.stability();
    for (const auto& m : s.metrics) {
      std::cout << m.metric << "  median SNR=" << attrbench::format_number(m.report.median_snr)
                << "  noise fraction=" << attrbench::format_number(m.report.noise_fraction) << "\n";
    }
  } else if (command == "report") {
    p.report();
  } else if (command == "export-idx") {
    // Writes the configured dataset's raw pixels as IDX pairs, e.g. to build a desk benchmark.
    attrbench::RunConfig cfg = p.config();
    cfg.dataset.normalize = false;
    attrbench::Pipeline raw(cfg, nullptr);
    const std::filesystem::path dir(opt.idx_dir);
    std::filesystem::create_directories(dir);
    attrbench::write_idx(raw.train_data(), (dir / "train-images.idx").string(), (dir / "train-labels.idx").string());
    attrbench::write_idx(raw.test_data(), (dir / "test-images.idx").string(), (dir / "test-labels.idx").string());
    std::cout << "wrote IDX files to " << dir.string() << "\n";
    return 0;
  }
  print_outputs(p);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attrbench: evaluate feature attribution methods with perturbation metrics"};
  app.require_subcommand(1);
  Options opt;
  app.add_flag("-q,--quiet", opt.quiet, "Suppress progress messages");
  app.add_option("-j,--threads", opt.threads, "Worker threads (default: config, else all cores)");

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("config", opt.config, "Run configuration (JSON) or a run manifest")->required();
    return sub;
  };
  with_config(app.add_subcommand("train", "Train the classifier and save it in the output directory"));
  with_config(app.add_subcommand("attribute", "Select the cohort and compute attribution maps"))
      ->add_flag("--pgm", opt.pgm, "Also export SLIC segmentations of the cohort as PGM");
  with_config(app.add_subcommand("pilot", "Run all metrics on a small pilot cohort and select metrics"));
  with_config(app.add_subcommand("benchmark", "Score every method and test it against the baseline"));
  auto* compare = with_config(app.add_subcommand("compare", "Pairwise Wilcoxon test and CLES of two methods"));
  compare->add_option("--a", opt.a, "First method id")->required();
  compare->add_option("--b", opt.b, "Second method id")->required();
  compare->add_option("--metrics", opt.metrics, "Metric implementations (default: all benchmarked)");
  with_config(app.add_subcommand("stability", "Repeat stochastic metrics and report SNR"))
      ->add_option("--repeats", opt.repeats, "Override the configured repeat count");
  with_config(app.add_subcommand("report", "Collect stage summaries into report.json and report.md"));
  with_config(app.add_subcommand("export-idx", "Write the configured dataset as IDX files"))
      ->add_option("dir", opt.idx_dir, "Destination directory")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, opt);
  } catch (const attrbench::Error& e) {
    std::cerr << "attrbench " << command << ": " << e.what() << "\n";
    return attrbench::exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "attrbench " << command << ": malformed JSON: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "attrbench " << command << ": " << e.what() << "\n";
    return kExitData;
  }
}
