// egmf command-line driver. Exit codes: 0 success, 1 I/O failure,
// 2 configuration error, 3 numerical abort.

#include "egmf/config.hpp"
#include "egmf/error.hpp"
#include "egmf/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool full = false;
  std::string out_dir;
  std::vector<std::string> filters;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_config) {
  if (with_config) {
    cmd->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
    cmd->add_option("--filters", o.filters, "Comma-separated filter labels or kinds to run")->delimiter(',');
  }
  cmd->add_option("--seed", o.seed, "Run a single seed instead of the configured list");
  cmd->add_flag("--full", o.full, "Use the long horizons");
  cmd->add_option("--out", o.out_dir, "Output directory");
}

egmf::ExperimentConfig apply_common(egmf::ExperimentConfig cfg, const CommonOptions& o) {
  if (o.seed) cfg.seeds = {*o.seed};
  if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
  if (!o.filters.empty()) {
    std::vector<egmf::FilterEntry> kept;
    for (const auto& f : cfg.filters) {
      for (const auto& want : o.filters) {
        bool match = f.label == want;
        if (!match) {
          try {
            match = egmf::parse_filter_kind(want) == f.spec.kind;
          } catch (const egmf::ConfigError&) {
          }
        }
        if (match) {
          kept.push_back(f);
          break;
        }
      }
    }
    cfg.filters = std::move(kept);
  }
  cfg.validate();
  return cfg;
}

egmf::ExperimentConfig load(egmf::Experiment experiment, const CommonOptions& o) {
  egmf::ExperimentConfig cfg = egmf::default_config(experiment, o.full);
  if (!o.config_path.empty()) {
    cfg = egmf::load_config(o.config_path, o.full);
    if (cfg.experiment != experiment) {
      throw egmf::ConfigError("config '" + o.config_path + "' is for experiment '" +
                              egmf::to_string(cfg.experiment) + "'");
    }
  }
  return apply_common(std::move(cfg), o);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_medians(const egmf::RunReport& report) {
  std::cout << "experiment " << egmf::to_string(report.config.experiment) << ", M=" << report.config.ensemble_size
            << ", seeds=" << report.config.seeds.size() << ", wall " << fmt(report.wall_seconds) << " s\n";
  for (const auto& p : egmf::sweep_medians(report)) {
    std::cout << "  " << p.label << "  c=" << fmt(p.bandwidth_factor) << "  inflation=" << fmt(p.inflation)
              << "  median metric=" << fmt(p.median_rms);
    if (report.config.experiment != egmf::Experiment::single_bayes) {
      std::cout << "  L=2 fraction=" << fmt(p.median_two_component_fraction);
    }
    if (p.failures) std::cout << "  failures=" << p.failures;
    std::cout << '\n';
  }
  if (report.config.experiment == egmf::Experiment::single_bayes) {
    for (const auto& r : report.results) {
      std::cout << "  seed " << r.seed << "  " << r.label << "  histogram L1=" << fmt(r.histogram_l1.value_or(0.0))
                << '\n';
    }
  }
}

bool any_failure(const egmf::RunReport& report) {
  for (const auto& r : report.results) {
    if (r.failure) {
      std::cerr << "numerical failure: " << r.label << " seed " << r.seed << ": " << *r.failure << '\n';
      return true;
    }
  }
  return false;
}

int finish(const egmf::RunReport& report) {
  egmf::write_outputs(report, report.config.output_dir);
  std::cout << "outputs written to " << report.config.output_dir << '\n';
  return any_failure(report) ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble Gaussian mixture filter experiments"};
  app.require_subcommand(1);

  struct Sub {
    egmf::Experiment experiment;
    CLI::App* cmd;
    CommonOptions opts;
  };
  std::vector<Sub> subs;
  subs.reserve(4);
  for (auto e : {egmf::Experiment::single_bayes, egmf::Experiment::double_well, egmf::Experiment::langevin,
                 egmf::Experiment::lorenz63}) {
    subs.push_back({e, nullptr, {}});
    Sub& s = subs.back();
    s.cmd = app.add_subcommand(egmf::to_string(e), "Run the " + egmf::to_string(e) + " experiment");
    add_common(s.cmd, s.opts, true);
  }
  CommonOptions table_opts, sweep_opts;
  CLI::App* table1 = app.add_subcommand("table1", "Double-well RMS against the Fokker-Planck mean, M = 20, 50, 100");
  add_common(table1, table_opts, false);
  CLI::App* sweep = app.add_subcommand("lorenz-sweep", "Lorenz-63 sweep over bandwidth factor and inflation");
  add_common(sweep, sweep_opts, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (auto& s : subs) {
      if (s.cmd->parsed()) {
        const egmf::RunReport report = egmf::run_experiment(load(s.experiment, s.opts));
        print_medians(report);
        return finish(report);
      }
    }
    if (table1->parsed()) {
      int status = 0;
      std::ostringstream table;
      table << "M      RHF      EGMF     EnKF\n";
      for (int M : {20, 50, 100}) {
        CommonOptions o = table_opts;
        if (!o.out_dir.empty()) o.out_dir += "/M" + std::to_string(M);
        const egmf::RunReport report = egmf::run_double_well(apply_common(egmf::table1_config(M, o.full), o));
        status = std::max(status, finish(report));
        std::map<std::string, double> by_label;
        for (const auto& p : egmf::sweep_medians(report)) by_label[p.label] = p.median_rms;
        table << M << (M < 100 ? "     " : "    ") << fmt(by_label["rhf"]) << "   " << fmt(by_label["egmf"])
              << "   " << fmt(by_label["enkf"]) << '\n';
      }
      std::cout << table.str();
      return status;
    }
    if (sweep->parsed()) {
      egmf::ExperimentConfig cfg = egmf::lorenz_sweep_config(sweep_opts.full);
      if (!sweep_opts.config_path.empty()) cfg = egmf::load_config(sweep_opts.config_path, sweep_opts.full);
      const egmf::RunReport report = egmf::run_lorenz(apply_common(std::move(cfg), sweep_opts));
      std::cout << "filter  c  best-inflation  median RMS\n";
      for (const auto& p : egmf::tuned_inflation(report)) {
        std::cout << "  " << p.label << "  " << fmt(p.bandwidth_factor) << "  " << fmt(p.inflation) << "  "
                  << fmt(p.median_rms) << '\n';
      }
      return finish(report);
    }
  } catch (const egmf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const egmf::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const egmf::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
