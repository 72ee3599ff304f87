// Command-line front end: power flow, probe design, estimation and the
// Monte Carlo experiments. Every subcommand writes into --out.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "gridprobe/acpf.hpp"
#include "gridprobe/design.hpp"
#include "gridprobe/estimator.hpp"
#include "gridprobe/harness.hpp"
#include "gridprobe/ldf.hpp"
#include "gridprobe/parallel.hpp"
#include "gridprobe/scenario.hpp"

namespace fs = std::filesystem;
using namespace gridprobe;

namespace {

Injections read_injections(const fs::path& path, const FeederModel& feeder) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open injections '" + path.string() + "'");
  Injections s = Injections::zero(feeder.size());
  std::string line;
  std::getline(in, line);
  if (line.rfind("bus,p,q", 0) != 0) throw std::runtime_error("injections file must have header bus,p,q");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string id, p, q;
    if (!std::getline(ss, id, ',') || !std::getline(ss, p, ',') || !std::getline(ss, q)) {
      throw std::runtime_error("injections line " + std::to_string(line_no) + " needs bus,p,q");
    }
    const int b = feeder.index_of(id);
    s.p(b) = std::stod(p);
    s.q(b) = std::stod(q);
  }
  return s;
}

Scenario load_scenario(const std::string& path, std::optional<std::uint64_t> seed) {
  ScenarioConfig config = ScenarioConfig::load(path);
  if (seed) config.seed = *seed;
  return build_scenario(config);
}

int cmd_powerflow(const std::string& feeder_path, const std::string& injections_path, const fs::path& out) {
  const FeederModel feeder = FeederModel::load(feeder_path);
  const Injections target = read_injections(injections_path, feeder);
  const PowerFlowResult pf = solve_pf(feeder, target);
  fs::create_directories(out);
  std::ofstream csv(out / "state.csv");
  csv << "bus,u,theta_rad,theta_deg\n";
  for (int b = 0; b < feeder.size(); ++b) {
    csv << feeder.bus_id(b) << ',' << format_number(pf.state.u(b)) << ','
        << format_number(pf.state.theta(b)) << ',' << format_number(pf.state.theta(b) * 180.0 / M_PI)
        << '\n';
  }
  const auto s0 = substation_injection(feeder, pf.state);
  nlohmann::json meta = {{"iterations", pf.iterations},
                         {"residual", pf.residual},
                         {"substation_p", s0.real()},
                         {"substation_q", s0.imag()},
                         {"min_u", pf.state.u.minCoeff()},
                         {"max_u", pf.state.u.maxCoeff()}};
  std::ofstream(out / "powerflow.json") << meta.dump(2) << '\n';
  std::cout << "power flow converged in " << pf.iterations << " iterations; u in ["
            << pf.state.u.minCoeff() << ", " << pf.state.u.maxCoeff() << "]\n";
  return 0;
}

int cmd_design(const Scenario& sc, const fs::path& out, bool no_msd, int conditioning) {
  DesignOptions opts;
  opts.candidates = sc.config.candidates;
  opts.seed = derive_seed(sc.config.seed, 0);
  if (no_msd) opts.method = SelectionMethod::random_subset;
  const ProbingDesign design = design_pipeline(sc.feeder, sc.setup, sc.fleet, sc.box, sc.config.band, opts);
  write_design(sc, design, out);
  nlohmann::json extra = {{"timing_seconds",
                           {{"sample", design.report.sample_seconds},
                            {"screen", design.report.screen_seconds},
                            {"select", design.report.select_seconds}}}};
  if (conditioning > 0) {
    const auto rows = run_design_conditioning(sc, conditioning, 100);
    write_design_conditioning(rows, out);
    int below = 0;
    for (const auto& r : rows) below += r.beats_random() ? 1 : 0;
    std::cout << "designed condition below the random 10th percentile in " << below << " of "
              << rows.size() << " repetitions\n";
  }
  write_meta(out, "design", "probing setpoints: device sampling, compliance screening, diversity selection",
             sc, extra);
  std::cout << "library " << design.report.library_size << ", compliant " << design.report.reduced_size
            << " (" << format_number(design.report.violation_percent) << "% rejected), method "
            << design.report.method << ", diversity " << format_number(design.report.diversity) << '\n';
  return 0;
}

int cmd_estimate(const Scenario& sc, const fs::path& out, bool no_msd) {
  MonteCarloOptions opts;
  opts.msd = !no_msd;
  opts.trials = 1;
  const MonteCarloReport report = run_p2l_montecarlo(sc, opts);
  write_montecarlo(report, out);
  const TrialRecord& r = report.records.front();
  write_meta(out, "estimate", "single probing run: design, simulate, meter, estimate", report.scenario,
             {{"timing_seconds", {{"design", r.design_seconds}, {"estimate", r.estimate_seconds}}}});
  if (!r.ok) throw std::runtime_error("estimation failed: " + r.failure);
  std::cout << "state RMSE " << format_number(r.rmse) << ", condition " << format_number(r.condition)
            << ", median |active error| " << format_number(report.summary().median_abs_active) << "%\n";
  return 0;
}

int cmd_observability(const Scenario& sc, const fs::path& out, int trials) {
  ConditionStudyOptions opts;
  opts.trials = trials;
  opts.horizons = sc.config.condition_horizons;
  const ConditionStudy study = run_condition_study(sc, opts);
  write_condition_study(study, out);
  write_meta(out, "observability",
             "condition numbers of the probing Jacobian at random state sequences "
             "(magnitudes 0.90-1.10 pu, angles within 1.5 degrees)",
             sc, {{"trials", trials}});
  for (std::size_t c = 0; c < study.columns.size(); ++c) {
    std::cout << study.columns[c] << " median condition "
              << format_number(study.median_of(study.horizons[c], study.modes[c])) << '\n';
  }
  return 0;
}

int cmd_sweep(const Scenario& sc, const fs::path& out) {
  const auto cells = run_violation_sweep(sc, sc.config.sweep_gammas, sc.config.sweep_bands);
  write_violation_sweep(cells, out);
  write_meta(out, "violation_sweep", "percentage of sampled candidates rejected by the compliance LP "
             "over load-box and voltage-band grids", sc);
  for (const auto& c : cells) {
    std::cout << "band [" << c.band.lower << ", " << c.band.upper << "] gamma " << c.gamma << ": "
              << format_number(c.percent) << "% rejected\n";
  }
  return 0;
}

int cmd_montecarlo(const Scenario& sc, const fs::path& out, const MonteCarloOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  const MonteCarloReport report = run_p2l_montecarlo(sc, opts);
  write_montecarlo(report, out);
  nlohmann::json timing = nlohmann::json::array();
  for (const auto& r : report.records) timing.push_back({r.design_seconds, r.estimate_seconds});
  write_meta(out, "montecarlo", "Monte Carlo probing and load recovery with per-bus error statistics",
             report.scenario,
             {{"msd", opts.msd},
              {"trial_seeds_from", "derive_seed(master_seed, trial)"},
              {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
              {"trial_seconds_design_estimate", timing}});
  const auto s = report.summary();
  std::cout << s.trials << " trials, " << s.failures << " failed; median RMSE " << format_number(s.median_rmse)
            << ", active error p10/p90 " << format_number(s.active_p10) << "/" << format_number(s.active_p90)
            << "%\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inverter probing design and load recovery for distribution feeders"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--out", out_dir, "Output directory (default runs/<subcommand>)");
  app.add_option("--seed", seed, "Override the scenario master seed");

  std::string feeder_path, injections_path, scenario_path;
  auto* pf = app.add_subcommand("powerflow", "Solve the AC power flow for given injections");
  pf->add_option("feeder", feeder_path, "Feeder JSON")->required()->check(CLI::ExistingFile);
  pf->add_option("injections", injections_path, "CSV with bus,p,q")->required()->check(CLI::ExistingFile);

  bool no_msd = false;
  int conditioning = 0;
  auto* design = app.add_subcommand("design", "Design probing setpoints for a scenario");
  design->add_option("scenario", scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  design->add_flag("--no-msd", no_msd, "Pick a random compliant subset instead of the most diverse one");
  design->add_option("--conditioning", conditioning,
                     "Also compare designed conditioning against 100 random subsets, this many times");

  std::string mode_text;
  auto* estimate = app.add_subcommand("estimate", "Design, simulate and estimate once");
  estimate->add_option("scenario", scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  estimate->add_flag("--no-msd", no_msd, "Skip the diversity selection");
  estimate->add_option("--mode", mode_text, "phasor or nonphasor")->check(CLI::IsMember({"phasor", "nonphasor"}));

  int trials = 1000;
  auto* obs = app.add_subcommand("observability", "Condition-number histograms at random states");
  obs->add_option("scenario", scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  obs->add_option("--trials", trials, "Random state sequences")->check(CLI::PositiveNumber);

  auto* sweep = app.add_subcommand("sweep", "Rejected-candidate percentage over load boxes and bands");
  sweep->add_option("scenario", scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);

  std::optional<int> mc_trials;
  std::optional<double> snr_metered, snr_loads;
  unsigned threads = 0;
  auto* mc = app.add_subcommand("montecarlo", "Monte Carlo probing and load recovery");
  mc->add_option("scenario", scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  mc->add_flag("--no-msd", no_msd, "Skip the diversity selection");
  mc->add_option("--mode", mode_text, "phasor or nonphasor")->check(CLI::IsMember({"phasor", "nonphasor"}));
  mc->add_option("--trials", mc_trials, "Override the scenario trial count")->check(CLI::PositiveNumber);
  mc->add_option("--snr-metered", snr_metered, "Metered SNR in dB");
  mc->add_option("--snr-loads", snr_loads, "Load SNR in dB");
  mc->add_option("--threads", threads, "Worker threads (0 = hardware)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    const fs::path out = out_dir.empty() ? fs::path("runs") / name : fs::path(out_dir);
    if (*pf) return cmd_powerflow(feeder_path, injections_path, out);

    Scenario sc = load_scenario(scenario_path, seed);
    if (!mode_text.empty()) sc = with_setup(sc, sc.setup.horizon, parse_data_mode(mode_text));
    if (*design) return cmd_design(sc, out, no_msd, conditioning);
    if (*estimate) return cmd_estimate(sc, out, no_msd);
    if (*obs) return cmd_observability(sc, out, trials);
    if (*sweep) return cmd_sweep(sc, out);
    MonteCarloOptions opts;
    opts.msd = !no_msd;
    opts.trials = mc_trials;
    opts.snr_metered_db = snr_metered;
    opts.snr_loads_db = snr_loads;
    opts.threads = threads;
    return cmd_montecarlo(sc, out, opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
