#include "gridprobe/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include "gridprobe/acpf.hpp"
#include "gridprobe/ldf.hpp"
#include "gridprobe/parallel.hpp"

namespace gridprobe {

using nlohmann::json;

double percentile(std::vector<double> values, double q) {
  values.erase(std::remove_if(values.begin(), values.end(), [](double v) { return std::isnan(v); }),
               values.end());
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  if (std::isinf(values[lo]) || std::isinf(values[hi])) return values[pos - lo < 0.5 ? lo : hi];
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return percentile(std::move(values), 50.0); }

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<double> column_values(const Eigen::MatrixXd& m, int c) {
  return {m.col(c).data(), m.col(c).data() + m.rows()};
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace

int ConditionStudy::column(int horizon, DataMode mode) const {
  for (std::size_t c = 0; c < horizons.size(); ++c) {
    if (horizons[c] == horizon && modes[c] == mode) return static_cast<int>(c);
  }
  throw std::out_of_range("condition study has no column for horizon " + std::to_string(horizon));
}

double ConditionStudy::median_of(int horizon, DataMode mode) const {
  return median(column_values(values, column(horizon, mode)));
}

ConditionStudy run_condition_study(const Scenario& scenario, const ConditionStudyOptions& options) {
  if (options.trials < 1 || options.horizons.empty() || options.modes.empty()) {
    throw std::invalid_argument("condition study needs trials, horizons and modes");
  }
  ConditionStudy study;
  for (int h : options.horizons) {
    if (h < 1) throw std::invalid_argument("horizons must be at least 1");
    for (DataMode mode : options.modes) {
      study.columns.push_back("T" + std::to_string(h) + "_" + to_string(mode));
      study.horizons.push_back(h);
      study.modes.push_back(mode);
    }
  }
  const int max_h = *std::max_element(options.horizons.begin(), options.horizons.end());
  const int n = scenario.feeder.size();
  study.values.resize(options.trials, static_cast<Eigen::Index>(study.columns.size()));
  const std::uint64_t master = derive_seed(scenario.config.seed, 0xC0);
  parallel_for(
      static_cast<std::size_t>(options.trials),
      [&](std::size_t trial) {
        const StateSequence all = random_states(n, max_h, options.u_lower, options.u_upper,
                                                options.angle_deg, derive_seed(master, trial));
        for (std::size_t c = 0; c < study.columns.size(); ++c) {
          ProbingSetup setup = scenario.setup;
          setup.horizon = study.horizons[c];
          setup.mode = study.modes[c];
          const StateSequence states(all.begin(), all.begin() + setup.horizon);
          study.values(static_cast<Eigen::Index>(trial), static_cast<Eigen::Index>(c)) =
              condition_number(assemble_p2l_jacobian(scenario.feeder, setup, states));
        }
      },
      options.threads);
  return study;
}

std::vector<ViolationCell> run_violation_sweep(const Scenario& scenario,
                                               const std::vector<double>& gammas,
                                               const std::vector<VoltageBand>& bands) {
  if (gammas.empty() || bands.empty()) throw std::invalid_argument("violation sweep grids are empty");
  const LdfModel ldf = build_ldf(scenario.feeder, scenario.setup);
  const CandidateLibrary library =
      sample_library(scenario.setup, scenario.fleet, scenario.config.candidates,
                     derive_seed(scenario.config.seed, 0));
  std::vector<ViolationCell> cells;
  for (const auto& band : bands) {
    band.validate(scenario.feeder.base_voltage());
    for (double gamma : gammas) {
      const LoadUncertainty box = LoadUncertainty::around(scenario.s_o, gamma);
      const ScreeningResult screening = screen_library(library, ldf, box, band);
      cells.push_back({gamma, band, library.size(), screening.violating, screening.solver_failures,
                       screening.violation_percent()});
    }
  }
  return cells;
}

namespace {

StateSequence induced_states(const Scenario& scenario, const std::vector<Eigen::VectorXd>& setpoints) {
  StateSequence states;
  for (const auto& s_m : setpoints) {
    const Injections target =
        scatter_injections(scenario.feeder.size(), scenario.setup, s_m, scenario.s_o);
    states.push_back(solve_pf(scenario.feeder, target).state);
  }
  return states;
}

double setpoint_condition(const Scenario& scenario, const std::vector<Eigen::VectorXd>& setpoints) {
  try {
    return condition_number(
        assemble_p2l_jacobian(scenario.feeder, scenario.setup, induced_states(scenario, setpoints)));
  } catch (const PowerFlowError&) {
    return kInfiniteCondition;
  }
}

}  // namespace

std::vector<DesignConditioning> run_design_conditioning(const Scenario& scenario, int repetitions,
                                                        int random_subsets, unsigned threads) {
  if (repetitions < 1 || random_subsets < 1) throw std::invalid_argument("need at least one repetition and subset");
  const LdfModel ldf = build_ldf(scenario.feeder, scenario.setup);
  const int t_count = scenario.setup.horizon;
  std::vector<DesignConditioning> rows(repetitions);
  for (int r = 0; r < repetitions; ++r) {
    DesignConditioning& row = rows[r];
    row.repetition = r;
    row.seed = derive_seed(scenario.config.seed, 0xD0 + static_cast<std::uint64_t>(r));
    DesignOptions opts;
    opts.candidates = scenario.config.candidates;
    opts.seed = row.seed;
    const ProbingDesign design =
        design_probes(ldf, scenario.setup, scenario.fleet, scenario.box, scenario.config.band, opts);
    row.reduced_size = design.reduced.size();
    row.designed = setpoint_condition(scenario, design.setpoints);

    row.random.assign(random_subsets, 0.0);
    const int l_size = design.reduced.size();
    parallel_for(
        static_cast<std::size_t>(random_subsets),
        [&](std::size_t k) {
          std::mt19937_64 rng(derive_seed(row.seed, 1000 + k));
          std::vector<int> idx(l_size);
          for (int i = 0; i < l_size; ++i) idx[i] = i;
          std::shuffle(idx.begin(), idx.end(), rng);
          std::vector<Eigen::VectorXd> setpoints;
          for (int t = 0; t < t_count; ++t) setpoints.push_back(design.reduced.candidates[idx[t]]);
          row.random[k] = setpoint_condition(scenario, setpoints);
        },
        threads);
    row.random_p10 = percentile(row.random, 10.0);
    row.random_median = median(row.random);
  }
  return rows;
}

Eigen::VectorXd trial_loads(const Scenario& scenario, std::uint64_t seed) {
  if (!scenario.config.loads_in_box) return scenario.s_o;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::VectorXd s = scenario.box.lower;
  for (Eigen::Index i = 0; i < s.size(); ++i) s(i) += unit(rng) * (scenario.box.upper(i) - scenario.box.lower(i));
  return s;
}

MonteCarloSummary MonteCarloReport::summary() const {
  MonteCarloSummary s;
  s.trials = static_cast<int>(records.size());
  std::vector<double> rmse, cond, active, abs_active, abs_reactive;
  for (const auto& r : records) {
    if (!r.ok) {
      ++s.failures;
      continue;
    }
    rmse.push_back(r.rmse);
    cond.push_back(r.condition);
    for (Eigen::Index i = 0; i < r.active_percent.size(); ++i) {
      if (!std::isnan(r.active_percent(i))) {
        active.push_back(r.active_percent(i));
        abs_active.push_back(std::abs(r.active_percent(i)));
      }
      if (!std::isnan(r.reactive_percent(i))) abs_reactive.push_back(std::abs(r.reactive_percent(i)));
    }
  }
  s.failure_rate = s.trials ? static_cast<double>(s.failures) / s.trials : 0.0;
  s.median_rmse = median(rmse);
  s.median_condition = median(cond);
  s.active_p10 = percentile(active, 10.0);
  s.active_p90 = percentile(active, 90.0);
  s.active_interdecile = s.active_p90 - s.active_p10;
  s.median_abs_active = median(abs_active);
  s.median_abs_reactive = median(abs_reactive);
  s.max_abs_active = abs_active.empty() ? std::numeric_limits<double>::quiet_NaN()
                                        : *std::max_element(abs_active.begin(), abs_active.end());
  s.max_abs_reactive = abs_reactive.empty() ? std::numeric_limits<double>::quiet_NaN()
                                            : *std::max_element(abs_reactive.begin(), abs_reactive.end());
  return s;
}

MonteCarloReport run_p2l_montecarlo(const Scenario& base, const MonteCarloOptions& options) {
  Scenario scenario = options.mode ? with_setup(base, base.setup.horizon, *options.mode) : base;
  if (options.snr_metered_db) scenario.config.snr_metered_db = *options.snr_metered_db;
  if (options.snr_loads_db) scenario.config.snr_loads_db = *options.snr_loads_db;
  const int trials = options.trials.value_or(scenario.config.trials);
  if (trials < 1) throw std::invalid_argument("trials must be at least 1");

  MonteCarloReport report{scenario, options, scenario.config.snr_metered_db,
                          scenario.config.snr_loads_db, std::vector<TrialRecord>(trials)};
  const LdfModel ldf = build_ldf(scenario.feeder, scenario.setup);
  const PenaltyConfig penalty = scenario.penalty_config();
  const bool exact = std::isinf(report.snr_metered_db) && std::isinf(report.snr_loads_db);

  parallel_for(
      static_cast<std::size_t>(trials),
      [&](std::size_t k) {
        TrialRecord& rec = report.records[k];
        rec.trial = static_cast<int>(k);
        rec.seed = derive_seed(scenario.config.seed, k);
        try {
          auto start = std::chrono::steady_clock::now();
          DesignOptions d;
          d.candidates = scenario.config.candidates;
          d.seed = derive_seed(rec.seed, 0);
          d.method = options.msd ? SelectionMethod::automatic : SelectionMethod::random_subset;
          const ProbingDesign design =
              design_probes(ldf, scenario.setup, scenario.fleet, scenario.box, scenario.config.band, d);
          rec.violation_percent = design.report.violation_percent;
          rec.reduced_size = design.report.reduced_size;
          rec.diversity = design.report.diversity;
          rec.design_seconds = seconds_since(start);

          start = std::chrono::steady_clock::now();
          const Eigen::VectorXd loads = trial_loads(scenario, derive_seed(rec.seed, 2));
          const ProbingSimulation sim =
              simulate_probing(scenario.feeder, scenario.setup, design.setpoints, loads,
                               report.snr_metered_db, report.snr_loads_db, derive_seed(rec.seed, 1));
          rec.condition = condition_number(
              assemble_p2l_jacobian(scenario.feeder, scenario.setup, sim.states));
          const EstimationResult est =
              exact ? solve_noiseless(scenario.feeder, scenario.setup, sim.measurements)
                    : estimate_noisy(scenario.feeder, scenario.setup, sim.measurements, penalty);
          rec.estimate_seconds = seconds_since(start);
          const ErrorMetrics metrics = error_metrics(sim.states, sim.loads, est);
          rec.rmse = metrics.state_rmse;
          rec.active_percent = metrics.active_percent;
          rec.reactive_percent = metrics.reactive_percent;
          rec.estimated_loads = est.loads.average;
          rec.true_loads = Eigen::VectorXd::Zero(scenario.s_o.size());
          for (const auto& s : sim.loads) rec.true_loads += s;
          rec.true_loads /= static_cast<double>(sim.loads.size());
          rec.iterations = est.diagnostics.iterations;
          rec.converged = est.diagnostics.converged;
          rec.objective = est.diagnostics.objective;
          rec.ok = true;
        } catch (const std::exception& e) {
          rec.ok = false;
          rec.failure = e.what();
        }
      },
      options.threads);
  return report;
}

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", value);
  return buf;
}

void write_condition_study(const ConditionStudy& study, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto hist = open_csv(dir / "histogram.csv");
  hist << "trial";
  for (const auto& c : study.columns) hist << ',' << c;
  hist << '\n';
  for (Eigen::Index r = 0; r < study.values.rows(); ++r) {
    hist << r;
    for (Eigen::Index c = 0; c < study.values.cols(); ++c) hist << ',' << format_number(study.values(r, c));
    hist << '\n';
  }

  // Counts per decade of the condition number, plot-ready.
  auto bins = open_csv(dir / "bins.csv");
  bins << "log10_lower,log10_upper";
  for (const auto& c : study.columns) bins << ',' << c;
  bins << '\n';
  for (int e = 0; e < 20; ++e) {
    bins << e << ',' << (e + 1 < 20 ? std::to_string(e + 1) : std::string("inf"));
    for (Eigen::Index c = 0; c < study.values.cols(); ++c) {
      int count = 0;
      for (Eigen::Index r = 0; r < study.values.rows(); ++r) {
        const double lg = std::log10(study.values(r, c));
        if (lg >= e && (lg < e + 1 || e + 1 == 20)) ++count;
      }
      bins << ',' << count;
    }
    bins << '\n';
  }

  auto summary = open_csv(dir / "summary.csv");
  summary << "column,trials,singular,p10,median,p90\n";
  for (Eigen::Index c = 0; c < study.values.cols(); ++c) {
    const auto v = column_values(study.values, static_cast<int>(c));
    const auto singular = std::count_if(v.begin(), v.end(), [](double x) { return std::isinf(x); });
    summary << study.columns[c] << ',' << v.size() << ',' << singular << ','
            << format_number(percentile(v, 10)) << ',' << format_number(percentile(v, 50)) << ','
            << format_number(percentile(v, 90)) << '\n';
  }
}

void write_violation_sweep(const std::vector<ViolationCell>& cells, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto out = open_csv(dir / "report.csv");
  out << "gamma,band_lower,band_upper,candidates,violating,solver_failures,violation_percent\n";
  for (const auto& c : cells) {
    out << format_number(c.gamma) << ',' << format_number(c.band.lower) << ','
        << format_number(c.band.upper) << ',' << c.candidates << ',' << c.violating << ','
        << c.solver_failures << ',' << format_number(c.percent) << '\n';
  }
}

void write_design_conditioning(const std::vector<DesignConditioning>& rows,
                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto out = open_csv(dir / "conditioning.csv");
  out << "repetition,seed,reduced_size,designed,random_p10,random_median,designed_below_p10\n";
  for (const auto& r : rows) {
    out << r.repetition << ',' << r.seed << ',' << r.reduced_size << ',' << format_number(r.designed)
        << ',' << format_number(r.random_p10) << ',' << format_number(r.random_median) << ','
        << (r.beats_random() ? 1 : 0) << '\n';
  }
}

void write_montecarlo(const MonteCarloReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& setup = report.scenario.setup;
  const auto& feeder = report.scenario.feeder;
  const int o = setup.non_metered_count();

  auto out = open_csv(dir / "report.csv");
  out << "trial,seed,ok,failures,rmse,condition,violation_percent,reduced_size,diversity,"
         "iterations,converged,objective,failure\n";
  for (const auto& r : report.records) {
    out << r.trial << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ',' << (r.ok ? 0 : 1) << ','
        << format_number(r.rmse) << ',' << format_number(r.condition) << ','
        << format_number(r.violation_percent) << ',' << r.reduced_size << ','
        << format_number(r.diversity) << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << ','
        << format_number(r.objective) << ",\"";
    for (char ch : r.failure) out << (ch == '"' ? '\'' : ch);
    out << "\"\n";
  }

  auto bus = open_csv(dir / "bus_errors.csv");
  bus << "trial,bus,p_true,p_est,active_percent,q_true,q_est,reactive_percent\n";
  for (const auto& r : report.records) {
    if (!r.ok) continue;
    for (int i = 0; i < o; ++i) {
      bus << r.trial << ',' << feeder.bus_id(setup.non_metered[i]) << ','
          << format_number(r.true_loads(i)) << ',' << format_number(r.estimated_loads(i)) << ','
          << format_number(r.active_percent(i)) << ',' << format_number(r.true_loads(o + i)) << ','
          << format_number(r.estimated_loads(o + i)) << ',' << format_number(r.reactive_percent(i))
          << '\n';
    }
  }

  const MonteCarloSummary s = report.summary();
  auto sum = open_csv(dir / "summary.csv");
  sum << "metric,value\n";
  sum << "trials," << s.trials << '\n';
  sum << "failures," << s.failures << '\n';
  sum << "failure_rate," << format_number(s.failure_rate) << '\n';
  sum << "median_rmse," << format_number(s.median_rmse) << '\n';
  sum << "median_condition," << format_number(s.median_condition) << '\n';
  sum << "active_percent_p10," << format_number(s.active_p10) << '\n';
  sum << "active_percent_p90," << format_number(s.active_p90) << '\n';
  sum << "active_percent_interdecile," << format_number(s.active_interdecile) << '\n';
  sum << "median_abs_active_percent," << format_number(s.median_abs_active) << '\n';
  sum << "median_abs_reactive_percent," << format_number(s.median_abs_reactive) << '\n';
  sum << "max_abs_active_percent," << format_number(s.max_abs_active) << '\n';
  sum << "max_abs_reactive_percent," << format_number(s.max_abs_reactive) << '\n';
}

void write_design(const Scenario& scenario, const ProbingDesign& design,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& setup = scenario.setup;
  const int m = setup.probing_count();
  auto out = open_csv(dir / "setpoints.csv");
  out << "slot,bus,p,q\n";
  for (std::size_t t = 0; t < design.setpoints.size(); ++t) {
    for (int i = 0; i < m; ++i) {
      out << t << ',' << scenario.feeder.bus_id(setup.probing[i]) << ','
          << format_number(design.setpoints[t](i)) << ',' << format_number(design.setpoints[t](m + i))
          << '\n';
    }
  }
  auto dev = open_csv(dir / "devices.csv");
  dev << "slot,bus,device,p,q\n";
  for (std::size_t t = 0; t < design.device_setpoints.size(); ++t) {
    int row = 0;
    for (const auto& assets : scenario.fleet.buses) {
      for (std::size_t d = 0; d < assets.inverters.size(); ++d, ++row) {
        dev << t << ',' << scenario.feeder.bus_id(assets.bus) << ',' << d << ','
            << format_number(design.device_setpoints[t](row, 0)) << ','
            << format_number(design.device_setpoints[t](row, 1)) << '\n';
      }
    }
  }
  json report = design.report.to_json();
  report.erase("sample_seconds");
  report.erase("screen_seconds");
  report.erase("select_seconds");
  std::ofstream(dir / "design.json") << report.dump(2) << '\n';
}

void write_meta(const std::filesystem::path& dir, const std::string& experiment,
                const std::string& description, const Scenario& scenario, const json& extra) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["experiment"] = experiment;
  meta["description"] = description;
  meta["scenario"] = scenario.config.to_json();
  meta["feeder_buses"] = scenario.feeder.size();
  std::vector<std::string> probing, non_metered;
  for (int b : scenario.setup.probing) probing.push_back(scenario.feeder.bus_id(b));
  for (int b : scenario.setup.non_metered) non_metered.push_back(scenario.feeder.bus_id(b));
  meta["probing"] = probing;
  meta["non_metered"] = non_metered;
  meta["master_seed"] = scenario.config.seed;
  meta["schema_version"] = 1;
  meta["compiler"] = __VERSION__;
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

}  // namespace gridprobe
