#include "gridprobe/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "gridprobe/ldf.hpp"

namespace gridprobe {

using nlohmann::json;

int LoadProfile::column_of(const std::string& id) const {
  const auto it = std::find(bus_ids.begin(), bus_ids.end(), id);
  return it == bus_ids.end() ? -1 : static_cast<int>(it - bus_ids.begin());
}

LoadProfile synthetic_profile(const std::vector<std::string>& bus_ids, int intervals, double peak,
                              double power_factor, std::uint64_t seed) {
  if (intervals < 1 || !(peak > 0.0)) throw std::invalid_argument("invalid synthetic profile size");
  if (!(power_factor > 0.0 && power_factor <= 1.0)) throw std::invalid_argument("power factor must lie in (0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> shift(-1.5, 1.5);
  std::uniform_real_distribution<double> scale(0.5, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  const int buses = static_cast<int>(bus_ids.size());
  LoadProfile out;
  out.bus_ids = bus_ids;
  out.active.resize(intervals, buses);
  for (int b = 0; b < buses; ++b) {
    const double s = shift(rng);
    const double a = scale(rng);
    for (int k = 0; k < intervals; ++k) {
      const double hour = 24.0 * k / intervals;
      const double morning = (hour - 7.5 - s) / 1.5;
      const double evening = (hour - 19.0 - s) / 2.5;
      const double shape = 0.35 + 0.25 * std::exp(-morning * morning) + 0.6 * std::exp(-evening * evening);
      out.active(k, b) = a * std::max(0.05, shape * (1.0 + noise(rng)));
    }
  }
  if (buses > 0) out.active *= peak / out.active.maxCoeff();
  out.reactive = out.active * std::tan(std::acos(power_factor));
  return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell.erase(0, cell.find_first_not_of(" \t\r"));
    cell.erase(cell.find_last_not_of(" \t\r") + 1);
    cells.push_back(cell);
  }
  return cells;
}

}  // namespace

LoadProfile read_profile_csv(const std::filesystem::path& path, double power_factor) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open load profile '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ScenarioError("load profile '" + path.string() + "' is empty");
  const auto header = split_csv(line);
  if (header.empty() || header.front() != "interval") {
    throw ScenarioError("load profile must start with an 'interval' column");
  }
  std::vector<std::string> active_cols;
  std::vector<int> active_pos;
  std::vector<std::pair<std::string, int>> reactive_cols;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h.size() > 2 && h.compare(h.size() - 2, 2, ":q") == 0) {
      reactive_cols.emplace_back(h.substr(0, h.size() - 2), static_cast<int>(c));
    } else {
      active_cols.push_back(h);
      active_pos.push_back(static_cast<int>(c));
    }
  }
  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw ScenarioError("load profile line " + std::to_string(line_no) + " has " +
                          std::to_string(cells.size()) + " cells, expected " +
                          std::to_string(header.size()));
    }
    std::vector<double> values;
    for (const auto& cell : cells) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ScenarioError("load profile line " + std::to_string(line_no) + ": '" + cell +
                            "' is not a number");
      }
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw ScenarioError("load profile has no intervals");

  LoadProfile out;
  out.bus_ids = active_cols;
  const int k = static_cast<int>(rows.size());
  const int b = static_cast<int>(active_cols.size());
  out.active.resize(k, b);
  out.reactive.resize(k, b);
  const double ratio = std::tan(std::acos(power_factor));
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < b; ++j) {
      out.active(i, j) = rows[i][active_pos[j]];
      out.reactive(i, j) = ratio * out.active(i, j);
    }
  }
  for (const auto& [id, c] : reactive_cols) {
    const int j = out.column_of(id);
    if (j < 0) throw ScenarioError("reactive column '" + id + ":q' has no active column");
    for (int i = 0; i < k; ++i) out.reactive(i, j) = rows[i][c];
  }
  return out;
}

namespace {

double parse_snr(const json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    throw ScenarioError("SNR must be a number or \"inf\"");
  }
  return v.get<double>();
}

json snr_json(double v) { return std::isinf(v) ? json("inf") : json(v); }

VoltageBand parse_band(const json& v) {
  if (!v.is_array() || v.size() != 2) throw ScenarioError("voltage band must be [lower, upper]");
  return {v[0].get<double>(), v[1].get<double>()};
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
      throw ScenarioError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

}  // namespace

ScenarioConfig ScenarioConfig::from_json(const json& doc, const std::filesystem::path& base_dir) {
  ScenarioConfig c;
  try {
    reject_unknown(doc,
                   {"feeder", "placement", "horizon", "mode", "fleet", "candidates", "voltage_band",
                    "load_uncertainty", "snr", "penalty", "load_box_penalty", "zero_injection",
                    "trials", "seed", "loads", "true_loads", "experiments", "description"},
                   "scenario");
    if (!doc.contains("feeder")) throw ScenarioError("scenario needs a 'feeder' path");
    c.feeder = doc["feeder"].get<std::string>();
    if (c.feeder.is_relative() && !base_dir.empty()) c.feeder = base_dir / c.feeder;

    const json& place = doc.at("placement");
    if (place.contains("random")) {
      const json& r = place["random"];
      c.random_non_metered = r.at("non_metered").get<int>();
      c.placement_seed = r.value("seed", std::uint64_t{1});
    } else {
      c.probing = place.at("probing").get<std::vector<std::string>>();
      c.non_metered = place.value("non_metered", std::vector<std::string>{});
    }
    c.horizon = doc.value("horizon", c.horizon);
    if (doc.contains("mode")) c.mode = parse_data_mode(doc["mode"].get<std::string>());

    if (doc.contains("fleet")) {
      const json& f = doc["fleet"];
      reject_unknown(f, {"class", "capacity", "p_max"}, "fleet");
      c.fleet_class = f.value("class", c.fleet_class);
      c.capacity = f.value("capacity", c.capacity);
      c.p_max = f.value("p_max", c.p_max);
    }
    c.candidates = doc.value("candidates", c.candidates);
    if (doc.contains("voltage_band")) c.band = parse_band(doc["voltage_band"]);
    if (doc.contains("load_uncertainty")) {
      const json& u = doc["load_uncertainty"];
      if (u.contains("gamma")) {
        c.gamma = u["gamma"].get<double>();
      } else if (u.contains("factors")) {
        c.box_lower_factor = u["factors"].at(0).get<double>();
        c.box_upper_factor = u["factors"].at(1).get<double>();
      } else {
        throw ScenarioError("load_uncertainty needs 'gamma' or 'factors'");
      }
    }
    if (doc.contains("snr")) {
      const json& s = doc["snr"];
      if (s.contains("metered")) c.snr_metered_db = parse_snr(s["metered"]);
      if (s.contains("loads")) c.snr_loads_db = parse_snr(s["loads"]);
    }
    if (doc.contains("penalty")) c.penalty = parse_penalty(doc["penalty"].get<std::string>());
    c.use_load_box = doc.value("load_box_penalty", c.use_load_box);
    if (doc.contains("true_loads")) {
      const auto v = doc["true_loads"].get<std::string>();
      if (v != "box" && v != "nominal") throw ScenarioError("true_loads must be 'box' or 'nominal'");
      c.loads_in_box = v == "box";
    }
    c.zero_injection = doc.value("zero_injection", c.zero_injection);
    c.trials = doc.value("trials", c.trials);
    c.seed = doc.value("seed", c.seed);

    if (doc.contains("loads")) {
      const json& l = doc["loads"];
      reject_unknown(l, {"profile", "file", "intervals", "interval", "peak", "power_factor", "seed"}, "loads");
      if (l.contains("file")) {
        c.load_file = l["file"].get<std::string>();
        if (c.load_file.is_relative() && !base_dir.empty()) c.load_file = base_dir / c.load_file;
      } else if (l.value("profile", std::string("synthetic")) != "synthetic") {
        throw ScenarioError("loads.profile must be 'synthetic' or give a 'file'");
      }
      c.load_intervals = l.value("intervals", c.load_intervals);
      c.load_interval = l.value("interval", c.load_interval);
      c.load_peak = l.value("peak", c.load_peak);
      c.power_factor = l.value("power_factor", c.power_factor);
      c.load_seed = l.value("seed", c.load_seed);
    }
    if (doc.contains("experiments")) {
      const json& e = doc["experiments"];
      reject_unknown(e, {"gammas", "bands", "horizons", "snr"}, "experiments");
      if (e.contains("gammas")) c.sweep_gammas = e["gammas"].get<std::vector<double>>();
      if (e.contains("bands")) {
        c.sweep_bands.clear();
        for (const auto& b : e["bands"]) c.sweep_bands.push_back(parse_band(b));
      }
      if (e.contains("horizons")) c.condition_horizons = e["horizons"].get<std::vector<int>>();
      if (e.contains("snr")) c.snr_grid = e["snr"].get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw ScenarioError(std::string("malformed scenario: ") + e.what());
  }

  if (c.trials < 1) throw ScenarioError("trials must be at least 1");
  if (c.horizon < 1) throw ScenarioError("horizon must be at least 1");
  if (c.candidates < 1) throw ScenarioError("candidates must be at least 1");
  if (c.gamma && !(*c.gamma > 0.0)) throw ScenarioError("gamma must be positive");
  for (double g : c.sweep_gammas) {
    if (!(g > 0.0)) throw ScenarioError("sweep gammas must be positive");
  }
  if (c.fleet_class != "storage" && c.fleet_class != "solar" && c.fleet_class != "mixed") {
    throw ScenarioError("fleet class must be storage, solar or mixed");
  }
  return c;
}

ScenarioConfig ScenarioConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open scenario '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ScenarioError("scenario '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(doc, path.parent_path());
}

json ScenarioConfig::to_json() const {
  json doc;
  doc["feeder"] = feeder.string();
  if (random_non_metered) {
    doc["placement"] = {{"random", {{"non_metered", *random_non_metered}, {"seed", placement_seed}}}};
  } else {
    doc["placement"] = {{"probing", probing}, {"non_metered", non_metered}};
  }
  doc["horizon"] = horizon;
  doc["mode"] = to_string(mode);
  doc["fleet"] = {{"class", fleet_class}, {"capacity", capacity}, {"p_max", p_max}};
  doc["candidates"] = candidates;
  doc["voltage_band"] = {band.lower, band.upper};
  if (gamma) {
    doc["load_uncertainty"] = {{"gamma", *gamma}};
  } else {
    doc["load_uncertainty"] = {{"factors", {box_lower_factor, box_upper_factor}}};
  }
  doc["snr"] = {{"metered", snr_json(snr_metered_db)}, {"loads", snr_json(snr_loads_db)}};
  doc["penalty"] = to_string(penalty);
  doc["load_box_penalty"] = use_load_box;
  doc["true_loads"] = loads_in_box ? "box" : "nominal";
  doc["zero_injection"] = zero_injection;
  doc["trials"] = trials;
  doc["seed"] = seed;
  json loads = {{"intervals", load_intervals},
                {"interval", load_interval},
                {"peak", load_peak},
                {"power_factor", power_factor},
                {"seed", load_seed}};
  if (load_file.empty()) {
    loads["profile"] = "synthetic";
  } else {
    loads["file"] = load_file.string();
  }
  doc["loads"] = loads;
  json bands = json::array();
  for (const auto& b : sweep_bands) bands.push_back({b.lower, b.upper});
  doc["experiments"] = {{"gammas", sweep_gammas},
                        {"bands", bands},
                        {"horizons", condition_horizons},
                        {"snr", snr_grid}};
  return doc;
}

PenaltyConfig Scenario::penalty_config() const {
  PenaltyConfig p;
  p.metering = config.penalty;
  p.coupling = config.penalty;
  const double sigma = snr_to_sigma(config.snr_loads_db);
  p.coupling_relative_sigma = sigma > 0.0 ? std::sqrt(2.0) * sigma : kExactDataRelativeSigma;
  if (config.use_load_box) p.load_box = box;
  p.zero_injection_buses = zero_injection;
  return p;
}

Scenario build_scenario(const ScenarioConfig& config) {
  FeederModel feeder = FeederModel::load(config.feeder);
  const int n = feeder.size();

  ProbingSetup setup;
  setup.horizon = config.horizon;
  setup.mode = config.mode;
  if (config.random_non_metered) {
    const int o = *config.random_non_metered;
    if (o < 0 || o >= n) throw ScenarioError("random placement needs 0 <= non_metered < " + std::to_string(n));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(config.placement_seed);
    std::shuffle(order.begin(), order.end(), rng);
    setup.non_metered.assign(order.begin(), order.begin() + o);
    setup.probing.assign(order.begin() + o, order.end());
    std::sort(setup.non_metered.begin(), setup.non_metered.end());
    std::sort(setup.probing.begin(), setup.probing.end());
  } else {
    for (const auto& id : config.probing) setup.probing.push_back(feeder.index_of(id));
    for (const auto& id : config.non_metered) setup.non_metered.push_back(feeder.index_of(id));
  }
  setup.validate(feeder);

  std::vector<int> zero;
  for (const auto& id : config.zero_injection) zero.push_back(feeder.index_of(id));

  LoadProfile profile = config.load_file.empty()
                            ? synthetic_profile(feeder.bus_ids(), config.load_intervals,
                                                config.load_peak, config.power_factor, config.load_seed)
                            : read_profile_csv(config.load_file, config.power_factor);
  if (config.load_interval < 0 || config.load_interval >= profile.intervals()) {
    throw ScenarioError("load interval " + std::to_string(config.load_interval) +
                        " outside the profile (" + std::to_string(profile.intervals()) + " intervals)");
  }
  Injections nominal = Injections::zero(n);
  for (int b = 0; b < n; ++b) {
    const int col = profile.column_of(feeder.bus_id(b));
    if (col < 0) continue;  // buses without a column carry no load
    nominal.p(b) = -profile.active(config.load_interval, col);
    nominal.q(b) = -profile.reactive(config.load_interval, col);
  }
  for (int b : zero) {
    nominal.p(b) = 0.0;
    nominal.q(b) = 0.0;
  }

  InverterFleet fleet;
  for (int i = 0; i < setup.probing_count(); ++i) {
    const int b = setup.probing[i];
    InverterClass kind = InverterClass::storage;
    if (config.fleet_class == "solar" || (config.fleet_class == "mixed" && i % 2 == 1)) {
      kind = InverterClass::solar;
    }
    fleet.buses.push_back({b, {{kind, config.capacity, config.p_max}}, nominal.p(b), nominal.q(b)});
  }
  fleet.validate(feeder, setup);

  Eigen::VectorXd s_o = stack_injections(nominal, setup.non_metered);
  LoadUncertainty box = config.gamma
                            ? LoadUncertainty::around(s_o, *config.gamma)
                            : LoadUncertainty::scaled(s_o, config.box_lower_factor, config.box_upper_factor);
  box.validate();
  config.band.validate(feeder.base_voltage());

  Scenario sc{config, std::move(feeder), std::move(setup), std::move(fleet), std::move(nominal),
              std::move(s_o), std::move(box), std::move(zero)};
  PenaltyConfig check = sc.penalty_config();
  check.validate(sc.setup);
  return sc;
}

Scenario with_setup(const Scenario& base, int horizon, DataMode mode) {
  Scenario sc = base;
  sc.config.horizon = horizon;
  sc.config.mode = mode;
  sc.setup.horizon = horizon;
  sc.setup.mode = mode;
  return sc;
}

StateSequence random_states(int buses, int slots, double u_lo, double u_hi, double angle_deg,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(u_lo, u_hi);
  const double a = angle_deg * M_PI / 180.0;
  std::uniform_real_distribution<double> ang(-a, a);
  StateSequence out;
  for (int t = 0; t < slots; ++t) {
    BusState s{Eigen::VectorXd(buses), Eigen::VectorXd(buses)};
    for (int b = 0; b < buses; ++b) s.u(b) = mag(rng);
    for (int b = 0; b < buses; ++b) s.theta(b) = ang(rng);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace gridprobe
