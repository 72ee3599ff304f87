#include "gridprobe/feeder.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

namespace gridprobe {

using nlohmann::json;

FeederModel::FeederModel(std::vector<Bus> buses, std::vector<Line> lines,
                         double base_voltage)
    : lines_(std::move(lines)), base_voltage_(base_voltage) {
  if (!(base_voltage_ > 0.0)) throw FeederError("base voltage must be positive");

  std::set<std::string> seen;
  int substations = 0;
  for (const auto& bus : buses) {
    if (bus.id.empty()) throw FeederError("empty bus id");
    if (!seen.insert(bus.id).second) throw FeederError("duplicate bus id '" + bus.id + "'");
    if (bus.substation) {
      ++substations;
      substation_id_ = bus.id;
    } else {
      index_.emplace(bus.id, static_cast<int>(bus_ids_.size()));
      bus_ids_.push_back(bus.id);
    }
  }
  if (substations != 1) {
    throw FeederError("expected exactly one substation bus, found " + std::to_string(substations));
  }

  const int total = size() + 1;
  auto full_index = [&](const std::string& id) -> int {
    if (id == substation_id_) return 0;
    auto it = index_.find(id);
    if (it == index_.end()) throw FeederError("line references unknown bus '" + id + "'");
    return it->second + 1;
  };

  admittance_ = Eigen::MatrixXcd::Zero(total, total);
  std::vector<std::vector<int>> adjacency(total);
  for (const auto& line : lines_) {
    const int i = full_index(line.from);
    const int k = full_index(line.to);
    if (i == k) throw FeederError("self-loop line at bus '" + line.from + "'");
    if (line.r < 0.0 || line.x < 0.0 || (line.r == 0.0 && line.x == 0.0)) {
      throw FeederError("line " + line.from + "-" + line.to +
                        " has zero or negative impedance");
    }
    const std::complex<double> y = 1.0 / std::complex<double>(line.r, line.x);
    const std::complex<double> half_shunt(0.0, 0.5 * line.b);
    admittance_(i, k) -= y;
    admittance_(k, i) -= y;
    admittance_(i, i) += y + half_shunt;
    admittance_(k, k) += y + half_shunt;
    adjacency[i].push_back(k);
    adjacency[k].push_back(i);
  }

  std::vector<bool> reached(total, false);
  std::queue<int> frontier;
  frontier.push(0);
  reached[0] = true;
  while (!frontier.empty()) {
    const int i = frontier.front();
    frontier.pop();
    for (int k : adjacency[i]) {
      if (!reached[k]) {
        reached[k] = true;
        frontier.push(k);
      }
    }
  }
  for (int i = 1; i < total; ++i) {
    if (!reached[i]) {
      throw FeederError("disconnected feeder: bus '" + bus_ids_[i - 1] +
                        "' is unreachable from the substation");
    }
  }
}

FeederModel FeederModel::from_json(const json& doc) {
  std::vector<Bus> buses;
  std::vector<Line> lines;
  try {
    for (const auto& b : doc.at("buses")) {
      Bus bus;
      bus.id = b.at("id").is_string() ? b.at("id").get<std::string>()
                                      : b.at("id").dump();
      bus.substation = b.value("substation", false);
      buses.push_back(std::move(bus));
    }
    auto id_of = [](const json& v) {
      return v.is_string() ? v.get<std::string>() : v.dump();
    };
    for (const auto& l : doc.at("lines")) {
      Line line;
      line.from = id_of(l.at("from"));
      line.to = id_of(l.at("to"));
      line.r = l.at("r").get<double>();
      line.x = l.at("x").get<double>();
      line.b = l.value("b", 0.0);
      lines.push_back(std::move(line));
    }
    const double base = doc.value("base_voltage", 1.0);
    return FeederModel(std::move(buses), std::move(lines), base);
  } catch (const json::exception& e) {
    throw FeederError(std::string("feeder parse error: ") + e.what());
  }
}

FeederModel FeederModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FeederError("cannot open feeder file " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw FeederError("feeder parse error in " + path.string() + ": " + e.what());
  }
  return from_json(doc);
}

json FeederModel::to_json() const {
  json doc;
  doc["base_voltage"] = base_voltage_;
  doc["buses"] = json::array();
  doc["buses"].push_back({{"id", substation_id_}, {"substation", true}});
  for (const auto& id : bus_ids_) doc["buses"].push_back({{"id", id}});
  doc["lines"] = json::array();
  for (const auto& l : lines_) {
    json entry{{"from", l.from}, {"to", l.to}, {"r", l.r}, {"x", l.x}};
    if (l.b != 0.0) entry["b"] = l.b;
    doc["lines"].push_back(entry);
  }
  return doc;
}

int FeederModel::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    if (id == substation_id_) throw FeederError("bus '" + id + "' is the substation");
    throw FeederError("unknown bus '" + id + "'");
  }
  return it->second;
}

bool FeederModel::contains(const std::string& id) const {
  return id == substation_id_ || index_.count(id) > 0;
}

ReducedAdmittance FeederModel::admittance_submatrices() const {
  const int n = size();
  return {admittance_.bottomRightCorner(n, n), admittance_.block(1, 0, n, 1)};
}

std::string to_string(DataMode mode) {
  return mode == DataMode::phasor ? "phasor" : "nonphasor";
}

DataMode parse_data_mode(const std::string& text) {
  if (text == "phasor") return DataMode::phasor;
  if (text == "nonphasor" || text == "non-phasor") return DataMode::nonphasor;
  throw std::invalid_argument("unknown data mode '" + text + "'");
}

void ProbingSetup::validate(const FeederModel& feeder) const {
  const int n = feeder.size();
  if (horizon < 1) throw std::invalid_argument("probing horizon must be at least 1");
  std::vector<int> owner(n, 0);
  for (int b : probing) {
    if (b < 0 || b >= n) throw std::invalid_argument("probing bus index out of range");
    owner[b] += 1;
  }
  for (int b : non_metered) {
    if (b < 0 || b >= n) throw std::invalid_argument("non-metered bus index out of range");
    owner[b] += 2;
  }
  for (int b = 0; b < n; ++b) {
    if (owner[b] == 0) {
      throw std::invalid_argument("bus '" + feeder.bus_id(b) +
                                  "' is neither probing nor non-metered");
    }
    if (owner[b] != 1 && owner[b] != 2) {
      throw std::invalid_argument("bus '" + feeder.bus_id(b) +
                                  "' listed more than once or in both sets");
    }
  }
  if (probing.empty()) throw std::invalid_argument("probing set is empty");
}

ProbingSetup ProbingSetup::from_ids(const FeederModel& feeder,
                                    const std::vector<std::string>& probing_ids,
                                    const std::vector<std::string>& non_metered_ids,
                                    int horizon, DataMode mode) {
  ProbingSetup setup;
  for (const auto& id : probing_ids) setup.probing.push_back(feeder.index_of(id));
  for (const auto& id : non_metered_ids) setup.non_metered.push_back(feeder.index_of(id));
  setup.horizon = horizon;
  setup.mode = mode;
  setup.validate(feeder);
  return setup;
}

void InverterFleet::validate(const FeederModel& feeder, const ProbingSetup& setup) const {
  std::set<int> seen;
  for (const auto& assets : buses) {
    if (assets.bus < 0 || assets.bus >= feeder.size()) {
      throw std::invalid_argument("fleet bus index out of range");
    }
    if (std::find(setup.probing.begin(), setup.probing.end(), assets.bus) ==
        setup.probing.end()) {
      throw std::invalid_argument("fleet bus '" + feeder.bus_id(assets.bus) +
                                  "' is not a probing bus");
    }
    if (!seen.insert(assets.bus).second) {
      throw std::invalid_argument("fleet bus '" + feeder.bus_id(assets.bus) +
                                  "' listed twice");
    }
    for (const auto& inv : assets.inverters) {
      if (!(inv.capacity > 0.0)) throw std::invalid_argument("inverter capacity must be positive");
      if (inv.p_max < 0.0 || inv.p_max > inv.capacity) {
        throw std::invalid_argument("inverter active limit must lie in [0, capacity]");
      }
    }
  }
}

}  // namespace gridprobe
