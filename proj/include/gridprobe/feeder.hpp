#pragma once

#include <complex>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace gridprobe {

class FeederError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Bus {
  std::string id;
  bool substation = false;
};

/// Series impedance r + jx and total shunt susceptance b, all per-unit.
/// The shunt is split evenly between the two ends (pi model).
struct Line {
  std::string from;
  std::string to;
  double r = 0.0;
  double x = 0.0;
  double b = 0.0;
};

/// Admittance blocks with the substation row/column removed.
struct ReducedAdmittance {
  Eigen::MatrixXcd block;     // N x N, non-substation buses
  Eigen::VectorXcd coupling;  // N, column of Y towards the substation
};

/// Single-phase feeder with a fixed substation (slack) bus.
///
/// Internally the substation always sits at admittance index 0 and the
/// non-substation buses follow in document order, so non-substation bus
/// `n` (0-based) lives at row `n + 1` of `admittance()`. Every per-bus
/// vector elsewhere in the library is indexed by `n`.
class FeederModel {
 public:
  FeederModel(std::vector<Bus> buses, std::vector<Line> lines,
              double base_voltage = 1.0);

  static FeederModel from_json(const nlohmann::json& doc);
  static FeederModel load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  /// Number of non-substation buses.
  int size() const { return static_cast<int>(bus_ids_.size()); }
  double base_voltage() const { return base_voltage_; }

  const std::string& substation_id() const { return substation_id_; }
  const std::string& bus_id(int n) const { return bus_ids_.at(n); }
  const std::vector<std::string>& bus_ids() const { return bus_ids_; }
  /// Non-substation index of `id`; throws for unknown ids and the substation.
  int index_of(const std::string& id) const;
  bool contains(const std::string& id) const;

  const std::vector<Line>& lines() const { return lines_; }
  /// Full (N+1)x(N+1) bus admittance matrix, substation first.
  const Eigen::MatrixXcd& admittance() const { return admittance_; }
  ReducedAdmittance admittance_submatrices() const;

 private:
  std::string substation_id_;
  std::vector<std::string> bus_ids_;
  std::unordered_map<std::string, int> index_;
  std::vector<Line> lines_;
  double base_voltage_;
  Eigen::MatrixXcd admittance_;
};

enum class DataMode { phasor, nonphasor };

std::string to_string(DataMode mode);
DataMode parse_data_mode(const std::string& text);

/// Partition of the non-substation buses into probing buses (metered, with
/// controllable inverters) and non-metered buses, plus the probing horizon.
struct ProbingSetup {
  std::vector<int> probing;
  std::vector<int> non_metered;
  int horizon = 1;
  DataMode mode = DataMode::nonphasor;

  int probing_count() const { return static_cast<int>(probing.size()); }
  int non_metered_count() const { return static_cast<int>(non_metered.size()); }

  /// Throws std::invalid_argument when the partition is not valid for `feeder`.
  void validate(const FeederModel& feeder) const;

  static ProbingSetup from_ids(const FeederModel& feeder,
                               const std::vector<std::string>& probing_ids,
                               const std::vector<std::string>& non_metered_ids,
                               int horizon, DataMode mode);
};

enum class InverterClass { solar, storage };

struct Inverter {
  InverterClass kind = InverterClass::storage;
  double capacity = 0.0;  // apparent power rating, pu
  double p_max = 0.0;     // available solar power or storage rate, pu
};

/// Devices and known (metered) non-controllable net injection at one probing bus.
struct ProbingBusAssets {
  int bus = -1;
  std::vector<Inverter> inverters;
  double p_fixed = 0.0;
  double q_fixed = 0.0;
};

struct InverterFleet {
  std::vector<ProbingBusAssets> buses;

  /// Checks device ratings and that every fleet bus is a probing bus.
  void validate(const FeederModel& feeder, const ProbingSetup& setup) const;
};

}  // namespace gridprobe
