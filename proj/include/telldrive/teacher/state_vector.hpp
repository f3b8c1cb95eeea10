#pragma once

#include <vector>

#include "telldrive/risk/risk.hpp"
#include "telldrive/sim/types.hpp"

namespace telldrive::teacher {

/// Flat scenario encoding z = (ego block, {p_i, v_i}, {tau_i}).
///   [0, 6)          ego x, y, vx, vy, cos th, sin th
///   [6, 6 + 4N)     per slot: dx, dy, dvx, dvy (ego frame)
///   [6 + 4N, 6+5N)  per slot: tau_i, infinite/absent stored as the risk horizon
struct StateVector {
  std::vector<double> z;
  int slots = 0;

  static int dimension(int slots) { return 6 + 5 * slots; }
  std::size_t neighbor_offset(int k) const { return 6 + 4 * static_cast<std::size_t>(k); }
  std::size_t tau_offset(int k) const { return 6 + 4 * static_cast<std::size_t>(slots) + k; }
};

/// `assessment.per_vehicle` is matched to observation columns by vehicle id.
StateVector encode_state(const sim::Observation& obs, const risk::ConflictAssessment& assessment,
                         double horizon);

/// tau for observation column k (kNoConflict when the vehicle has none).
double column_tau(const sim::Observation& obs, const risk::ConflictAssessment& assessment, int k);

}  // namespace telldrive::teacher
