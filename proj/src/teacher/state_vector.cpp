#include "telldrive/teacher/state_vector.hpp"

#include <algorithm>
#include <cmath>

namespace telldrive::teacher {

double column_tau(const sim::Observation& obs, const risk::ConflictAssessment& assessment, int k) {
  const int id = obs.neighbor_ids.at(static_cast<std::size_t>(k));
  for (const auto& c : assessment.per_vehicle)
    if (c.vehicle_id == id) return c.tau;
  return risk::kNoConflict;
}

StateVector encode_state(const sim::Observation& obs, const risk::ConflictAssessment& assessment,
                         double horizon) {
  StateVector out;
  out.slots = static_cast<int>(obs.slots());
  out.z.assign(static_cast<std::size_t>(StateVector::dimension(out.slots)), 0.0);
  std::copy(obs.ego.begin(), obs.ego.end(), out.z.begin());
  for (int k = 0; k < out.slots; ++k) {
    const auto& col = obs.neighbors[static_cast<std::size_t>(k)];
    std::copy(col.begin(), col.begin() + 4, out.z.begin() + static_cast<long>(out.neighbor_offset(k)));
    double tau = horizon;
    if (k < obs.neighbor_count) tau = std::min(column_tau(obs, assessment, k), horizon);
    out.z[out.tau_offset(k)] = tau;
  }
  return out;
}

}  // namespace telldrive::teacher
