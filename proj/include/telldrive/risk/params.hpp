#pragma once

namespace telldrive::risk {

struct RiskParams {
  double beta = 10.0;            // infraction weight
  double delta = 5.0;            // reflection flag threshold on Omega
  double conflict_radius = 4.0;  // m
  double horizon = 6.0;          // s, closest-approach search window

  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

}  // namespace telldrive::risk
