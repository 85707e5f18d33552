#pragma once

// Central finite-difference gradient checks against the tape.

#include <functional>
#include <random>
#include <string>

#include "kbdistill/tape.hpp"

namespace kbd::testing {

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
  std::string worst_coordinate;

  double pass_rate() const { return checked == 0 ? 0.0 : static_cast<double>(passed) / checked; }
};

struct GradCheckOptions {
  double step = 1e-4;
  double rel_tol = 1e-3;
  double abs_floor = 1e-7;  // both gradients below this count as agreeing
  std::size_t per_param = 6;
};

/// `value` evaluates the loss at the current parameters; `gradient` fills
/// analytic gradients. Half of the sampled coordinates per parameter come
/// from the analytic support, half uniformly.
GradCheckResult grad_check(ParamStore& params, const std::function<Real()>& value,
                           const std::function<void(GradBuffer&)>& gradient, std::mt19937_64& rng,
                           const GradCheckOptions& options = {});

/// Convenience for losses built on a tape.
GradCheckResult grad_check_tape(ParamStore& params, const std::function<Var(Tape&)>& loss,
                                std::mt19937_64& rng, const GradCheckOptions& options = {});

}  // namespace kbd::testing
