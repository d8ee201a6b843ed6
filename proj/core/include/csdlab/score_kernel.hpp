// SPDX-License-Identifier: Apache-2.0
//
// Closed-form flow-matching quantities for a Dirac mixture sum_j p_j delta(x - c_j)
// pushed through the linear path x_t = (1 - t) x_0 + t eps.
#pragma once

#include <span>

#include "csdlab/core.hpp"

namespace csdlab {

/// Log-weights more than this far below the maximum are dropped from both
/// sums of the mixture score.
inline constexpr double kLogWeightCutoff = 700.0;
/// The velocity at t = 1 is evaluated at 1 - kVelocityEndpointOffset.
inline constexpr double kVelocityEndpointOffset = 1e-6;
/// score_to_velocity rejects t >= 1 - kVelocityBoundaryTolerance.
inline constexpr double kVelocityBoundaryTolerance = 1e-9;

/// Conditional score grad_x log sum_j p_j N(x; (1-t) c_j, t^2 I), evaluated
/// in the log domain. Throws a schedule error for t outside [t_min, 1] and a
/// degenerate error when p carries no mass.
Vec teacher_cond_score(std::span<const double> p, const Codebook& cb, std::span<const double> x_t, double t,
                       const Schedule& sched = {});

/// Unchecked kernel behind teacher_cond_score. Writes the score into `score`
/// and, when `jacobian` is non-empty, the C x C row-major Jacobian
/// d score / d x_t = -I / t^2 + (1-t)^2 / t^4 * Cov_w(c).
void cond_score_into(std::span<const double> p, const Codebook& cb, std::span<const double> x_t, double t,
                     std::span<double> score, std::span<double> jacobian);

/// log sum_j p_j N(x_t; (1-t) c_j, t^2 I), computed with log-sum-exp.
double mixture_logdensity(std::span<const double> p, const Codebook& cb, std::span<const double> x_t, double t,
                          const Schedule& sched = {});

/// Score of the Gaussian corruption kernel given the clean point: -eps / t.
Vec gaussian_corruption_score(std::span<const double> eps, double t, const Schedule& sched = {});

/// v = -(t s + x_t) / (1 - t). Throws a boundary error for t >= 1 - 1e-9.
Vec score_to_velocity(std::span<const double> s, std::span<const double> x_t, double t);

/// s = -((1 - t) v + x_t) / t. Throws a schedule error for t < t_min.
Vec velocity_to_score(std::span<const double> v, std::span<const double> x_t, double t, const Schedule& sched = {});

/// Integrates dx/dt = v(x, t) from t = 1 down to t_min with `steps` uniform
/// Euler steps, v taken from the closed-form mixture score.
Vec euler_token_sample(std::span<const double> p, const Codebook& cb, std::span<const double> x1, int steps,
                       const Schedule& sched = {});

}  // namespace csdlab
