// SPDX-License-Identifier: Apache-2.0
#include "csdlab/score_kernel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "csdlab/error.hpp"

namespace csdlab {

namespace {

void check_shapes(std::span<const double> p, const Codebook& cb, std::span<const double> x_t) {
  if (p.size() != static_cast<std::size_t>(cb.vocab_size()))
    throw Error(ErrorKind::shape_mismatch, "probability vector size differs from V");
  if (x_t.size() != static_cast<std::size_t>(cb.dim()))
    throw Error(ErrorKind::shape_mismatch, "point dimension differs from C");
  for (double v : x_t)
    if (!std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "point is not finite");
  bool any = false;
  for (double v : p) any = any || v > 0.0;
  if (!any) throw Error(ErrorKind::degenerate, "probability vector carries no mass");
}

double sq_dist_scaled(std::span<const double> x, std::span<const double> c, double shrink) {
  double d2 = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = x[k] - shrink * c[k];
    d2 += d * d;
  }
  return d2;
}

}  // namespace

void cond_score_into(std::span<const double> p, const Codebook& cb, std::span<const double> x_t, double t,
                     std::span<double> score, std::span<double> jacobian) {
  const int V = cb.vocab_size();
  const int C = cb.dim();
  const double shrink = 1.0 - t;
  const double inv2t2 = 0.5 / (t * t);

  // Small fixed buffer covers the vocabularies used in practice.
  double stack_logw[64];
  std::vector<double> heap_logw;
  double* logw = stack_logw;
  if (V > 64) {
    heap_logw.resize(V);
    logw = heap_logw.data();
  }

  double max_logw = -INFINITY;
  for (int j = 0; j < V; ++j) {
    if (p[j] > 0.0) {
      logw[j] = std::log(p[j]) - sq_dist_scaled(x_t, cb.entry(j), shrink) * inv2t2;
      max_logw = std::max(max_logw, logw[j]);
    } else {
      logw[j] = -INFINITY;
    }
  }

  // Posterior-weighted code mean (and second moment for the Jacobian).
  double total = 0.0;
  double mean[16] = {};
  std::vector<double> mean_heap;
  double* mu = mean;
  if (C > 16) {
    mean_heap.assign(C, 0.0);
    mu = mean_heap.data();
  }
  for (int j = 0; j < V; ++j) {
    if (!(logw[j] >= max_logw - kLogWeightCutoff)) {
      logw[j] = 0.0;
      continue;
    }
    const double w = std::exp(logw[j] - max_logw);
    logw[j] = w;
    total += w;
    const auto c = cb.entry(j);
    for (int k = 0; k < C; ++k) mu[k] += w * c[k];
  }
  for (int k = 0; k < C; ++k) mu[k] /= total;

  const double inv_t2 = 1.0 / (t * t);
  for (int k = 0; k < C; ++k) score[k] = -(x_t[k] - shrink * mu[k]) * inv_t2;

  if (jacobian.empty()) return;
  std::fill(jacobian.begin(), jacobian.end(), 0.0);
  const double cov_scale = shrink * shrink * inv_t2 * inv_t2;
  for (int j = 0; j < V; ++j) {
    const double w = logw[j] / total;
    if (w == 0.0) continue;
    const auto c = cb.entry(j);
    for (int a = 0; a < C; ++a)
      for (int b = 0; b < C; ++b) jacobian[a * C + b] += cov_scale * w * (c[a] - mu[a]) * (c[b] - mu[b]);
  }
  for (int a = 0; a < C; ++a) jacobian[a * C + a] -= inv_t2;
}

Vec teacher_cond_score(std::span<const double> p, const Codebook& cb, std::span<const double> x_t, double t,
                       const Schedule& sched) {
  sched.check(t);
  check_shapes(p, cb, x_t);
  Vec s(static_cast<std::size_t>(cb.dim()));
  cond_score_into(p, cb, x_t, t, s, {});
  return s;
}

double mixture_logdensity(std::span<const double> p, const Codebook& cb, std::span<const double> x_t, double t,
                          const Schedule& sched) {
  sched.check(t);
  check_shapes(p, cb, x_t);
  const double shrink = 1.0 - t;
  const double inv2t2 = 0.5 / (t * t);
  std::vector<double> logw;
  logw.reserve(p.size());
  double max_logw = -INFINITY;
  for (int j = 0; j < cb.vocab_size(); ++j) {
    if (!(p[j] > 0.0)) continue;
    logw.push_back(std::log(p[j]) - sq_dist_scaled(x_t, cb.entry(j), shrink) * inv2t2);
    max_logw = std::max(max_logw, logw.back());
  }
  double sum = 0.0;
  for (double lw : logw) sum += std::exp(lw - max_logw);
  const double C = cb.dim();
  return max_logw + std::log(sum) - 0.5 * C * std::log(2.0 * std::numbers::pi * t * t);
}

Vec gaussian_corruption_score(std::span<const double> eps, double t, const Schedule& sched) {
  sched.check(t);
  Vec s(eps.size());
  for (std::size_t k = 0; k < eps.size(); ++k) s[k] = -eps[k] / t;
  return s;
}

Vec score_to_velocity(std::span<const double> s, std::span<const double> x_t, double t) {
  if (s.size() != x_t.size()) throw Error(ErrorKind::shape_mismatch, "score and point dimensions differ");
  if (!(t < 1.0 - kVelocityBoundaryTolerance) || !(t >= 0.0))
    throw Error(ErrorKind::boundary, "velocity undefined at t = " + std::to_string(t));
  Vec v(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) v[k] = -(t * s[k] + x_t[k]) / (1.0 - t);
  return v;
}

Vec velocity_to_score(std::span<const double> v, std::span<const double> x_t, double t, const Schedule& sched) {
  if (v.size() != x_t.size()) throw Error(ErrorKind::shape_mismatch, "velocity and point dimensions differ");
  sched.check(t);
  Vec s(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) s[k] = -((1.0 - t) * v[k] + x_t[k]) / t;
  return s;
}

Vec euler_token_sample(std::span<const double> p, const Codebook& cb, std::span<const double> x1, int steps,
                       const Schedule& sched) {
  if (steps < 1) throw Error(ErrorKind::invalid_argument, "Euler sampler needs at least one step");
  sched.validate();
  check_shapes(p, cb, x1);
  const int C = cb.dim();
  const double h = (1.0 - sched.t_min) / steps;
  Vec x(x1.begin(), x1.end());
  Vec s(C);
  for (int k = 0; k < steps; ++k) {
    const double t = std::min(1.0 - k * h, 1.0 - kVelocityEndpointOffset);
    cond_score_into(p, cb, x, t, s, {});
    const Vec v = score_to_velocity(s, x, t);
    for (int c = 0; c < C; ++c) x[c] -= h * v[c];
  }
  return x;
}

}  // namespace csdlab
