// SPDX-License-Identifier: Apache-2.0
//
// Distribution-level evaluation against the enumerated teacher.
#pragma once

#include <cstdint>
#include <vector>

#include "csdlab/core.hpp"
#include "csdlab/nets.hpp"
#include "csdlab/rng.hpp"
#include "csdlab/teacher.hpp"

namespace csdlab {

/// `count` noise sequences through the generator, quantized.
std::vector<TokenSeq> one_step_generate(const NetParams& theta, const Codebook& cb, long count, Rng& rng);

/// One generator step followed by k - 1 teacher steps that resample
/// positions n-k+2..n (1-based) from the teacher given the current prefix.
/// Requires 1 <= k <= n + 1; k = 1 is plain one-step generation.
TokenSeq refine_with_teacher(const NetParams& theta, const TabularTeacher& teacher, const Codebook& cb, int k,
                             Rng& rng);
std::vector<TokenSeq> refine_with_teacher(const NetParams& theta, const TabularTeacher& teacher, const Codebook& cb,
                                          int k, long count, Rng& rng);

/// Token-by-token sampling with the tuned AR-diffusion model: each position
/// integrates its velocity field from t = 1 to t_min in `steps` Euler steps.
std::vector<TokenSeq> sample_ar_diffusion(const NetParams& model, const Codebook& cb, long count, int steps,
                                          const Schedule& sched, Rng& rng);

Distribution empirical_distribution(const std::vector<TokenSeq>& samples);
double tv_distance(const Distribution& p, const Distribution& q);
/// Product of per-position marginals as a distribution over all V^n sequences.
Distribution product_distribution(const std::vector<ProbVector>& marginals);

struct PositionTv {
  int position = 0;  ///< 0-based
  double mean_tv = 0.0;
  long prefixes_used = 0;
  long prefixes_skipped = 0;
  long samples_used = 0;
};

/// Sample-weighted mean TV between the empirical next-token distribution
/// after each observed prefix and the teacher's conditional. Prefixes with
/// fewer than `floor` continuations are skipped and counted.
std::vector<PositionTv> per_position_conditional_tv(const TabularTeacher& teacher,
                                                    const std::vector<TokenSeq>& samples, long floor = 50);

struct ScorePoint {
  TokenSeq prefix;  ///< conditioning tokens; the scored position is prefix.size()
  Vec x;
  double t = 0.5;
};

/// Max over grid points of |s_psi - s_true| / (1 + |s_true|), where s_true
/// is the teacher's conditional score. Points farther than 5t from every
/// scaled code (1 - t) c lie outside the data bulk and are skipped.
double guidance_score_error(const NetParams& psi, const TabularTeacher& reference, const Codebook& cb,
                            const std::vector<ScorePoint>& grid);

}  // namespace csdlab
