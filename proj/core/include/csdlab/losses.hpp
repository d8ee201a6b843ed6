// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Batches are per-position B x C matrices
// (`PosBatch[i]` holds row b's token at position i).
//
//   sid_d  - score-distillation integrand comparing a true and a fake score
//   csd    - generator loss: sid_d at every position, conditioned on the
//            generator's own (stop-gradient) prefix
//   fcs    - guidance loss: regress the generator's conditional score onto
//            the corruption score -eps/t, averaged over m noise draws
//   gts    - initialization loss: regress onto the teacher's closed-form score
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "csdlab/autodiff.hpp"
#include "csdlab/core.hpp"
#include "csdlab/nets.hpp"
#include "csdlab/rng.hpp"
#include "csdlab/teacher.hpp"

namespace csdlab {

using PosBatch = std::vector<ad::Mat>;

struct SiDConfig {
  double alpha = 1.0;
  std::function<double(double)> omega = [](double) { return 1.0; };
  /// Blocks the gradient through the leading (s_true - s_fake) factor.
  bool stop_grad_first_factor = false;

  void validate(const Schedule& sched) const;
};

/// Space in which the FCS and GTS regressions measure their residual.
enum class RegressionSpace {
  score,     ///< ||s - target||^2 with t in [t_min, 1]
  velocity,  ///< the residual mapped to velocity, ||v - v_target||^2 with t in [t_min, 1 - t_guard]
};

const char* to_string(RegressionSpace space) noexcept;
RegressionSpace regression_space_from_string(const std::string& name);

struct LossOptions {
  Schedule schedule;
  /// CSD times are drawn from [t_min, 1 - t_guard] because sid_d divides by (1 - t)^2.
  double t_guard = 1e-3;
  SiDConfig sid;
  RegressionSpace regression_space = RegressionSpace::score;

  /// Upper end of the time range for FCS and GTS draws.
  double regression_t_max() const { return regression_space == RegressionSpace::score ? 1.0 : 1.0 - t_guard; }
};

/// Per-position times and Gaussian noise for one batch.
struct TimeNoise {
  std::vector<ad::Col> t;
  std::vector<ad::Mat> eps;
};

TimeNoise draw_time_noise(int length, Eigen::Index rows, int dim, double t_lo, double t_hi, Rng& rng);

struct LossResult {
  double loss = 0.0;
  NetParams grad;
};

/// omega(t) t^4 / (1-t)^2 (s_true - s_fake)^T (s_true + eps/t - alpha (s_true - s_fake)).
/// Throws a boundary error at t = 1.
double sid_d(std::span<const double> s_true, std::span<const double> s_fake, std::span<const double> eps, double t,
             const SiDConfig& cfg, const Schedule& sched = {});

/// Row-wise sid_d on a tape, B x 1.
ad::Var sid_d_rows(ad::Tape& tape, ad::Var s_true, ad::Var s_fake, const ad::Mat& eps, const ad::Col& t,
                   const SiDConfig& cfg);

/// Row-wise teacher conditional score of x_t as a differentiable node; `probs`
/// holds one probability row per batch row.
ad::Var teacher_score_node(ad::Tape& tape, ad::Var x_t, const ad::Mat& probs, const Codebook& cb, const ad::Col& t);

std::vector<TokenSeq> quantize_batch(const PosBatch& x, const Codebook& cb);
PosBatch embed_batch(const std::vector<TokenSeq>& seqs, const Codebook& cb);
/// probs[i] row b = p(. | seqs[b][0..i)).
std::vector<ad::Mat> teacher_probs(const TabularTeacher& teacher, const std::vector<TokenSeq>& seqs);

/// CSD integrand at one position: the clean token q_live is corrupted with
/// (t, eps) and scored by the teacher (rows of `probs`) and by the frozen
/// guidance head with feature `psi_feature`. Returns B x 1 sid_d values.
ad::Var csd_position_terms(ad::Tape& tape, const BoundNet& psi, ad::Var q_live, ad::Var psi_feature,
                           const ad::Mat& probs, const Codebook& cb, const ad::Col& t, const ad::Mat& eps,
                           const LossOptions& opts);

/// Generator loss and its gradient w.r.t. theta for generator inputs `noise`.
LossResult csd_loss(const NetParams& theta, const NetParams& psi, const TabularTeacher& teacher, const Codebook& cb,
                    const PosBatch& noise, const LossOptions& opts, Rng& rng);

/// CSD with explicit draws and an explicit conditioning batch. Gradients flow
/// only through the generator's clean tokens; `conditioning` (the prefix
/// seen by the teacher and the guidance backbone) is a constant.
LossResult csd_loss_with(const NetParams& theta, const NetParams& psi, const TabularTeacher& teacher,
                         const Codebook& cb, const PosBatch& noise, const PosBatch& conditioning,
                         const TimeNoise& draws, const LossOptions& opts);

/// Guidance loss on fixed generator samples, averaged over m draws.
LossResult fcs_loss(const NetParams& psi, const PosBatch& samples, int m, const LossOptions& opts, Rng& rng);
LossResult fcs_loss_with(const NetParams& psi, const PosBatch& samples, const std::vector<TimeNoise>& draws,
                         const LossOptions& opts);

/// Initialization loss on teacher sequences.
LossResult gts_loss(const NetParams& model, const TabularTeacher& teacher, const Codebook& cb,
                    const std::vector<TokenSeq>& batch, const LossOptions& opts, Rng& rng);
LossResult gts_loss_with(const NetParams& model, const TabularTeacher& teacher, const Codebook& cb,
                         const std::vector<TokenSeq>& batch, const TimeNoise& draws, const LossOptions& opts);

/// Mean over rows of sum_i ||G(noise)_i - target_i||^2 (mapping regression baseline).
LossResult mapping_regression_loss(const NetParams& theta, const PosBatch& noise, const PosBatch& targets);

}  // namespace csdlab
