// SPDX-License-Identifier: Apache-2.0
#include "csdlab/losses.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include "csdlab/error.hpp"
#include "csdlab/score_kernel.hpp"

namespace csdlab {

using ad::Col;
using ad::Mat;
using ad::Tape;
using ad::Var;

void SiDConfig::validate(const Schedule& sched) const {
  if (!std::isfinite(alpha)) throw Error(ErrorKind::config, "SiD alpha must be finite");
  if (!omega) throw Error(ErrorKind::config, "SiD weight function missing");
  for (int k = 0; k <= 16; ++k) {
    const double t = sched.t_min + (1.0 - sched.t_min) * k / 16.0;
    if (!(omega(t) > 0.0)) throw Error(ErrorKind::config, "SiD weight must be positive on [t_min, 1]");
  }
}

const char* to_string(RegressionSpace space) noexcept {
  return space == RegressionSpace::score ? "score" : "velocity";
}

RegressionSpace regression_space_from_string(const std::string& name) {
  if (name == "score") return RegressionSpace::score;
  if (name == "velocity") return RegressionSpace::velocity;
  throw Error(ErrorKind::config, "unknown regression space '" + name + "'");
}

TimeNoise draw_time_noise(int length, Eigen::Index rows, int dim, double t_lo, double t_hi, Rng& rng) {
  TimeNoise d;
  d.t.reserve(length);
  d.eps.reserve(length);
  for (int i = 0; i < length; ++i) {
    Col t(rows);
    for (Eigen::Index r = 0; r < rows; ++r) t[r] = rng.uniform(t_lo, t_hi);
    Mat e(rows, dim);
    for (Eigen::Index k = 0; k < e.size(); ++k) e.data()[k] = rng.normal();
    d.t.push_back(std::move(t));
    d.eps.push_back(std::move(e));
  }
  return d;
}

namespace {

double sid_weight(double t, const SiDConfig& cfg) {
  const double a = 1.0 - t;
  return cfg.omega(t) * (t * t * t * t) / (a * a);
}

void check_batch(const PosBatch& b, int length, int dim, const char* what) {
  if (b.size() != static_cast<std::size_t>(length))
    throw Error(ErrorKind::length_mismatch, std::string(what) + ": expected " + std::to_string(length) + " positions");
  for (const Mat& m : b)
    if (m.cols() != dim || m.rows() != b[0].rows())
      throw Error(ErrorKind::shape_mismatch, std::string(what) + ": inconsistent batch shape");
}

Var to_node(Tape& tape, const Mat& m) { return tape.constant(m); }

// x_t = (1 - t) q + t eps, row-wise.
Var corrupt_rows(Tape& tape, Var q, const Col& t, const Mat& eps) {
  const Col keep = 1.0 - t.array();
  return tape.add(tape.scale_rows(q, keep), tape.constant(t.asDiagonal() * eps));
}

void check_finite_rows(const Tape& tape, Var rows, const char* loss, std::size_t position, const Col& t) {
  const Mat& v = tape.value(rows);
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    if (!std::isfinite(v(r, 0))) {
      std::ostringstream os;
      os << loss << ": non-finite term at position " << position << ", row " << r << ", t = " << t[r];
      throw Error(ErrorKind::divergence, os.str());
    }
  }
}

LossResult finish(const NetParams& params, const LossBuilder& builder, const char* loss) {
  try {
    Gradient g = grad(params, builder);
    return {g.loss, std::move(g.grad)};
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::gradient) throw Error(ErrorKind::divergence, std::string(loss) + ": " + e.what());
    throw;
  }
}

// Residual between the net's velocity and a score target, in the configured space.
Var regression_residual(Tape& tape, Var v, Var x_t, const Col& t, Var target_score, const LossOptions& opts) {
  if (opts.regression_space == RegressionSpace::score)
    return tape.sub(velocity_to_score_rows(tape, v, x_t, t), target_score);
  Col inv(t.size());
  for (Eigen::Index r = 0; r < t.size(); ++r) {
    if (t[r] >= 1.0) throw Error(ErrorKind::boundary, "velocity-space regression is undefined at t = 1");
    inv[r] = -1.0 / (1.0 - t[r]);
  }
  // v_target = -(t s + x) / (1 - t)
  const Var v_target = tape.scale_rows(tape.add(tape.scale_rows(target_score, t), tape.stop_grad(x_t)), inv);
  return tape.sub(v, v_target);
}

}  // namespace

double sid_d(std::span<const double> s_true, std::span<const double> s_fake, std::span<const double> eps, double t,
             const SiDConfig& cfg, const Schedule& sched) {
  if (s_true.size() != s_fake.size() || s_true.size() != eps.size())
    throw Error(ErrorKind::shape_mismatch, "sid_d: vector dimensions differ");
  if (t >= 1.0) throw Error(ErrorKind::boundary, "sid_d divides by (1 - t)^2 and is undefined at t = 1");
  sched.check(t);
  double dot = 0.0;
  for (std::size_t k = 0; k < s_true.size(); ++k) {
    const double delta = s_true[k] - s_fake[k];
    dot += delta * (s_true[k] + eps[k] / t - cfg.alpha * delta);
  }
  return sid_weight(t, cfg) * dot;
}

Var sid_d_rows(Tape& tape, Var s_true, Var s_fake, const Mat& eps, const Col& t, const SiDConfig& cfg) {
  Col weight(t.size());
  for (Eigen::Index r = 0; r < t.size(); ++r) {
    if (t[r] >= 1.0) throw Error(ErrorKind::boundary, "sid_d is undefined at t = 1");
    weight[r] = sid_weight(t[r], cfg);
  }
  const Var delta = tape.sub(s_true, s_fake);
  const Var first = cfg.stop_grad_first_factor ? tape.stop_grad(delta) : delta;
  const Mat eps_over_t = t.cwiseInverse().asDiagonal() * eps;
  const Var second = tape.sub(tape.add(s_true, tape.constant(eps_over_t)), tape.scale(delta, cfg.alpha));
  return tape.scale_rows(tape.row_dot(first, second), weight);
}

Var teacher_score_node(Tape& tape, Var x_t, const Mat& probs, const Codebook& cb, const Col& t) {
  const Mat& x = tape.value(x_t);
  const Eigen::Index B = x.rows();
  const int C = cb.dim();
  if (probs.rows() != B || probs.cols() != cb.vocab_size() || t.size() != B)
    throw Error(ErrorKind::shape_mismatch, "teacher_score_node: batch shapes differ");
  Mat score(B, C);
  Mat jac(B, C * C);
  Vec xs(C), s(C), j(static_cast<std::size_t>(C) * C);
  for (Eigen::Index r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) xs[c] = x(r, c);
    cond_score_into({probs.row(r).data(), static_cast<std::size_t>(probs.cols())}, cb, xs, t[r], s, j);
    for (int c = 0; c < C; ++c) score(r, c) = s[c];
    for (int k = 0; k < C * C; ++k) jac(r, k) = j[k];
  }
  return tape.row_map(x_t, std::move(score), std::move(jac));
}

std::vector<TokenSeq> quantize_batch(const PosBatch& x, const Codebook& cb) {
  const Eigen::Index B = x.empty() ? 0 : x[0].rows();
  std::vector<TokenSeq> out(static_cast<std::size_t>(B), TokenSeq(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (Eigen::Index r = 0; r < B; ++r)
      out[r][i] = nearest_code({x[i].row(r).data(), static_cast<std::size_t>(x[i].cols())}, cb);
  return out;
}

PosBatch embed_batch(const std::vector<TokenSeq>& seqs, const Codebook& cb) {
  if (seqs.empty()) throw Error(ErrorKind::invalid_argument, "empty batch");
  const std::size_t n = seqs[0].size();
  PosBatch out(n, Mat(static_cast<Eigen::Index>(seqs.size()), cb.dim()));
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    if (seqs[r].size() != n) throw Error(ErrorKind::length_mismatch, "ragged token batch");
    for (std::size_t i = 0; i < n; ++i) {
      const int id = seqs[r][i];
      if (id < 0 || id >= cb.vocab_size()) throw Error(ErrorKind::invalid_token, "token id out of range");
      const auto c = cb.entry(id);
      for (int k = 0; k < cb.dim(); ++k) out[i](static_cast<Eigen::Index>(r), k) = c[k];
    }
  }
  return out;
}

std::vector<Mat> teacher_probs(const TabularTeacher& teacher, const std::vector<TokenSeq>& seqs) {
  const int n = teacher.length();
  const int V = teacher.vocab_size();
  std::vector<Mat> probs(n, Mat(static_cast<Eigen::Index>(seqs.size()), V));
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    if (seqs[r].size() != static_cast<std::size_t>(n)) throw Error(ErrorKind::length_mismatch, "sequence length != n");
    const std::span<const int> z(seqs[r]);
    for (int i = 0; i < n; ++i) {
      const auto row = teacher.cond_row(z.first(i));
      for (int j = 0; j < V; ++j) probs[i](static_cast<Eigen::Index>(r), j) = row[j];
    }
  }
  return probs;
}

Var csd_position_terms(Tape& tape, const BoundNet& psi, Var q_live, Var psi_feature, const Mat& probs,
                       const Codebook& cb, const Col& t, const Mat& eps, const LossOptions& opts) {
  const Var x_t = corrupt_rows(tape, q_live, t, eps);
  const Var s_true = teacher_score_node(tape, x_t, probs, cb, t);
  const Var v_fake = head_velocity(tape, psi, x_t, t, psi_feature);
  const Var s_fake = velocity_to_score_rows(tape, v_fake, x_t, t);
  return sid_d_rows(tape, s_true, s_fake, eps, t, opts.sid);
}

LossResult csd_loss_with(const NetParams& theta, const NetParams& psi, const TabularTeacher& teacher,
                         const Codebook& cb, const PosBatch& noise, const PosBatch& conditioning,
                         const TimeNoise& draws, const LossOptions& opts) {
  const int n = theta.shape().length;
  const int C = theta.shape().dim;
  check_batch(noise, n, C, "csd noise");
  check_batch(conditioning, n, C, "csd conditioning");
  if (psi.shape().length != n || psi.shape().dim != C || teacher.length() != n || cb.dim() != C)
    throw Error(ErrorKind::shape_mismatch, "csd: generator, guidance, teacher and codebook disagree on n or C");
  const Eigen::Index B = noise[0].rows();
  const auto probs = teacher_probs(teacher, quantize_batch(conditioning, cb));

  auto builder = [&](Tape& tape, const BoundNet& gen) {
    std::vector<Var> eps_in, cond;
    for (int i = 0; i < n; ++i) {
      eps_in.push_back(to_node(tape, noise[i]));
      cond.push_back(to_node(tape, conditioning[i]));
    }
    const auto q = generator_forward(tape, gen, eps_in);
    const BoundNet guide = bind(tape, psi, false);
    const auto feats = backbone_features(tape, guide, cond);
    Var total;
    for (int i = 0; i < n; ++i) {
      const Var d = csd_position_terms(tape, guide, q[i], feats[i], probs[i], cb, draws.t[i], draws.eps[i], opts);
      check_finite_rows(tape, d, "csd", i, draws.t[i]);
      total = i == 0 ? tape.sum(d) : tape.add(total, tape.sum(d));
    }
    return tape.scale(total, 1.0 / static_cast<double>(B));
  };
  return finish(theta, builder, "csd");
}

LossResult csd_loss(const NetParams& theta, const NetParams& psi, const TabularTeacher& teacher, const Codebook& cb,
                    const PosBatch& noise, const LossOptions& opts, Rng& rng) {
  const PosBatch samples = generate_batch(theta, noise);
  const TimeNoise draws = draw_time_noise(theta.shape().length, noise.at(0).rows(), theta.shape().dim,
                                          opts.schedule.t_min, 1.0 - opts.t_guard, rng);
  return csd_loss_with(theta, psi, teacher, cb, noise, samples, draws, opts);
}

LossResult fcs_loss_with(const NetParams& psi, const PosBatch& samples, const std::vector<TimeNoise>& draws,
                         const LossOptions& opts) {
  if (draws.empty()) throw Error(ErrorKind::invalid_argument, "fcs needs m >= 1 noise draws");
  const int n = psi.shape().length;
  check_batch(samples, n, psi.shape().dim, "fcs samples");
  const Eigen::Index B = samples[0].rows();
  const double norm = 1.0 / (static_cast<double>(B) * static_cast<double>(draws.size()));

  auto builder = [&](Tape& tape, const BoundNet& net) {
    std::vector<Var> q;
    for (const Mat& m : samples) q.push_back(to_node(tape, m));
    const auto feats = backbone_features(tape, net, q);
    Var total;
    bool first = true;
    for (const TimeNoise& d : draws) {
      for (int i = 0; i < n; ++i) {
        const Var x_t = corrupt_rows(tape, q[i], d.t[i], d.eps[i]);
        const Var v = head_velocity(tape, net, x_t, d.t[i], feats[i]);
        const Mat target = -(d.t[i].cwiseInverse().asDiagonal() * d.eps[i]);
        const Var r = regression_residual(tape, v, x_t, d.t[i], tape.constant(target), opts);
        const Var sq = tape.row_dot(r, r);
        check_finite_rows(tape, sq, "fcs", i, d.t[i]);
        total = first ? tape.sum(sq) : tape.add(total, tape.sum(sq));
        first = false;
      }
    }
    return tape.scale(total, norm);
  };
  return finish(psi, builder, "fcs");
}

LossResult fcs_loss(const NetParams& psi, const PosBatch& samples, int m, const LossOptions& opts, Rng& rng) {
  if (m < 1) throw Error(ErrorKind::invalid_argument, "fcs multi-sample count must be >= 1");
  std::vector<TimeNoise> draws;
  for (int j = 0; j < m; ++j)
    draws.push_back(draw_time_noise(psi.shape().length, samples.at(0).rows(), psi.shape().dim, opts.schedule.t_min,
                                    opts.regression_t_max(), rng));
  return fcs_loss_with(psi, samples, draws, opts);
}

LossResult gts_loss_with(const NetParams& model, const TabularTeacher& teacher, const Codebook& cb,
                         const std::vector<TokenSeq>& batch, const TimeNoise& draws, const LossOptions& opts) {
  const int n = model.shape().length;
  if (teacher.length() != n || cb.dim() != model.shape().dim)
    throw Error(ErrorKind::shape_mismatch, "gts: model, teacher and codebook disagree on n or C");
  const PosBatch clean = embed_batch(batch, cb);
  const auto probs = teacher_probs(teacher, batch);
  const Eigen::Index B = clean[0].rows();

  auto builder = [&](Tape& tape, const BoundNet& net) {
    std::vector<Var> q;
    for (const Mat& m : clean) q.push_back(to_node(tape, m));
    const auto feats = backbone_features(tape, net, q);
    Var total;
    for (int i = 0; i < n; ++i) {
      const Var x_t = corrupt_rows(tape, q[i], draws.t[i], draws.eps[i]);
      // target is evaluated on the constant x_t: no gradient reaches the teacher
      const Var target = teacher_score_node(tape, tape.stop_grad(x_t), probs[i], cb, draws.t[i]);
      const Var v = head_velocity(tape, net, x_t, draws.t[i], feats[i]);
      const Var r = regression_residual(tape, v, x_t, draws.t[i], target, opts);
      const Var sq = tape.row_dot(r, r);
      check_finite_rows(tape, sq, "gts", i, draws.t[i]);
      total = i == 0 ? tape.sum(sq) : tape.add(total, tape.sum(sq));
    }
    return tape.scale(total, 1.0 / static_cast<double>(B));
  };
  return finish(model, builder, "gts");
}

LossResult gts_loss(const NetParams& model, const TabularTeacher& teacher, const Codebook& cb,
                    const std::vector<TokenSeq>& batch, const LossOptions& opts, Rng& rng) {
  const TimeNoise draws = draw_time_noise(model.shape().length, static_cast<Eigen::Index>(batch.size()),
                                          model.shape().dim, opts.schedule.t_min, opts.regression_t_max(), rng);
  return gts_loss_with(model, teacher, cb, batch, draws, opts);
}

LossResult mapping_regression_loss(const NetParams& theta, const PosBatch& noise, const PosBatch& targets) {
  const int n = theta.shape().length;
  check_batch(noise, n, theta.shape().dim, "regression noise");
  check_batch(targets, n, theta.shape().dim, "regression targets");
  const Eigen::Index B = noise[0].rows();
  auto builder = [&](Tape& tape, const BoundNet& gen) {
    std::vector<Var> eps_in;
    for (const Mat& m : noise) eps_in.push_back(to_node(tape, m));
    const auto x = generator_forward(tape, gen, eps_in);
    Var total;
    for (int i = 0; i < n; ++i) {
      const Var r = tape.sub(x[i], tape.constant(targets[i]));
      total = i == 0 ? tape.sum(tape.mul(r, r)) : tape.add(total, tape.sum(tape.mul(r, r)));
    }
    return tape.scale(total, 1.0 / static_cast<double>(B));
  };
  return finish(theta, builder, "regression");
}

}  // namespace csdlab
