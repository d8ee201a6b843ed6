// SPDX-License-Identifier: Apache-2.0
#include "csdlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "csdlab/error.hpp"
#include "csdlab/score_kernel.hpp"

namespace csdlab {

using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

constexpr long kChunk = 4096;

std::vector<Mat> noise_chunk(int n, long rows, int C, Rng& rng) {
  std::vector<Mat> out(n, Mat(rows, C));
  for (Mat& m : out)
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
  return out;
}

void check_k(int k, int n) {
  if (k < 1 || k > n + 1)
    throw Error(ErrorKind::invalid_argument,
                "refinement steps k = " + std::to_string(k) + " outside [1, " + std::to_string(n + 1) + "]");
}

void refresh(TokenSeq& z, const TabularTeacher& teacher, int k, Rng& rng) {
  const int n = teacher.length();
  for (int i = n - k + 1; i < n; ++i) z[i] = rng.categorical(teacher.cond_row(std::span<const int>(z).first(i)));
}

}  // namespace

std::vector<TokenSeq> one_step_generate(const NetParams& theta, const Codebook& cb, long count, Rng& rng) {
  if (count < 1) throw Error(ErrorKind::invalid_argument, "sample count must be >= 1");
  const int n = theta.shape().length;
  const int C = theta.shape().dim;
  if (cb.dim() != C) throw Error(ErrorKind::shape_mismatch, "codebook dimension differs from the generator's");
  std::vector<TokenSeq> out;
  out.reserve(count);
  for (long done = 0; done < count; done += kChunk) {
    const long rows = std::min(kChunk, count - done);
    const auto x = generate_batch(theta, noise_chunk(n, rows, C, rng));
    for (long r = 0; r < rows; ++r) {
      TokenSeq z(n);
      for (int i = 0; i < n; ++i) z[i] = nearest_code({x[i].row(r).data(), static_cast<std::size_t>(C)}, cb);
      out.push_back(std::move(z));
    }
  }
  return out;
}

TokenSeq refine_with_teacher(const NetParams& theta, const TabularTeacher& teacher, const Codebook& cb, int k,
                             Rng& rng) {
  return refine_with_teacher(theta, teacher, cb, k, 1, rng).front();
}

std::vector<TokenSeq> refine_with_teacher(const NetParams& theta, const TabularTeacher& teacher, const Codebook& cb,
                                          int k, long count, Rng& rng) {
  check_k(k, teacher.length());
  if (theta.shape().length != teacher.length())
    throw Error(ErrorKind::length_mismatch, "generator and teacher lengths differ");
  auto out = one_step_generate(theta, cb, count, rng);
  for (TokenSeq& z : out) refresh(z, teacher, k, rng);
  return out;
}

std::vector<TokenSeq> sample_ar_diffusion(const NetParams& model, const Codebook& cb, long count, int steps,
                                          const Schedule& sched, Rng& rng) {
  if (count < 1) throw Error(ErrorKind::invalid_argument, "sample count must be >= 1");
  if (steps < 1) throw Error(ErrorKind::invalid_argument, "Euler sampler needs at least one step");
  sched.validate();
  const int n = model.shape().length;
  const int C = model.shape().dim;
  if (cb.dim() != C) throw Error(ErrorKind::shape_mismatch, "codebook dimension differs from the model's");
  const double h = (1.0 - sched.t_min) / steps;
  std::vector<TokenSeq> out;
  out.reserve(count);
  for (long done = 0; done < count; done += kChunk) {
    const long rows = std::min(kChunk, count - done);
    std::vector<Mat> clean(n, Mat::Zero(rows, C));
    std::vector<TokenSeq> z(rows, TokenSeq(n, 0));
    for (int i = 0; i < n; ++i) {
      Tape tape;
      const BoundNet net = bind(tape, model, false);
      std::vector<Var> in;
      for (const Mat& m : clean) in.push_back(tape.constant(m));
      const Var feat = backbone_features(tape, net, in)[i];
      Mat x(rows, C);
      for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
      for (int s = 0; s < steps; ++s) {
        const ad::Col t = ad::Col::Constant(rows, 1.0 - s * h);
        const Mat v = tape.value(head_velocity(tape, net, tape.constant(x), t, feat));
        x -= h * v;
      }
      for (long r = 0; r < rows; ++r) {
        const int id = nearest_code({x.row(r).data(), static_cast<std::size_t>(C)}, cb);
        z[r][i] = id;
        const auto c = cb.entry(id);
        for (int d = 0; d < C; ++d) clean[i](r, d) = c[d];
      }
    }
    for (auto& seq : z) out.push_back(std::move(seq));
  }
  return out;
}

Distribution empirical_distribution(const std::vector<TokenSeq>& samples) {
  if (samples.empty()) throw Error(ErrorKind::invalid_argument, "empirical distribution of an empty sample");
  std::map<TokenSeq, long> counts;
  for (const TokenSeq& z : samples) ++counts[z];
  Distribution d;
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (const auto& [z, c] : counts) d.emplace(z, static_cast<double>(c) * inv);
  return d;
}

double tv_distance(const Distribution& p, const Distribution& q) {
  double sum = 0.0;
  for (const auto& [z, pz] : p) {
    const auto it = q.find(z);
    sum += std::abs(pz - (it == q.end() ? 0.0 : it->second));
  }
  for (const auto& [z, qz] : q)
    if (!p.contains(z)) sum += std::abs(qz);
  return 0.5 * sum;
}

Distribution product_distribution(const std::vector<ProbVector>& marginals) {
  Distribution d;
  if (marginals.empty()) return d;
  const int n = static_cast<int>(marginals.size());
  TokenSeq z(n, 0);
  while (true) {
    double p = 1.0;
    for (int i = 0; i < n; ++i) p *= marginals[i][z[i]];
    if (p > 0.0) d.emplace(z, p);
    int i = n - 1;
    while (i >= 0 && ++z[i] == static_cast<int>(marginals[i].size())) z[i--] = 0;
    if (i < 0) break;
  }
  return d;
}

std::vector<PositionTv> per_position_conditional_tv(const TabularTeacher& teacher,
                                                    const std::vector<TokenSeq>& samples, long floor) {
  if (samples.empty()) throw Error(ErrorKind::invalid_argument, "conditional TV needs samples");
  const int n = teacher.length();
  const int V = teacher.vocab_size();
  std::vector<PositionTv> out;
  for (int i = 0; i < n; ++i) {
    std::map<TokenSeq, std::vector<long>> next;
    for (const TokenSeq& z : samples) {
      if (z.size() != static_cast<std::size_t>(n)) throw Error(ErrorKind::length_mismatch, "sample length != n");
      auto& counts = next[TokenSeq(z.begin(), z.begin() + i)];
      if (counts.empty()) counts.assign(V, 0);
      ++counts.at(z[i]);
    }
    PositionTv pt;
    pt.position = i;
    double weighted = 0.0;
    for (const auto& [prefix, counts] : next) {
      long total = 0;
      for (long c : counts) total += c;
      if (total < floor) {
        ++pt.prefixes_skipped;
        continue;
      }
      const auto row = teacher.cond_row(prefix);
      double tv = 0.0;
      for (int j = 0; j < V; ++j) tv += std::abs(static_cast<double>(counts[j]) / total - row[j]);
      weighted += 0.5 * tv * static_cast<double>(total);
      pt.samples_used += total;
      ++pt.prefixes_used;
    }
    if (pt.samples_used == 0)
      throw Error(ErrorKind::invalid_argument,
                  "no prefix at position " + std::to_string(i) + " reaches the continuation floor");
    pt.mean_tv = weighted / static_cast<double>(pt.samples_used);
    out.push_back(pt);
  }
  return out;
}

double guidance_score_error(const NetParams& psi, const TabularTeacher& reference, const Codebook& cb,
                            const std::vector<ScorePoint>& grid) {
  const int n = psi.shape().length;
  const int C = psi.shape().dim;
  if (reference.length() != n || cb.dim() != C)
    throw Error(ErrorKind::shape_mismatch, "guidance, reference and codebook disagree on n or C");
  double worst = 0.0;
  for (const ScorePoint& g : grid) {
    const int i = static_cast<int>(g.prefix.size());
    if (i >= n) throw Error(ErrorKind::position, "score point prefix must be shorter than n");
    if (g.x.size() != static_cast<std::size_t>(C)) throw Error(ErrorKind::shape_mismatch, "score point dimension");
    double nearest = INFINITY;
    for (int j = 0; j < cb.vocab_size(); ++j) {
      double sq = 0.0;
      for (int c = 0; c < C; ++c) {
        const double d = g.x[c] - (1.0 - g.t) * cb.entry(j)[c];
        sq += d * d;
      }
      nearest = std::min(nearest, std::sqrt(sq));
    }
    if (nearest > 5.0 * g.t) continue;

    TokenSeq padded = g.prefix;
    padded.resize(n, 0);
    const auto feats = backbone_features(psi, embed(padded, cb));
    const Vec v = head_velocity(psi, g.x, g.t, feats[i]);
    const Vec s_psi = velocity_to_score(v, g.x, g.t);
    const Vec s_true = teacher_cond_score(reference.cond_row(g.prefix), cb, g.x, g.t);
    double diff = 0.0, norm = 0.0;
    for (int c = 0; c < C; ++c) {
      diff += (s_psi[c] - s_true[c]) * (s_psi[c] - s_true[c]);
      norm += s_true[c] * s_true[c];
    }
    worst = std::max(worst, std::sqrt(diff) / (1.0 + std::sqrt(norm)));
  }
  return worst;
}

}  // namespace csdlab
