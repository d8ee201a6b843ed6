// SPDX-License-Identifier: Apache-2.0
#include "csdlab/core.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "csdlab/error.hpp"
#include "csdlab/rng.hpp"

namespace csdlab {

Codebook::Codebook(int vocab_size, int dim, std::vector<double> entries)
    : vocab_(vocab_size), dim_(dim), entries_(std::move(entries)) {
  if (vocab_ < 1 || dim_ < 1) throw Error(ErrorKind::invalid_argument, "codebook needs V >= 1 and C >= 1");
  if (entries_.size() != static_cast<std::size_t>(vocab_) * dim_)
    throw Error(ErrorKind::shape_mismatch, "codebook has " + std::to_string(entries_.size()) +
                                               " values, expected V*C = " + std::to_string(vocab_ * dim_));
  for (double v : entries_)
    if (!std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "codebook entry is not finite");
  for (int a = 0; a < vocab_; ++a)
    for (int b = a + 1; b < vocab_; ++b) {
      bool same = true;
      for (int c = 0; c < dim_ && same; ++c) same = entry(a)[c] == entry(b)[c];
      if (same)
        throw Error(ErrorKind::invalid_argument,
                    "codebook entries " + std::to_string(a) + " and " + std::to_string(b) + " coincide");
    }
}

Codebook Codebook::circle(int vocab_size, int dim) {
  if (vocab_size < 1 || dim < 1) throw Error(ErrorKind::invalid_argument, "codebook needs V >= 1 and C >= 1");
  std::vector<double> e(static_cast<std::size_t>(vocab_size) * dim, 0.0);
  for (int j = 0; j < vocab_size; ++j) {
    if (dim == 1) {
      e[j] = vocab_size == 1 ? 0.0 : -1.0 + 2.0 * j / (vocab_size - 1);
    } else {
      const double angle = 2.0 * std::numbers::pi * j / vocab_size;
      e[static_cast<std::size_t>(j) * dim] = std::cos(angle);
      e[static_cast<std::size_t>(j) * dim + 1] = std::sin(angle);
    }
  }
  return Codebook(vocab_size, dim, std::move(e));
}

Codebook Codebook::gaussian(int vocab_size, int dim, std::uint64_t seed, double scale) {
  if (vocab_size < 1 || dim < 1) throw Error(ErrorKind::invalid_argument, "codebook needs V >= 1 and C >= 1");
  Rng rng(seed);
  std::vector<double> e(static_cast<std::size_t>(vocab_size) * dim);
  for (double& v : e) v = scale * rng.normal();
  return Codebook(vocab_size, dim, std::move(e));
}

ProbVector::ProbVector(std::vector<double> p) : p_(std::move(p)) {
  if (p_.empty()) throw Error(ErrorKind::invalid_argument, "empty probability vector");
  double sum = 0.0;
  for (double v : p_) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "probability must be finite and >= 0");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSumTolerance)
    throw Error(ErrorKind::invalid_argument, "probabilities sum to " + std::to_string(sum));
}

EmbedSeq::EmbedSeq(int length, int dim, std::vector<double> values) : n_(length), dim_(dim), x_(std::move(values)) {
  if (x_.size() != static_cast<std::size_t>(n_) * dim_)
    throw Error(ErrorKind::shape_mismatch, "embedding sequence size does not match n*C");
}

void Schedule::validate() const {
  if (!(t_min > 0.0 && t_min < 1.0)) throw Error(ErrorKind::schedule, "t_min must lie in (0, 1)");
}

void Schedule::check(double t) const {
  if (!(t >= t_min && t <= 1.0))
    throw Error(ErrorKind::schedule, "t = " + std::to_string(t) + " outside [t_min, 1]");
}

std::vector<double> embed_one(int id, const Codebook& cb) {
  if (id < 0 || id >= cb.vocab_size())
    throw Error(ErrorKind::invalid_token, "token id " + std::to_string(id) + " outside [0, " +
                                              std::to_string(cb.vocab_size()) + ")");
  auto e = cb.entry(id);
  return {e.begin(), e.end()};
}

EmbedSeq embed(const TokenSeq& seq, const Codebook& cb) {
  EmbedSeq out(static_cast<int>(seq.size()), cb.dim());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto e = embed_one(seq[i], cb);
    std::copy(e.begin(), e.end(), out.at(static_cast<int>(i)).begin());
  }
  return out;
}

int nearest_code(std::span<const double> x, const Codebook& cb) {
  int best = 0;
  double best_d2 = INFINITY;
  for (int j = 0; j < cb.vocab_size(); ++j) {
    const auto c = cb.entry(j);
    double d2 = 0.0;
    for (int k = 0; k < cb.dim(); ++k) {
      const double d = x[k] - c[k];
      d2 += d * d;
    }
    // strict comparison keeps the lowest index on ties
    if (d2 < best_d2) {
      best_d2 = d2;
      best = j;
    }
  }
  return best;
}

TokenSeq quantize(const EmbedSeq& x, const Codebook& cb) {
  if (x.dim() != cb.dim()) throw Error(ErrorKind::shape_mismatch, "embedding dim differs from codebook dim");
  TokenSeq ids(static_cast<std::size_t>(x.length()));
  for (int i = 0; i < x.length(); ++i) ids[i] = nearest_code(x.at(i), cb);
  return ids;
}

Vec corrupt(std::span<const double> x0, double t, std::span<const double> eps) {
  if (x0.size() != eps.size()) throw Error(ErrorKind::shape_mismatch, "corrupt: dimension mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw Error(ErrorKind::schedule, "corrupt: t outside [0, 1]");
  Vec out(x0.size());
  for (std::size_t k = 0; k < x0.size(); ++k) out[k] = (1.0 - t) * x0[k] + t * eps[k];
  return out;
}

}  // namespace csdlab
