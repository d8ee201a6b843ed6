// SPDX-License-Identifier: Apache-2.0
//
// Foundational types: codebook geometry, token and embedding sequences,
// the rectified-flow schedule and the corruption map.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace csdlab {

using Vec = std::vector<double>;
using TokenSeq = std::vector<int>;

/// V code vectors of dimension C, stored row-major. Entries are finite and
/// pairwise distinct so nearest-code quantization is unique almost everywhere.
class Codebook {
 public:
  Codebook(int vocab_size, int dim, std::vector<double> entries);

  int vocab_size() const noexcept { return vocab_; }
  int dim() const noexcept { return dim_; }

  std::span<const double> entry(int j) const {
    return {entries_.data() + static_cast<std::size_t>(j) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<const double> data() const noexcept { return entries_; }

  /// Codes evenly spaced on the unit circle in the first two coordinates
  /// (C >= 2), or evenly spaced on [-1, 1] when C == 1.
  static Codebook circle(int vocab_size, int dim);
  /// i.i.d. standard normal entries scaled by `scale`.
  static Codebook gaussian(int vocab_size, int dim, std::uint64_t seed, double scale = 1.0);

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  int vocab_;
  int dim_;
  std::vector<double> entries_;
};

/// Categorical distribution over the V codebook entries.
class ProbVector {
 public:
  static constexpr double kSumTolerance = 1e-9;

  explicit ProbVector(std::vector<double> p);

  std::size_t size() const noexcept { return p_.size(); }
  double operator[](std::size_t j) const { return p_[j]; }
  std::span<const double> values() const noexcept { return p_; }

  friend bool operator==(const ProbVector&, const ProbVector&) = default;

 private:
  std::vector<double> p_;
};

/// n token positions of dimension C in continuous form.
class EmbedSeq {
 public:
  EmbedSeq() = default;
  EmbedSeq(int length, int dim) : n_(length), dim_(dim), x_(static_cast<std::size_t>(length) * dim, 0.0) {}
  EmbedSeq(int length, int dim, std::vector<double> values);

  int length() const noexcept { return n_; }
  int dim() const noexcept { return dim_; }

  std::span<double> at(int i) { return {x_.data() + static_cast<std::size_t>(i) * dim_, static_cast<std::size_t>(dim_)}; }
  std::span<const double> at(int i) const {
    return {x_.data() + static_cast<std::size_t>(i) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<const double> data() const noexcept { return x_; }

  friend bool operator==(const EmbedSeq&, const EmbedSeq&) = default;

 private:
  int n_ = 0;
  int dim_ = 0;
  std::vector<double> x_;
};

/// Rectified-flow schedule: alpha_t = 1 - t, sigma_t = t, with times
/// restricted to [t_min, 1] wherever a formula divides by t.
struct Schedule {
  double t_min = 1e-3;

  static double alpha(double t) noexcept { return 1.0 - t; }
  static double sigma(double t) noexcept { return t; }

  void validate() const;
  /// Throws a schedule error unless t lies in [t_min, 1].
  void check(double t) const;
};

std::vector<double> embed_one(int id, const Codebook& cb);
EmbedSeq embed(const TokenSeq& seq, const Codebook& cb);

int nearest_code(std::span<const double> x, const Codebook& cb);
TokenSeq quantize(const EmbedSeq& x, const Codebook& cb);

/// (1 - t) * x0 + t * eps
Vec corrupt(std::span<const double> x0, double t, std::span<const double> eps);

}  // namespace csdlab
