// SPDX-License-Identifier: Apache-2.0
//
// Exact tabular autoregressive teacher p(q_i | q_<i) with dense prefix tables.
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "csdlab/core.hpp"
#include "csdlab/rng.hpp"

namespace csdlab {

/// Probability mass over whole token sequences.
using Distribution = std::map<TokenSeq, double>;

class TabularTeacher {
 public:
  static constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

  /// tables[i] holds V^i rows of V probabilities, one row per prefix of
  /// length i, prefixes ordered lexicographically (first token most significant).
  TabularTeacher(int length, int vocab_size, std::vector<std::vector<double>> tables);

  int length() const noexcept { return n_; }
  int vocab_size() const noexcept { return vocab_; }

  /// Conditional distribution of the next token after `prefix`.
  ProbVector cond_prob(std::span<const int> prefix) const;
  /// Same as cond_prob without the copy or validation; the prefix must be valid.
  std::span<const double> cond_row(std::span<const int> prefix) const;

  double seq_prob(std::span<const int> z) const;
  TokenSeq ancestral_sample(Rng& rng) const;

  Distribution enumerate_distribution(std::uint64_t cap = kDefaultEnumerationCap) const;

  const std::vector<std::vector<double>>& tables() const noexcept { return tables_; }

  friend bool operator==(const TabularTeacher&, const TabularTeacher&) = default;

 private:
  std::size_t row_offset(std::span<const int> prefix) const;

  int n_;
  int vocab_;
  std::vector<std::vector<double>> tables_;
};

/// Every conditional drawn independently from a symmetric Dirichlet.
TabularTeacher build_dirichlet(int length, int vocab_size, double concentration, std::uint64_t seed);

/// n = 2, V = 2: the first token is a fair coin and the second copies it.
TabularTeacher build_pair_teacher();

/// A teacher whose conditionals ignore the prefix: position i uses marginals[i].
TabularTeacher build_independent(const std::vector<std::vector<double>>& marginals);

/// Per-position marginals of a distribution over length-n sequences.
std::vector<std::vector<double>> position_marginals(const Distribution& dist, int length, int vocab_size);

/// Number of sequences V^n, or throws a too-large error when it exceeds cap.
std::uint64_t sequence_space_size(int length, int vocab_size, std::uint64_t cap);

}  // namespace csdlab
