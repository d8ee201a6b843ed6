// SPDX-License-Identifier: Apache-2.0
#include "csdlab/teacher.hpp"

#include <cmath>
#include <string>

#include "csdlab/error.hpp"

namespace csdlab {

namespace {

std::size_t ipow(int base, int exp) {
  std::size_t r = 1;
  for (int k = 0; k < exp; ++k) r *= static_cast<std::size_t>(base);
  return r;
}

}  // namespace

TabularTeacher::TabularTeacher(int length, int vocab_size, std::vector<std::vector<double>> tables)
    : n_(length), vocab_(vocab_size), tables_(std::move(tables)) {
  if (n_ < 1 || vocab_ < 1) throw Error(ErrorKind::invalid_argument, "teacher needs n >= 1 and V >= 1");
  if (tables_.size() != static_cast<std::size_t>(n_))
    throw Error(ErrorKind::shape_mismatch, "teacher needs one table per position");
  for (int i = 0; i < n_; ++i) {
    const std::size_t rows = ipow(vocab_, i);
    if (tables_[i].size() != rows * vocab_)
      throw Error(ErrorKind::shape_mismatch, "table " + std::to_string(i) + " must hold V^i rows of V values");
    for (std::size_t r = 0; r < rows; ++r) {
      // validates nonnegativity and normalization of each stored row
      ProbVector(std::vector<double>(tables_[i].begin() + r * vocab_, tables_[i].begin() + (r + 1) * vocab_));
    }
  }
}

std::size_t TabularTeacher::row_offset(std::span<const int> prefix) const {
  std::size_t row = 0;
  for (int id : prefix) row = row * vocab_ + static_cast<std::size_t>(id);
  return row * vocab_;
}

std::span<const double> TabularTeacher::cond_row(std::span<const int> prefix) const {
  return {tables_[prefix.size()].data() + row_offset(prefix), static_cast<std::size_t>(vocab_)};
}

ProbVector TabularTeacher::cond_prob(std::span<const int> prefix) const {
  if (prefix.size() >= static_cast<std::size_t>(n_))
    throw Error(ErrorKind::position, "prefix of length " + std::to_string(prefix.size()) +
                                         " has no next position (n = " + std::to_string(n_) + ")");
  for (int id : prefix)
    if (id < 0 || id >= vocab_) throw Error(ErrorKind::invalid_token, "prefix id out of range");
  const auto row = cond_row(prefix);
  return ProbVector(std::vector<double>(row.begin(), row.end()));
}

double TabularTeacher::seq_prob(std::span<const int> z) const {
  if (z.size() != static_cast<std::size_t>(n_))
    throw Error(ErrorKind::length_mismatch, "sequence length " + std::to_string(z.size()) + " != n");
  for (int id : z)
    if (id < 0 || id >= vocab_) throw Error(ErrorKind::invalid_token, "sequence id out of range");
  double p = 1.0;
  for (int i = 0; i < n_; ++i) p *= cond_row(z.first(i))[z[i]];
  return p;
}

TokenSeq TabularTeacher::ancestral_sample(Rng& rng) const {
  TokenSeq z;
  z.reserve(n_);
  for (int i = 0; i < n_; ++i) z.push_back(rng.categorical(cond_row(z)));
  return z;
}

std::uint64_t sequence_space_size(int length, int vocab_size, std::uint64_t cap) {
  std::uint64_t total = 1;
  for (int i = 0; i < length; ++i) {
    total *= static_cast<std::uint64_t>(vocab_size);
    if (total > cap)
      throw Error(ErrorKind::too_large, "V^n exceeds the enumeration cap of " + std::to_string(cap));
  }
  return total;
}

Distribution TabularTeacher::enumerate_distribution(std::uint64_t cap) const {
  const std::uint64_t total = sequence_space_size(n_, vocab_, cap);
  Distribution dist;
  TokenSeq z(n_, 0);
  for (std::uint64_t code = 0; code < total; ++code) {
    std::uint64_t rest = code;
    for (int i = n_ - 1; i >= 0; --i) {
      z[i] = static_cast<int>(rest % vocab_);
      rest /= vocab_;
    }
    dist.emplace_hint(dist.end(), z, seq_prob(z));
  }
  return dist;
}

TabularTeacher build_dirichlet(int length, int vocab_size, double concentration, std::uint64_t seed) {
  if (!(concentration > 0.0) || !std::isfinite(concentration))
    throw Error(ErrorKind::invalid_argument, "Dirichlet concentration must be positive");
  if (length < 1 || vocab_size < 1) throw Error(ErrorKind::invalid_argument, "teacher needs n >= 1 and V >= 1");
  Rng rng(seed);
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<std::vector<double>> tables(length);
  for (int i = 0; i < length; ++i) {
    const std::size_t rows = ipow(vocab_size, i);
    tables[i].resize(rows * vocab_size);
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = tables[i].data() + r * vocab_size;
      double sum = 0.0;
      for (int j = 0; j < vocab_size; ++j) sum += row[j] = gamma(rng.engine());
      // Gamma draws at tiny concentration can all underflow to zero.
      if (!(sum > 0.0)) {
        row[0] = sum = 1.0;
      }
      for (int j = 0; j < vocab_size; ++j) row[j] /= sum;
    }
  }
  return TabularTeacher(length, vocab_size, std::move(tables));
}

TabularTeacher build_pair_teacher() {
  return TabularTeacher(2, 2, {{0.5, 0.5}, {1.0, 0.0, 0.0, 1.0}});
}

TabularTeacher build_independent(const std::vector<std::vector<double>>& marginals) {
  if (marginals.empty()) throw Error(ErrorKind::invalid_argument, "need at least one position");
  const int n = static_cast<int>(marginals.size());
  const int V = static_cast<int>(marginals.front().size());
  std::vector<std::vector<double>> tables(n);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(marginals[i].size()) != V) throw Error(ErrorKind::shape_mismatch, "ragged marginals");
    const std::size_t rows = ipow(V, i);
    tables[i].reserve(rows * V);
    for (std::size_t r = 0; r < rows; ++r) tables[i].insert(tables[i].end(), marginals[i].begin(), marginals[i].end());
  }
  return TabularTeacher(n, V, std::move(tables));
}

std::vector<std::vector<double>> position_marginals(const Distribution& dist, int length, int vocab_size) {
  std::vector<std::vector<double>> m(length, std::vector<double>(vocab_size, 0.0));
  for (const auto& [z, p] : dist) {
    if (static_cast<int>(z.size()) != length) throw Error(ErrorKind::length_mismatch, "sequence length != n");
    for (int i = 0; i < length; ++i) m[i][z[i]] += p;
  }
  return m;
}

}  // namespace csdlab
