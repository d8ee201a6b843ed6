// SPDX-License-Identifier: Apache-2.0
//
// Backbone + head network shared by the generator, the guidance network and
// the AR-diffusion initialization model.
//
// The backbone is a causal prefix encoder: the feature at position i sees
// only the start embedding and inputs at positions < i. The head maps
// (noisy token, timestep encoding, feature) to a C-dimensional velocity.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "csdlab/autodiff.hpp"
#include "csdlab/core.hpp"

namespace csdlab {

enum class BackboneFlavor {
  prefix_mlp,  ///< residual MLP over the running prefix mean
  attention,   ///< causally masked single-head attention
};

const char* to_string(BackboneFlavor flavor) noexcept;
BackboneFlavor backbone_flavor_from_string(const std::string& name);

struct NetShape {
  int length = 1;       ///< n
  int dim = 2;          ///< C
  int depth = 1;        ///< D, backbone layers
  int width = 32;       ///< W, backbone feature width
  int head_hidden = 64; ///< hidden width of the head
  int head_layers = 2;  ///< hidden layers of the head
  BackboneFlavor flavor = BackboneFlavor::prefix_mlp;

  void validate() const;
  friend bool operator==(const NetShape&, const NetShape&) = default;
};

/// Named parameter tensors of one network. The tensor list and order are a
/// pure function of the shape.
class NetParams {
 public:
  NetParams() = default;
  explicit NetParams(NetShape shape);

  const NetShape& shape() const noexcept { return shape_; }
  std::size_t tensor_count() const noexcept { return tensors_.size(); }
  const std::string& name(std::size_t k) const { return names_[k]; }
  ad::Mat& tensor(std::size_t k) { return tensors_[k]; }
  const ad::Mat& tensor(std::size_t k) const { return tensors_[k]; }
  /// Index of a named tensor; throws when absent.
  std::size_t index_of(const std::string& name) const;

  /// Total scalar count.
  std::size_t size() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  double& coord(std::size_t flat_index);

  bool all_finite() const;
  /// Sets every tensor whose name starts with "head." to zero.
  void zero_head();

  friend bool operator==(const NetParams&, const NetParams&) = default;

 private:
  NetShape shape_;
  std::vector<std::string> names_;
  std::vector<ad::Mat> tensors_;
};

/// Uniform +-1/sqrt(fan_in) initialization; the start and position embeddings
/// use +-1. With zero_head_output the head's final layer starts at zero so
/// the initial velocity is identically zero.
NetParams init_params(const NetShape& shape, std::uint64_t seed, bool zero_head_output = true);

/// Parameters placed on a tape, either as gradient leaves or as constants.
struct BoundNet {
  const NetShape* shape = nullptr;
  std::vector<ad::Var> vars;
  bool trainable = false;
};

BoundNet bind(ad::Tape& tape, const NetParams& params, bool trainable);
/// Reads the gradient of every bound tensor back into NetParams layout.
NetParams gradients(const ad::Tape& tape, const BoundNet& net, const NetParams& like);

/// Timestep encoding rows [t, sin 2 pi t, cos 2 pi t].
ad::Mat time_encoding(const ad::Col& t);

/// Causal features for a batch. `inputs[i]` holds the B x C tokens at
/// position i; the backbone consumes (start, inputs[0], ..., inputs[n-2]).
/// Every returned feature is B x W.
std::vector<ad::Var> backbone_features(ad::Tape& tape, const BoundNet& net, std::span<const ad::Var> inputs);

/// Velocity prediction for B rows of noisy tokens at per-row times t.
ad::Var head_velocity(ad::Tape& tape, const BoundNet& net, ad::Var x_t, const ad::Col& t, ad::Var feature);

/// Score from a velocity prediction, row-wise s = -((1 - t) v + x_t) / t.
ad::Var velocity_to_score_rows(ad::Tape& tape, ad::Var v, ad::Var x_t, const ad::Col& t);

/// One-step generator: x_i = eps_i - v(eps_i, t = 1, f_i(start, eps_<i)).
std::vector<ad::Var> generator_forward(ad::Tape& tape, const BoundNet& net, std::span<const ad::Var> noise);

// Value-level conveniences for single sequences.
std::vector<Vec> backbone_features(const NetParams& params, const EmbedSeq& inputs);
Vec head_velocity(const NetParams& params, std::span<const double> x_t, double t, std::span<const double> feature);
EmbedSeq generator_forward(const NetParams& params, const EmbedSeq& noise);

/// Batched generator forward without gradients; noise and result are
/// per-position B x C matrices.
std::vector<ad::Mat> generate_batch(const NetParams& params, const std::vector<ad::Mat>& noise);

struct Gradient {
  double loss = 0.0;
  NetParams grad;
};

/// Loss builder: receives the tape and the parameters bound as leaves and
/// returns a 1 x 1 loss node.
using LossBuilder = std::function<ad::Var(ad::Tape&, const BoundNet&)>;

/// Exact reverse-mode gradient of a scalar loss. Throws a gradient error
/// when the loss or any gradient entry is not finite.
Gradient grad(const NetParams& params, const LossBuilder& loss);

}  // namespace csdlab
