// SPDX-License-Identifier: Apache-2.0
#include "csdlab/nets.hpp"

#include <cmath>
#include <numbers>

#include "csdlab/error.hpp"
#include "csdlab/rng.hpp"

namespace csdlab {

using ad::Col;
using ad::Mat;
using ad::Tape;
using ad::Var;

const char* to_string(BackboneFlavor flavor) noexcept {
  switch (flavor) {
    case BackboneFlavor::prefix_mlp: return "prefix_mlp";
    case BackboneFlavor::attention: return "attention";
  }
  return "prefix_mlp";
}

BackboneFlavor backbone_flavor_from_string(const std::string& name) {
  if (name == "prefix_mlp") return BackboneFlavor::prefix_mlp;
  if (name == "attention") return BackboneFlavor::attention;
  throw Error(ErrorKind::config, "unknown backbone flavor '" + name + "'");
}

void NetShape::validate() const {
  if (length < 1 || dim < 1 || depth < 1 || width < 1 || head_hidden < 1 || head_layers < 1)
    throw Error(ErrorKind::invalid_argument, "network shape entries must all be >= 1");
}

namespace {

struct Layout {
  std::vector<std::string> names;
  std::vector<std::pair<int, int>> dims;
  void add(std::string name, int rows, int cols) {
    names.push_back(std::move(name));
    dims.emplace_back(rows, cols);
  }
};

Layout layout_for(const NetShape& s) {
  Layout l;
  const int W = s.width;
  l.add("backbone.start", 1, s.dim);
  l.add("backbone.pos", s.length, W);
  l.add("backbone.embed.w", s.dim, W);
  l.add("backbone.embed.b", 1, W);
  for (int k = 0; k < s.depth; ++k) {
    const std::string p = "backbone.l" + std::to_string(k) + ".";
    if (s.flavor == BackboneFlavor::attention) {
      l.add(p + "q", W, W);
      l.add(p + "k", W, W);
      l.add(p + "v", W, W);
      l.add(p + "o", W, W);
    } else {
      l.add(p + "mix", W, W);
    }
    l.add(p + "self", W, W);
    l.add(p + "b", 1, W);
  }
  int in = s.dim + 3 + W;
  for (int k = 0; k < s.head_layers; ++k) {
    const std::string p = "head.h" + std::to_string(k) + ".";
    l.add(p + "w", in, s.head_hidden);
    l.add(p + "b", 1, s.head_hidden);
    in = s.head_hidden;
  }
  l.add("head.out.w", in, s.dim);
  l.add("head.out.b", 1, s.dim);
  return l;
}

// Fixed tensor positions shared by every flavor.
constexpr std::size_t kStart = 0;
constexpr std::size_t kPos = 1;
constexpr std::size_t kEmbedW = 2;
constexpr std::size_t kEmbedB = 3;
constexpr std::size_t kFirstLayer = 4;

std::size_t tensors_per_layer(const NetShape& s) { return s.flavor == BackboneFlavor::attention ? 6 : 3; }

std::size_t head_begin(const NetShape& s) { return kFirstLayer + s.depth * tensors_per_layer(s); }

}  // namespace

NetParams::NetParams(NetShape shape) : shape_(shape) {
  shape_.validate();
  const Layout l = layout_for(shape_);
  names_ = l.names;
  tensors_.reserve(l.dims.size());
  for (auto [r, c] : l.dims) tensors_.push_back(Mat::Zero(r, c));
}

std::size_t NetParams::index_of(const std::string& name) const {
  for (std::size_t k = 0; k < names_.size(); ++k)
    if (names_[k] == name) return k;
  throw Error(ErrorKind::invalid_argument, "no parameter tensor named '" + name + "'");
}

std::size_t NetParams::size() const {
  std::size_t total = 0;
  for (const auto& t : tensors_) total += static_cast<std::size_t>(t.size());
  return total;
}

std::vector<double> NetParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  for (const auto& t : tensors_) flat.insert(flat.end(), t.data(), t.data() + t.size());
  return flat;
}

void NetParams::assign(std::span<const double> flat) {
  if (flat.size() != size()) throw Error(ErrorKind::shape_mismatch, "flat parameter vector has the wrong length");
  std::size_t at = 0;
  for (auto& t : tensors_) {
    std::copy(flat.begin() + at, flat.begin() + at + t.size(), t.data());
    at += static_cast<std::size_t>(t.size());
  }
}

double& NetParams::coord(std::size_t flat_index) {
  for (auto& t : tensors_) {
    if (flat_index < static_cast<std::size_t>(t.size())) return t.data()[flat_index];
    flat_index -= static_cast<std::size_t>(t.size());
  }
  throw Error(ErrorKind::invalid_argument, "parameter coordinate out of range");
}

bool NetParams::all_finite() const {
  for (const auto& t : tensors_)
    if (!t.allFinite()) return false;
  return true;
}

void NetParams::zero_head() {
  for (std::size_t k = 0; k < tensors_.size(); ++k)
    if (names_[k].rfind("head.", 0) == 0) tensors_[k].setZero();
}

NetParams init_params(const NetShape& shape, std::uint64_t seed, bool zero_head_output) {
  NetParams p(shape);
  Rng rng(seed);
  for (std::size_t k = 0; k < p.tensor_count(); ++k) {
    Mat& t = p.tensor(k);
    const std::string& name = p.name(k);
    double bound = 1.0;
    if (name != "backbone.start" && name != "backbone.pos") {
      // biases share the fan-in of their weight matrix
      const Mat& w = (name.size() > 2 && name.substr(name.size() - 2) == ".b") ? p.tensor(k - 1) : t;
      bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
  }
  if (zero_head_output) {
    p.tensor(p.index_of("head.out.w")).setZero();
    p.tensor(p.index_of("head.out.b")).setZero();
  }
  return p;
}

BoundNet bind(Tape& tape, const NetParams& params, bool trainable) {
  BoundNet net;
  net.shape = &params.shape();
  net.trainable = trainable;
  net.vars.reserve(params.tensor_count());
  for (std::size_t k = 0; k < params.tensor_count(); ++k)
    net.vars.push_back(trainable ? tape.leaf(params.tensor(k)) : tape.constant(params.tensor(k)));
  return net;
}

NetParams gradients(const Tape& tape, const BoundNet& net, const NetParams& like) {
  NetParams g(like.shape());
  for (std::size_t k = 0; k < net.vars.size(); ++k) g.tensor(k) = tape.grad(net.vars[k]);
  return g;
}

Mat time_encoding(const Col& t) {
  Mat enc(t.size(), 3);
  for (Eigen::Index r = 0; r < t.size(); ++r) {
    enc(r, 0) = t[r];
    enc(r, 1) = std::sin(2.0 * std::numbers::pi * t[r]);
    enc(r, 2) = std::cos(2.0 * std::numbers::pi * t[r]);
  }
  return enc;
}

std::vector<Var> backbone_features(Tape& tape, const BoundNet& net, std::span<const Var> inputs) {
  const NetShape& s = *net.shape;
  if (inputs.size() != static_cast<std::size_t>(s.length))
    throw Error(ErrorKind::length_mismatch, "backbone expects " + std::to_string(s.length) + " positions, got " +
                                                std::to_string(inputs.size()));
  for (Var in : inputs)
    if (tape.value(in).cols() != s.dim) throw Error(ErrorKind::shape_mismatch, "backbone input width != C");
  const Eigen::Index B = tape.value(inputs[0]).rows();
  const int n = s.length;

  std::vector<Var> h(n);
  for (int i = 0; i < n; ++i) {
    const Var u = i == 0 ? net.vars[kStart] : inputs[i - 1];
    Var a = tape.add(tape.matmul(u, net.vars[kEmbedW]), net.vars[kEmbedB]);
    a = tape.add(a, tape.row(net.vars[kPos], i));
    h[i] = tape.tanh(a);
    if (i == 0) h[i] = tape.broadcast_rows(h[i], B);
  }

  const std::size_t per = tensors_per_layer(s);
  for (int layer = 0; layer < s.depth; ++layer) {
    const std::size_t base = kFirstLayer + layer * per;
    std::vector<Var> next(n);
    if (s.flavor == BackboneFlavor::prefix_mlp) {
      const Var mix = net.vars[base], self = net.vars[base + 1], bias = net.vars[base + 2];
      Var running = h[0];
      for (int i = 0; i < n; ++i) {
        if (i > 0) running = tape.add(running, h[i]);
        const Var mean = tape.scale(running, 1.0 / (i + 1));
        Var pre = tape.add(tape.matmul(h[i], self), tape.matmul(mean, mix));
        next[i] = tape.add(h[i], tape.tanh(tape.add(pre, bias)));
      }
    } else {
      const Var wq = net.vars[base], wk = net.vars[base + 1], wv = net.vars[base + 2];
      const Var wo = net.vars[base + 3], self = net.vars[base + 4], bias = net.vars[base + 5];
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(s.width));
      std::vector<Var> keys(n), values(n);
      for (int j = 0; j < n; ++j) {
        keys[j] = tape.matmul(h[j], wk);
        values[j] = tape.matmul(h[j], wv);
      }
      for (int i = 0; i < n; ++i) {
        const Var q = tape.matmul(h[i], wq);
        std::vector<Var> logits;
        for (int j = 0; j <= i; ++j) logits.push_back(tape.scale(tape.row_dot(q, keys[j]), inv_sqrt));
        const Var attn = tape.softmax_rows(tape.concat_cols(logits));
        Var ctx = tape.mul_col(values[0], tape.slice_cols(attn, 0, 1));
        for (int j = 1; j <= i; ++j) ctx = tape.add(ctx, tape.mul_col(values[j], tape.slice_cols(attn, j, 1)));
        Var pre = tape.add(tape.matmul(ctx, wo), tape.matmul(h[i], self));
        next[i] = tape.add(h[i], tape.tanh(tape.add(pre, bias)));
      }
    }
    h = std::move(next);
  }
  return h;
}

Var head_velocity(Tape& tape, const BoundNet& net, Var x_t, const Col& t, Var feature) {
  const NetShape& s = *net.shape;
  const Eigen::Index B = tape.value(x_t).rows();
  if (tape.value(x_t).cols() != s.dim || t.size() != B)
    throw Error(ErrorKind::shape_mismatch, "head input rows/cols do not match");
  if (tape.value(feature).cols() != s.width) throw Error(ErrorKind::shape_mismatch, "head feature width != W");
  if (tape.value(feature).rows() == 1 && B > 1) feature = tape.broadcast_rows(feature, B);
  const Var parts[] = {x_t, tape.constant(time_encoding(t)), feature};
  Var z = tape.concat_cols(parts);
  std::size_t k = head_begin(s);
  for (int layer = 0; layer < s.head_layers; ++layer, k += 2)
    z = tape.tanh(tape.add(tape.matmul(z, net.vars[k]), net.vars[k + 1]));
  return tape.add(tape.matmul(z, net.vars[k]), net.vars[k + 1]);
}

Var velocity_to_score_rows(Tape& tape, Var v, Var x_t, const Col& t) {
  const Col v_factor = -(1.0 - t.array()) / t.array();
  const Col x_factor = -1.0 / t.array();
  return tape.add(tape.scale_rows(v, v_factor), tape.scale_rows(x_t, x_factor));
}

std::vector<Var> generator_forward(Tape& tape, const BoundNet& net, std::span<const Var> noise) {
  const std::vector<Var> features = backbone_features(tape, net, noise);
  const Col ones = Col::Ones(tape.value(noise[0]).rows());
  std::vector<Var> out(noise.size());
  for (std::size_t i = 0; i < noise.size(); ++i)
    out[i] = tape.sub(noise[i], head_velocity(tape, net, noise[i], ones, features[i]));
  return out;
}

namespace {

std::vector<Var> rows_of(Tape& tape, const EmbedSeq& seq) {
  std::vector<Var> vars;
  for (int i = 0; i < seq.length(); ++i) {
    Mat m(1, seq.dim());
    for (int c = 0; c < seq.dim(); ++c) m(0, c) = seq.at(i)[c];
    vars.push_back(tape.constant(std::move(m)));
  }
  return vars;
}

}  // namespace

std::vector<Vec> backbone_features(const NetParams& params, const EmbedSeq& inputs) {
  Tape tape;
  const BoundNet net = bind(tape, params, false);
  const auto vars = rows_of(tape, inputs);
  const auto feats = backbone_features(tape, net, vars);
  std::vector<Vec> out;
  for (Var f : feats) {
    const Mat& m = tape.value(f);
    out.emplace_back(m.data(), m.data() + m.cols());
  }
  return out;
}

Vec head_velocity(const NetParams& params, std::span<const double> x_t, double t, std::span<const double> feature) {
  Tape tape;
  const BoundNet net = bind(tape, params, false);
  Mat x(1, static_cast<Eigen::Index>(x_t.size()));
  for (std::size_t k = 0; k < x_t.size(); ++k) x(0, k) = x_t[k];
  Mat f(1, static_cast<Eigen::Index>(feature.size()));
  for (std::size_t k = 0; k < feature.size(); ++k) f(0, k) = feature[k];
  Col tc(1);
  tc[0] = t;
  const Mat& v = tape.value(head_velocity(tape, net, tape.constant(std::move(x)), tc, tape.constant(std::move(f))));
  return Vec(v.data(), v.data() + v.cols());
}

EmbedSeq generator_forward(const NetParams& params, const EmbedSeq& noise) {
  Tape tape;
  const BoundNet net = bind(tape, params, false);
  const auto vars = rows_of(tape, noise);
  const auto out = generator_forward(tape, net, vars);
  EmbedSeq x(noise.length(), noise.dim());
  for (int i = 0; i < noise.length(); ++i) {
    const Mat& m = tape.value(out[i]);
    std::copy(m.data(), m.data() + m.cols(), x.at(i).begin());
  }
  return x;
}

std::vector<Mat> generate_batch(const NetParams& params, const std::vector<Mat>& noise) {
  Tape tape;
  const BoundNet net = bind(tape, params, false);
  std::vector<Var> vars;
  for (const Mat& m : noise) vars.push_back(tape.constant(m));
  const auto out = generator_forward(tape, net, vars);
  std::vector<Mat> x;
  for (Var v : out) x.push_back(tape.value(v));
  return x;
}

Gradient grad(const NetParams& params, const LossBuilder& loss) {
  Tape tape;
  const BoundNet net = bind(tape, params, true);
  const Var root = loss(tape, net);
  const Mat& lv = tape.value(root);
  if (lv.rows() != 1 || lv.cols() != 1) throw Error(ErrorKind::gradient, "loss must be a scalar");
  if (!std::isfinite(lv(0, 0))) throw Error(ErrorKind::gradient, "loss is not finite");
  tape.backward(root);
  Gradient g{lv(0, 0), gradients(tape, net, params)};
  if (!g.grad.all_finite()) throw Error(ErrorKind::gradient, "gradient has non-finite entries");
  return g;
}

}  // namespace csdlab
