#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bncde/rng.hpp"
#include "bncde/tape.hpp"

namespace bncde::nets {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { kTanh, kRelu, kSigmoid, kSoftplus };

// Throws std::invalid_argument (configuration error) for unknown names.
Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// Elementwise activation on plain vectors.
Vec apply_activation(Activation kind, const Vec& x);

// Feed-forward network shape.  layer_sizes runs input..output; every layer
// carries a bias.
struct MlpSpec {
  std::vector<int> layer_sizes;
  Activation hidden_activation = Activation::kRelu;
  std::optional<Activation> output_activation;

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }
};

// Throws std::invalid_argument if the spec has fewer than 2 layer sizes or a
// non-positive size.
void validate(const MlpSpec& spec);

// sum_i (layer_sizes[i] * layer_sizes[i+1] + layer_sizes[i+1])
std::int64_t param_count(const MlpSpec& spec);

// Flat storage of all weights and biases of one MLP.  Layout is fixed and
// portable: layer-major (first layer first), per layer the weight matrix in
// row-major order followed by the bias vector.  This is the state variable of
// the weight SDEs and the on-disk checkpoint layout.
struct FlatWeights {
  MlpSpec spec;
  Vec data;
};

// Offset of layer `layer`'s weight block within the flat vector.
std::int64_t layer_offset(const MlpSpec& spec, int layer);

FlatWeights pack(const MlpSpec& spec, const std::vector<std::pair<Mat, Vec>>& layers);
std::vector<std::pair<Mat, Vec>> unpack(const FlatWeights& w);

// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) on weights and biases, drawn from
// the given stream in layout order.
FlatWeights init_uniform(const MlpSpec& spec, Rng& rng);
FlatWeights zeros(const MlpSpec& spec);

// Plain forward pass; differentiable twin below.  Eigen::Ref binds matrix
// columns (e.g. one particle's weight vector) without copying.
Vec mlp_forward(const MlpSpec& spec, const Eigen::Ref<const Vec>& flat,
                const Eigen::Ref<const Vec>& x);
// Variant whose first layer consumes [x; t] with t a fixed scalar.
Vec mlp_forward_time(const MlpSpec& spec, const Eigen::Ref<const Vec>& flat,
                     const Eigen::Ref<const Vec>& x, double t);

// Tape versions; `weights` may be a trainable leaf or any computed node (the
// SDE weight state), gradients flow into both the weights and the input.
autodiff::NodeId mlp_apply(autodiff::Tape& tape, const MlpSpec& spec,
                           autodiff::NodeId weights, autodiff::NodeId x);
autodiff::NodeId mlp_apply_time(autodiff::Tape& tape, const MlpSpec& spec,
                                autodiff::NodeId weights, autodiff::NodeId x, double t);

// Bernoulli(p) zeroing with survivor scaling 1/(1-p); active at training and
// prediction time (MC dropout).  Throws std::domain_error unless 0 <= p < 1.
Vec mc_dropout(const Vec& x, double p, Rng& rng);
// Mask generator for the tape path (apply with Tape::mul_mask).
Vec dropout_mask(Eigen::Index size, double p, Rng& rng);

}  // namespace bncde::nets
