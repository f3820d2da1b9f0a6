#include "bncde/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace bncde::nets {

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "softplus") return Activation::kSoftplus;
  throw std::invalid_argument("unknown activation kind: '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kSoftplus: return "softplus";
  }
  throw std::invalid_argument("unknown activation kind");
}

Vec apply_activation(Activation kind, const Vec& x) {
  switch (kind) {
    case Activation::kTanh:
      return x.array().tanh().matrix();
    case Activation::kRelu:
      return x.cwiseMax(0.0);
    case Activation::kSigmoid: {
      Vec y(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i)
        y[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                           : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      return y;
    }
    case Activation::kSoftplus: {
      Vec y(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) y[i] = autodiff::softplus_stable(x[i]);
      return y;
    }
  }
  throw std::invalid_argument("unknown activation kind");
}

namespace {

autodiff::NodeId apply_activation_node(autodiff::Tape& tape, Activation kind,
                                       autodiff::NodeId x) {
  switch (kind) {
    case Activation::kTanh: return tape.tanh(x);
    case Activation::kRelu: return tape.relu(x);
    case Activation::kSigmoid: return tape.sigmoid(x);
    case Activation::kSoftplus: return tape.softplus(x);
  }
  throw std::invalid_argument("unknown activation kind");
}

}  // namespace

void validate(const MlpSpec& spec) {
  if (spec.layer_sizes.size() < 2)
    throw std::invalid_argument("MlpSpec: need at least input and output sizes");
  for (int s : spec.layer_sizes)
    if (s <= 0) throw std::invalid_argument("MlpSpec: layer sizes must be positive");
}

std::int64_t param_count(const MlpSpec& spec) {
  validate(spec);
  std::int64_t total = 0;
  for (std::size_t i = 0; i + 1 < spec.layer_sizes.size(); ++i) {
    total += static_cast<std::int64_t>(spec.layer_sizes[i]) * spec.layer_sizes[i + 1] +
             spec.layer_sizes[i + 1];
  }
  return total;
}

std::int64_t layer_offset(const MlpSpec& spec, int layer) {
  std::int64_t off = 0;
  for (int i = 0; i < layer; ++i) {
    off += static_cast<std::int64_t>(spec.layer_sizes[i]) * spec.layer_sizes[i + 1] +
           spec.layer_sizes[i + 1];
  }
  return off;
}

FlatWeights pack(const MlpSpec& spec, const std::vector<std::pair<Mat, Vec>>& layers) {
  validate(spec);
  if (static_cast<int>(layers.size()) != spec.num_layers())
    throw std::invalid_argument("pack: wrong number of layers");
  FlatWeights w{spec, Vec(param_count(spec))};
  std::int64_t off = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int rows = spec.layer_sizes[l + 1];
    const int cols = spec.layer_sizes[l];
    const auto& [W, b] = layers[l];
    if (W.rows() != rows || W.cols() != cols || b.size() != rows)
      throw std::invalid_argument("pack: layer shape mismatch");
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        w.data.data() + off, rows, cols) = W;
    w.data.segment(off + static_cast<std::int64_t>(rows) * cols, rows) = b;
    off += static_cast<std::int64_t>(rows) * cols + rows;
  }
  return w;
}

std::vector<std::pair<Mat, Vec>> unpack(const FlatWeights& w) {
  validate(w.spec);
  if (w.data.size() != param_count(w.spec))
    throw std::invalid_argument("unpack: flat data length mismatch");
  std::vector<std::pair<Mat, Vec>> layers;
  std::int64_t off = 0;
  for (int l = 0; l < w.spec.num_layers(); ++l) {
    const int rows = w.spec.layer_sizes[l + 1];
    const int cols = w.spec.layer_sizes[l];
    Mat W = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                           Eigen::RowMajor>>(w.data.data() + off, rows,
                                                             cols);
    Vec b = w.data.segment(off + static_cast<std::int64_t>(rows) * cols, rows);
    layers.emplace_back(std::move(W), std::move(b));
    off += static_cast<std::int64_t>(rows) * cols + rows;
  }
  return layers;
}

FlatWeights init_uniform(const MlpSpec& spec, Rng& rng) {
  validate(spec);
  FlatWeights w{spec, Vec(param_count(spec))};
  std::int64_t off = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int rows = spec.layer_sizes[l + 1];
    const int cols = spec.layer_sizes[l];
    const double bound = std::sqrt(1.0 / cols);
    const std::int64_t n = static_cast<std::int64_t>(rows) * cols + rows;
    for (std::int64_t i = 0; i < n; ++i) w.data[off + i] = rng.uniform(-bound, bound);
    off += n;
  }
  return w;
}

FlatWeights zeros(const MlpSpec& spec) {
  validate(spec);
  return FlatWeights{spec, Vec::Zero(param_count(spec))};
}

namespace {

Vec affine_forward(const Vec& flat, std::int64_t off, int rows, int cols, const Vec& x) {
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      W(flat.data() + off, rows, cols);
  return W * x + flat.segment(off + static_cast<std::int64_t>(rows) * cols, rows);
}

}  // namespace

Vec mlp_forward(const MlpSpec& spec, const Eigen::Ref<const Vec>& flat,
                const Eigen::Ref<const Vec>& x) {
  validate(spec);
  if (x.size() != spec.input_size())
    throw std::invalid_argument("mlp_forward: input length mismatch");
  if (flat.size() != param_count(spec))
    throw std::invalid_argument("mlp_forward: flat weight length mismatch");
  Vec h = x;
  std::int64_t off = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int rows = spec.layer_sizes[l + 1];
    const int cols = spec.layer_sizes[l];
    h = affine_forward(flat, off, rows, cols, h);
    off += static_cast<std::int64_t>(rows) * cols + rows;
    if (l + 1 < spec.num_layers()) {
      h = apply_activation(spec.hidden_activation, h);
    } else if (spec.output_activation) {
      h = apply_activation(*spec.output_activation, h);
    }
  }
  return h;
}

Vec mlp_forward_time(const MlpSpec& spec, const Eigen::Ref<const Vec>& flat,
                     const Eigen::Ref<const Vec>& x, double t) {
  if (x.size() + 1 != spec.input_size())
    throw std::invalid_argument("mlp_forward_time: input length must be input_size - 1");
  Vec xe(x.size() + 1);
  xe.head(x.size()) = x;
  xe[x.size()] = t;
  return mlp_forward(spec, flat, xe);
}

autodiff::NodeId mlp_apply(autodiff::Tape& tape, const MlpSpec& spec,
                           autodiff::NodeId weights, autodiff::NodeId x) {
  validate(spec);
  autodiff::NodeId h = x;
  std::int64_t off = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int rows = spec.layer_sizes[l + 1];
    const int cols = spec.layer_sizes[l];
    h = tape.affine_flat(weights, static_cast<int>(off), rows, cols, h);
    off += static_cast<std::int64_t>(rows) * cols + rows;
    if (l + 1 < spec.num_layers()) {
      h = apply_activation_node(tape, spec.hidden_activation, h);
    } else if (spec.output_activation) {
      h = apply_activation_node(tape, *spec.output_activation, h);
    }
  }
  return h;
}

autodiff::NodeId mlp_apply_time(autodiff::Tape& tape, const MlpSpec& spec,
                                autodiff::NodeId weights, autodiff::NodeId x, double t) {
  validate(spec);
  autodiff::NodeId h = x;
  std::int64_t off = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int rows = spec.layer_sizes[l + 1];
    const int cols = spec.layer_sizes[l];
    // The time scalar enters only through the first layer's trailing column.
    h = l == 0 ? tape.affine_flat_time(weights, static_cast<int>(off), rows, cols, h, t)
               : tape.affine_flat(weights, static_cast<int>(off), rows, cols, h);
    off += static_cast<std::int64_t>(rows) * cols + rows;
    if (l + 1 < spec.num_layers()) {
      h = apply_activation_node(tape, spec.hidden_activation, h);
    } else if (spec.output_activation) {
      h = apply_activation_node(tape, *spec.output_activation, h);
    }
  }
  return h;
}

Vec dropout_mask(Eigen::Index size, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::domain_error("dropout: p must be in [0, 1)");
  Vec mask(size);
  if (p == 0.0) {
    mask.setOnes();
    return mask;
  }
  const double keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < size; ++i)
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
  return mask;
}

Vec mc_dropout(const Vec& x, double p, Rng& rng) {
  return x.cwiseProduct(dropout_mask(x.size(), p, rng));
}

}  // namespace bncde::nets
