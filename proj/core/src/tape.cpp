#include "bncde/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace bncde::autodiff {

namespace {

using RowMajorMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMajorMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

double softplus_stable(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double gaussian_log_density(double y, double mu, double var) {
  if (!(var > 0.0)) throw std::domain_error("gaussian_log_density: var must be > 0");
  const double d = y - mu;
  return -0.5 * std::log(2.0 * M_PI * var) - d * d / (2.0 * var);
}

NodeId Tape::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::check_exists(NodeId id, const char* what) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw std::invalid_argument(std::string(what) + ": node id out of range");
}

NodeId Tape::leaf(const Vec& value) {
  Node n;
  n.value = value;
  n.op = Op::kLeaf;
  n.needs_grad = true;
  return push(std::move(n));
}

NodeId Tape::constant(const Vec& value) {
  Node n;
  n.value = value;
  n.op = Op::kConst;
  n.needs_grad = false;
  return push(std::move(n));
}

NodeId Tape::constant_scalar(double value) {
  Vec v(1);
  v[0] = value;
  return constant(v);
}

NodeId Tape::affine_flat(NodeId weights, int offset, int rows, int cols, NodeId x) {
  check_exists(weights, "affine_flat");
  check_exists(x, "affine_flat");
  const Node& w = nodes_[weights];
  const Node& xi = nodes_[x];
  if (xi.value.size() != cols)
    throw std::invalid_argument("affine_flat: input length does not match cols");
  if (offset < 0 || offset + rows * cols + rows > w.value.size())
    throw std::invalid_argument("affine_flat: weight slice out of range");
  Node n;
  n.op = Op::kAffineFlat;
  n.a = weights;
  n.b = x;
  n.i0 = offset;
  n.i1 = rows;
  n.i2 = cols;
  ConstRowMajorMap W(w.value.data() + offset, rows, cols);
  n.value = W * xi.value + w.value.segment(offset + rows * cols, rows);
  n.needs_grad = w.needs_grad || xi.needs_grad;
  return push(std::move(n));
}

NodeId Tape::affine_flat_time(NodeId weights, int offset, int rows, int cols, NodeId x,
                              double t) {
  check_exists(weights, "affine_flat_time");
  check_exists(x, "affine_flat_time");
  const Node& w = nodes_[weights];
  const Node& xi = nodes_[x];
  if (xi.value.size() != cols - 1)
    throw std::invalid_argument("affine_flat_time: input length must be cols - 1");
  if (offset < 0 || offset + rows * cols + rows > w.value.size())
    throw std::invalid_argument("affine_flat_time: weight slice out of range");
  Node n;
  n.op = Op::kAffineFlatTime;
  n.a = weights;
  n.b = x;
  n.i0 = offset;
  n.i1 = rows;
  n.i2 = cols;
  n.c0 = t;
  ConstRowMajorMap W(w.value.data() + offset, rows, cols);
  n.value = W.leftCols(cols - 1) * xi.value + t * W.col(cols - 1) +
            w.value.segment(offset + rows * cols, rows);
  n.needs_grad = w.needs_grad || xi.needs_grad;
  return push(std::move(n));
}

NodeId Tape::matvec_flat(NodeId flat_matrix, int rows, int cols, const Vec& dx) {
  check_exists(flat_matrix, "matvec_flat");
  const Node& f = nodes_[flat_matrix];
  if (f.value.size() != static_cast<Eigen::Index>(rows) * cols)
    throw std::invalid_argument("matvec_flat: flat matrix size mismatch");
  if (dx.size() != cols) throw std::invalid_argument("matvec_flat: dx length mismatch");
  Node n;
  n.op = Op::kMatVecFlat;
  n.a = flat_matrix;
  n.i1 = rows;
  n.i2 = cols;
  n.aux = dx;
  ConstRowMajorMap F(f.value.data(), rows, cols);
  n.value = F * dx;
  n.needs_grad = f.needs_grad;
  return push(std::move(n));
}

namespace {
Node unary(Op op, NodeId a, const Node& src, Vec&& value) {
  Node n;
  n.op = op;
  n.a = a;
  n.value = std::move(value);
  n.needs_grad = src.needs_grad;
  return n;
}
}  // namespace

NodeId Tape::tanh(NodeId a) {
  check_exists(a, "tanh");
  return push(unary(Op::kTanh, a, nodes_[a], nodes_[a].value.array().tanh().matrix()));
}

NodeId Tape::relu(NodeId a) {
  check_exists(a, "relu");
  return push(unary(Op::kRelu, a, nodes_[a], nodes_[a].value.cwiseMax(0.0)));
}

NodeId Tape::sigmoid(NodeId a) {
  check_exists(a, "sigmoid");
  const Vec& x = nodes_[a].value;
  Vec y(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    // Stable in both tails.
    y[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                       : std::exp(x[i]) / (1.0 + std::exp(x[i]));
  }
  return push(unary(Op::kSigmoid, a, nodes_[a], std::move(y)));
}

NodeId Tape::softplus(NodeId a) {
  check_exists(a, "softplus");
  const Vec& x = nodes_[a].value;
  Vec y(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) y[i] = softplus_stable(x[i]);
  return push(unary(Op::kSoftplus, a, nodes_[a], std::move(y)));
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_exists(a, "add");
  check_exists(b, "add");
  if (nodes_[a].value.size() != nodes_[b].value.size())
    throw std::invalid_argument("add: shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value + nodes_[b].value;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  check_exists(a, "sub");
  check_exists(b, "sub");
  if (nodes_[a].value.size() != nodes_[b].value.size())
    throw std::invalid_argument("sub: shape mismatch");
  Node n;
  n.op = Op::kSub;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value - nodes_[b].value;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::neg(NodeId a) {
  check_exists(a, "neg");
  return push(unary(Op::kNeg, a, nodes_[a], -nodes_[a].value));
}

NodeId Tape::scale(NodeId a, double s) {
  check_exists(a, "scale");
  Node n = unary(Op::kScale, a, nodes_[a], s * nodes_[a].value);
  n.c0 = s;
  return push(std::move(n));
}

NodeId Tape::add_scaled(NodeId a, NodeId b, double s) {
  check_exists(a, "add_scaled");
  check_exists(b, "add_scaled");
  if (nodes_[a].value.size() != nodes_[b].value.size())
    throw std::invalid_argument("add_scaled: shape mismatch");
  Node n;
  n.op = Op::kAddScaled;
  n.a = a;
  n.b = b;
  n.c0 = s;
  n.value = nodes_[a].value + s * nodes_[b].value;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::add_scaled_shift(NodeId a, NodeId b, double s, const Vec& shift) {
  check_exists(a, "add_scaled_shift");
  check_exists(b, "add_scaled_shift");
  if (nodes_[a].value.size() != nodes_[b].value.size() ||
      nodes_[a].value.size() != shift.size())
    throw std::invalid_argument("add_scaled_shift: shape mismatch");
  Node n;
  n.op = Op::kAddScaledShift;
  n.a = a;
  n.b = b;
  n.c0 = s;
  n.aux = shift;
  n.value = nodes_[a].value + s * nodes_[b].value + shift;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::mul_mask(NodeId a, const Vec& mask) {
  check_exists(a, "mul_mask");
  if (nodes_[a].value.size() != mask.size())
    throw std::invalid_argument("mul_mask: shape mismatch");
  Node n;
  n.op = Op::kMulMask;
  n.a = a;
  n.aux = mask;
  n.value = nodes_[a].value.cwiseProduct(mask);
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

NodeId Tape::squared_norm(NodeId a) {
  check_exists(a, "squared_norm");
  Vec y(1);
  y[0] = nodes_[a].value.squaredNorm();
  return push(unary(Op::kSquaredNorm, a, nodes_[a], std::move(y)));
}

NodeId Tape::slice(NodeId a, int start, int len) {
  check_exists(a, "slice");
  if (start < 0 || len < 0 || start + len > nodes_[a].value.size())
    throw std::invalid_argument("slice: range out of bounds");
  Node n = unary(Op::kSlice, a, nodes_[a], nodes_[a].value.segment(start, len));
  n.i0 = start;
  n.i1 = len;
  return push(std::move(n));
}

NodeId Tape::add_const(NodeId a, double c) {
  check_exists(a, "add_const");
  Node n = unary(Op::kAddConst, a, nodes_[a], (nodes_[a].value.array() + c).matrix());
  n.c0 = c;
  return push(std::move(n));
}

NodeId Tape::gauss_log_density(double y, NodeId mu, NodeId var) {
  check_exists(mu, "gauss_log_density");
  check_exists(var, "gauss_log_density");
  if (nodes_[mu].value.size() != 1 || nodes_[var].value.size() != 1)
    throw std::invalid_argument("gauss_log_density: mu and var must be scalar nodes");
  Node n;
  n.op = Op::kGaussLogDensity;
  n.a = mu;
  n.b = var;
  n.c0 = y;
  Vec v(1);
  v[0] = gaussian_log_density(y, nodes_[mu].value[0], nodes_[var].value[0]);
  n.value = std::move(v);
  n.needs_grad = nodes_[mu].needs_grad || nodes_[var].needs_grad;
  return push(std::move(n));
}

NodeId Tape::sigmoid_bce(NodeId logit, double target) {
  check_exists(logit, "sigmoid_bce");
  if (nodes_[logit].value.size() != 1)
    throw std::invalid_argument("sigmoid_bce: logit must be a scalar node");
  Node n;
  n.op = Op::kSigmoidBce;
  n.a = logit;
  n.c0 = target;
  const double x = nodes_[logit].value[0];
  Vec v(1);
  v[0] = softplus_stable(x) - target * x;
  n.value = std::move(v);
  n.needs_grad = nodes_[logit].needs_grad;
  return push(std::move(n));
}

void Tape::backward(NodeId root, double seed) {
  check_exists(root, "backward");
  if (backward_done_)
    throw std::logic_error("backward: repeated calls on one tape are forbidden");
  if (nodes_[root].value.size() != 1)
    throw std::logic_error("backward: root must be scalar-valued");
  backward_done_ = true;

  auto ensure_grad = [this](NodeId id) -> Vec& {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Vec::Zero(n.value.size());
    return n.grad;
  };

  ensure_grad(root)[0] = seed;
  last_visits_ = 0;

  for (NodeId i = root; i >= 0; --i) {
    ++last_visits_;
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    const Vec& gy = n.grad;
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kAffineFlat:
      case Op::kAffineFlatTime: {
        Node& w = nodes_[n.a];
        Node& x = nodes_[n.b];
        const int rows = n.i1, cols = n.i2;
        const int xin = n.op == Op::kAffineFlatTime ? cols - 1 : cols;
        if (w.needs_grad) {
          Vec& gw = ensure_grad(n.a);
          RowMajorMap gW(gw.data() + n.i0, rows, cols);
          gW.leftCols(xin).noalias() += gy * x.value.transpose();
          if (n.op == Op::kAffineFlatTime) gW.col(cols - 1) += n.c0 * gy;
          gw.segment(n.i0 + rows * cols, rows) += gy;  // bias
        }
        if (x.needs_grad) {
          ConstRowMajorMap W(w.value.data() + n.i0, rows, cols);
          ensure_grad(n.b).noalias() += W.leftCols(xin).transpose() * gy;
        }
        break;
      }
      case Op::kMatVecFlat: {
        if (nodes_[n.a].needs_grad) {
          Vec& gf = ensure_grad(n.a);
          RowMajorMap gF(gf.data(), n.i1, n.i2);
          gF.noalias() += gy * n.aux.transpose();
        }
        break;
      }
      case Op::kTanh:
        if (nodes_[n.a].needs_grad)
          ensure_grad(n.a).array() += gy.array() * (1.0 - n.value.array().square());
        break;
      case Op::kRelu:
        if (nodes_[n.a].needs_grad)
          ensure_grad(n.a).array() +=
              gy.array() * (n.value.array() > 0.0).cast<double>();
        break;
      case Op::kSigmoid:
        if (nodes_[n.a].needs_grad)
          ensure_grad(n.a).array() +=
              gy.array() * n.value.array() * (1.0 - n.value.array());
        break;
      case Op::kSoftplus:
        // d softplus(x)/dx = sigmoid(x) = 1 - exp(-softplus(x)).
        if (nodes_[n.a].needs_grad)
          ensure_grad(n.a).array() += gy.array() * (1.0 - (-n.value.array()).exp());
        break;
      case Op::kAdd:
        if (nodes_[n.a].needs_grad) ensure_grad(n.a) += gy;
        if (nodes_[n.b].needs_grad) ensure_grad(n.b) += gy;
        break;
      case Op::kSub:
        if (nodes_[n.a].needs_grad) ensure_grad(n.a) += gy;
        if (nodes_[n.b].needs_grad) ensure_grad(n.b) -= gy;
        break;
      case Op::kNeg:
        if (nodes_[n.a].needs_grad) ensure_grad(n.a) -= gy;
        break;
      case Op::kScale:
        if (nodes_[n.a].needs_grad) ensure_grad(n.a) += n.c0 * gy;
        break;
      case Op::kAddScaled:
      case Op::kAddScaledShift:
        if (nodes_[n.a].needs_grad) ensure_grad(n.a) += gy;
        if (nodes_[n.b].needs_grad) ensure_grad(n.b) += n.c0 * gy;
        break;
      case Op::kMulMask:
        if (nodes_[n.a].needs_grad)
          ensure_grad(n.a).array() += gy.array() * n.aux.array();
        break;
      case Op::kSquaredNorm:
        if (nodes_[n.a].needs_grad)
          ensure_grad(n.a) += 2.0 * gy[0] * nodes_[n.a].value;
        break;
      case Op::kSlice:
        if (nodes_[n.a].needs_grad) ensure_grad(n.a).segment(n.i0, n.i1) += gy;
        break;
      case Op::kAddConst:
        if (nodes_[n.a].needs_grad) ensure_grad(n.a) += gy;
        break;
      case Op::kGaussLogDensity: {
        const double mu = nodes_[n.a].value[0];
        const double var = nodes_[n.b].value[0];
        const double d = n.c0 - mu;
        if (nodes_[n.a].needs_grad) ensure_grad(n.a)[0] += gy[0] * d / var;
        if (nodes_[n.b].needs_grad)
          ensure_grad(n.b)[0] += gy[0] * (-0.5 / var + d * d / (2.0 * var * var));
        break;
      }
      case Op::kSigmoidBce: {
        const double x = nodes_[n.a].value[0];
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x));
        if (nodes_[n.a].needs_grad) ensure_grad(n.a)[0] += gy[0] * (s - n.c0);
        break;
      }
    }
  }
}

}  // namespace bncde::autodiff
