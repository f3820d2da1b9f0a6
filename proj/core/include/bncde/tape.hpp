#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace bncde::autodiff {

using Vec = Eigen::VectorXd;
using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

// Backward rule identifiers. One enum value per registered op.
enum class Op : std::uint8_t {
  kLeaf,
  kConst,
  kAffineFlat,       // y = W x + b, W/b stored row-major in a flat weight node
  kAffineFlatTime,   // same, but the last weight column multiplies a fixed time scalar
  kMatVecFlat,       // y_i = sum_j a[i*cols+j] * dx_j, dx a fixed control increment
  kTanh,
  kRelu,
  kSigmoid,
  kSoftplus,
  kAdd,
  kSub,
  kNeg,
  kScale,            // y = c0 * a
  kAddScaled,        // y = a + c0 * b
  kAddScaledShift,   // y = a + c0 * b + aux   (aux fixed, e.g. diffusion noise)
  kMulMask,          // y = a .* aux           (aux fixed, e.g. dropout mask)
  kSquaredNorm,      // scalar y = |a|^2
  kSlice,            // y = a.segment(i0, i1)
  kAddConst,         // y = a + c0 elementwise
  kGaussLogDensity,  // scalar log N(c0 | mu=a, var=b)
  kSigmoidBce,       // scalar softplus(a) - c0 * a  (binary cross-entropy on a logit)
};

struct Node {
  Vec value;
  Vec grad;          // same shape as value; allocated during backward
  Op op = Op::kConst;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  int i0 = 0, i1 = 0, i2 = 0;  // offset / rows / cols or slice start / length
  double c0 = 0.0;             // scalar payload (scale factor, time value, target, ...)
  Vec aux;                     // fixed vector payload (noise, mask, control increment)
  bool needs_grad = false;
};

// Overflow-safe softplus: max(x,0) + log1p(exp(-|x|)).
double softplus_stable(double x);

// log N(y | mu, var); throws std::domain_error unless var > 0.
double gaussian_log_density(double y, double mu, double var);

// A record-and-replay reverse-mode tape over dense 64-bit vectors.  Nodes are
// appended in topological order, so the backward pass is a single reverse
// sweep.  A tape is confined to one thread from construction through
// backward(); independent tapes may run concurrently.
class Tape {
 public:
  Tape() = default;

  void reserve(std::size_t n) { nodes_.reserve(n); }
  std::size_t size() const { return nodes_.size(); }

  NodeId leaf(const Vec& value);
  NodeId constant(const Vec& value);
  NodeId constant_scalar(double value);

  NodeId affine_flat(NodeId weights, int offset, int rows, int cols, NodeId x);
  // Input layout [x; t] with t a fixed scalar: cols counts the full input
  // width including the time column.
  NodeId affine_flat_time(NodeId weights, int offset, int rows, int cols, NodeId x,
                          double t);
  NodeId matvec_flat(NodeId flat_matrix, int rows, int cols, const Vec& dx);

  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId softplus(NodeId a);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId scale(NodeId a, double s);
  NodeId add_scaled(NodeId a, NodeId b, double s);
  NodeId add_scaled_shift(NodeId a, NodeId b, double s, const Vec& shift);
  NodeId mul_mask(NodeId a, const Vec& mask);
  NodeId squared_norm(NodeId a);
  NodeId slice(NodeId a, int start, int len);
  NodeId add_const(NodeId a, double c);
  NodeId gauss_log_density(double y, NodeId mu, NodeId var);
  NodeId sigmoid_bce(NodeId logit, double target);

  const Vec& value(NodeId id) const { return nodes_[id].value; }
  // Valid after backward(); zero-sized for nodes the sweep never reached.
  const Vec& grad(NodeId id) const { return nodes_[id].grad; }

  // Seeds d(root)/d(root) = seed and accumulates gradients into every
  // reachable ancestor.  root must be scalar-valued; calling twice on one
  // tape is a contract violation.
  void backward(NodeId root, double seed = 1.0);

  // Number of nodes visited by the last backward sweep (instrumentation for
  // the visit-each-node-once invariant).
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  NodeId push(Node&& n);
  Node& at(NodeId id) { return nodes_[id]; }
  void check_exists(NodeId id, const char* what) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::size_t last_visits_ = 0;
};

}  // namespace bncde::autodiff
