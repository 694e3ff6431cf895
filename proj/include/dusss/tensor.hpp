#pragma once

// Dense tensor with reverse-mode automatic differentiation.
//
// Values are stored as double. Every op records its inputs and a derivative
// rule on the result node when any input requires a gradient and grad mode is
// enabled; Tensor::backward() walks that record once in reverse topological
// order and accumulates into the `grad` buffers of every reachable tensor that
// requires a gradient.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dusss {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;     // set once backward has run through this node
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  // Returns the gradient buffer, zero-allocating on first use.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }
  // Mutable access is restricted to leaves; graph-tracked results are never
  // modified in place.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return node().data[flat]; }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  void zero_grad();

  // Copy of the values with no graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  void backward() const;

  Node& node() const;
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise with NumPy-style broadcasting over trailing-aligned dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // requires a > 0
Tensor sqrt(const Tensor& a);  // requires a > 0
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
// Gradient passes only where lo <= a <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor clamp_min(const Tensor& a, double lo);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);
// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& a);

// Reductions. Without an axis they reduce everything to a scalar of shape {1}.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);
// Euclidean norm; the derivative at a zero vector is taken as zero.
Tensor l2_norm(const Tensor& a);
Tensor l2_norm(const Tensor& a, std::size_t axis, bool keepdim = false);
// Max-shifted: max(x) + log(sum(exp(x - max(x)))).
Tensor logsumexp(const Tensor& a);
Tensor logsumexp(const Tensor& a, std::size_t axis, bool keepdim = false);
// Gradient routes to the first maximal element.
Tensor max(const Tensor& a);
Tensor max(const Tensor& a, std::size_t axis, bool keepdim = false);

Tensor softmax(const Tensor& a, std::size_t axis);
// Rows scaled to unit L2 norm, norms floored at `eps`.
Tensor normalize(const Tensor& a, std::size_t axis, double eps = 1e-12);

// Shape manipulation.
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
// Gathers slices along axis 0; repeated indices accumulate in backward.
Tensor index_select(const Tensor& a, std::span<const std::size_t> indices);
// Main diagonal of a square matrix.
Tensor diagonal(const Tensor& a);

// x: [B,Cin,H,W], weight: [Cout,Cin,k,k], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);
// Bilinear x2 upsampling with half-pixel centers and edge clamping.
Tensor upsample2x(const Tensor& x);
// Non-overlapping 2x2 average pooling.
Tensor avg_pool2x(const Tensor& x);

// Binary cross-entropy of probabilities `p` against soft targets `t`, with p
// clamped to [eps, 1 - eps] before the logs. Mean over all elements.
Tensor bce(const Tensor& p, const Tensor& target, double eps = 1e-7);

}  // namespace dusss
