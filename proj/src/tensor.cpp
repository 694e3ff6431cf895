#include "dusss/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace dusss {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

thread_local bool g_grad_enabled = true;

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw TensorError("op '" + op + "': " + what);
}

std::string shapes2(const Tensor& a, const Tensor& b) {
  return "lhs " + shape_str(a.shape()) + ", rhs " + shape_str(b.shape());
}

bool needs_graph(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (needs_graph(inputs)) {
    node->requires_grad = true;
    for (const Tensor* t : inputs)
      if (t->defined()) node->parents.push_back(t->node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Tensor make_result_multi(Shape shape, std::vector<double> data,
                         const std::vector<Tensor>& inputs,
                         std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  if (g_grad_enabled)
    for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Flat index maps from every output element to its source in each operand.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia, ib;
  bool same = false;
};

Broadcast broadcast(const std::string& op, const Tensor& a, const Tensor& b) {
  Broadcast bc;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    bc.out = sa;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(sa.size(), sb.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(sa.begin(), sa.end(), pa.begin() + static_cast<long>(rank - sa.size()));
  std::copy(sb.begin(), sb.end(), pb.begin() + static_cast<long>(rank - sb.size()));
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      fail(op, "shape mismatch, " + shapes2(a, b));
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<std::size_t> stra(rank), strb(rank);
  std::size_t ra = 1, rb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    stra[i] = pa[i] == 1 ? 0 : ra;
    strb[i] = pb[i] == 1 ? 0 : rb;
    ra *= pa[i];
    rb *= pb[i];
  }
  const std::size_t n = numel_of(bc.out);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offa = 0, offb = 0;
  for (std::size_t f = 0; f < n; ++f) {
    bc.ia[f] = offa;
    bc.ib[f] = offb;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offa += stra[d];
      offb += strb[d];
      if (idx[d] < bc.out[d]) break;
      offa -= stra[d] * idx[d];
      offb -= strb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const char* name, BinOp op, const Tensor& a, const Tensor& b) {
  auto bc = std::make_shared<Broadcast>(broadcast(name, a, b));
  const std::size_t n = numel_of(bc->out);
  std::vector<double> out(n);
  const auto& da = a.node().data;
  const auto& db = b.node().data;
  auto ia = [&](std::size_t f) { return bc->same ? f : bc->ia[f]; };
  auto ib = [&](std::size_t f) { return bc->same ? f : bc->ib[f]; };
  for (std::size_t f = 0; f < n; ++f) {
    const double x = da[ia(f)], y = db[ib(f)];
    switch (op) {
      case BinOp::Add: out[f] = x + y; break;
      case BinOp::Sub: out[f] = x - y; break;
      case BinOp::Mul: out[f] = x * y; break;
      case BinOp::Div: out[f] = x / y; break;
    }
  }
  NodePtr na = a.node_ptr(), nb = b.node_ptr();
  return make_result(bc->out, std::move(out), {&a, &b}, [na, nb, bc, op](Node& self) {
    const auto& g = self.grad;
    const std::size_t n = g.size();
    auto ia = [&](std::size_t f) { return bc->same ? f : bc->ia[f]; };
    auto ib = [&](std::size_t f) { return bc->same ? f : bc->ib[f]; };
    if (na->requires_grad) {
      auto& ga = na->grad_buffer();
      for (std::size_t f = 0; f < n; ++f) {
        switch (op) {
          case BinOp::Add:
          case BinOp::Sub: ga[ia(f)] += g[f]; break;
          case BinOp::Mul: ga[ia(f)] += g[f] * nb->data[ib(f)]; break;
          case BinOp::Div: ga[ia(f)] += g[f] / nb->data[ib(f)]; break;
        }
      }
    }
    if (nb->requires_grad) {
      auto& gb = nb->grad_buffer();
      for (std::size_t f = 0; f < n; ++f) {
        switch (op) {
          case BinOp::Add: gb[ib(f)] += g[f]; break;
          case BinOp::Sub: gb[ib(f)] -= g[f]; break;
          case BinOp::Mul: gb[ib(f)] += g[f] * na->data[ia(f)]; break;
          case BinOp::Div: {
            const double y = nb->data[ib(f)];
            gb[ib(f)] -= g[f] * na->data[ia(f)] / (y * y);
            break;
          }
        }
      }
    }
  });
}

// Unary op: value function and derivative expressed via (input, output).
template <typename F, typename D>
Tensor unary(const Tensor& a, F value, D deriv) {
  const auto& da = a.node().data;
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = value(da[i]);
  NodePtr na = a.node_ptr();
  return make_result(a.shape(), std::move(out), {&a}, [na, deriv](Node& self) {
    if (!na->requires_grad) return;
    auto& ga = na->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * deriv(na->data[i], self.data[i]);
  });
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const std::string& op, const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    fail(op, "invalid axis " + std::to_string(axis) + " for shape " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape r = s;
  if (keepdim) {
    r[axis] = 1;
  } else {
    r.erase(r.begin() + static_cast<long>(axis));
    if (r.empty()) r.push_back(1);
  }
  return r;
}

// Generic axis reduction: `forward` fills one output from a strided lane,
// `backward` distributes one output gradient back over the lane.
template <typename Fwd, typename Bwd>
Tensor reduce_axis(const std::string& op, const Tensor& a, std::size_t axis, bool keepdim,
                   Fwd forward, Bwd backward) {
  const AxisSplit sp = split_axis(op, a.shape(), axis);
  if (sp.n == 0) fail(op, "empty axis");
  std::vector<double> out(sp.outer * sp.inner);
  const auto& da = a.node().data;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i)
      out[o * sp.inner + i] = forward(&da[o * sp.n * sp.inner + i], sp.n, sp.inner);
  NodePtr na = a.node_ptr();
  return make_result(reduced_shape(a.shape(), axis, keepdim), std::move(out), {&a},
                     [na, sp, backward](Node& self) {
                       if (!na->requires_grad) return;
                       auto& ga = na->grad_buffer();
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t i = 0; i < sp.inner; ++i) {
                           const std::size_t base = o * sp.n * sp.inner + i;
                           const std::size_t k = o * sp.inner + i;
                           backward(&na->data[base], &ga[base], sp.n, sp.inner,
                                    self.data[k], self.grad[k]);
                         }
                     });
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(double* c, const double* a, const double* b, std::size_t m, std::size_t k,
             std::size_t n) {
  MatMap(c, idx(m), idx(n)).noalias() += ConstMatMap(a, idx(m), idx(k)) * ConstMatMap(b, idx(k), idx(n));
}

// C[m,k] += G[m,n] * B[k,n]^T
void gemm_nt(double* c, const double* g, const double* b, std::size_t m, std::size_t k,
             std::size_t n) {
  MatMap(c, idx(m), idx(k)).noalias() +=
      ConstMatMap(g, idx(m), idx(n)) * ConstMatMap(b, idx(k), idx(n)).transpose();
}

// C[k,n] += A[m,k]^T * G[m,n]
void gemm_tn(double* c, const double* a, const double* g, std::size_t m, std::size_t k,
             std::size_t n) {
  MatMap(c, idx(k), idx(n)).noalias() +=
      ConstMatMap(a, idx(m), idx(k)).transpose() * ConstMatMap(g, idx(m), idx(n));
}

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t ckk() const { return cin * k * k; }
  std::size_t hw_out() const { return ho * wo; }
};

void im2col(const ConvGeom& g, const double* x, double* cols) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * g.hw_out();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] =
                inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                           static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
}

void col2im(const ConvGeom& g, const double* cols, double* gx) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * g.hw_out();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            gx[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.wo + ox];
          }
        }
      }
}

struct Lerp {
  std::size_t i0, i1;
  double w1;
};

std::vector<Lerp> upsample_taps(std::size_t in) {
  std::vector<Lerp> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return from(shape, std::vector<double>(numel_of(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape)
    if (d == 0) throw TensorError("tensor dimensions must be positive: " + shape_str(shape));
  if (shape.empty()) throw TensorError("tensor shape must have at least one dimension");
  if (numel_of(shape) != values.size())
    throw TensorError("shape " + shape_str(shape) + " does not match " +
                      std::to_string(values.size()) + " values");
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Node& Tensor::node() const {
  if (!node_) throw TensorError("use of undefined tensor");
  return *node_;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) throw TensorError("dimension index out of range for " + shape_str(shape()));
  return shape()[i];
}

std::span<double> Tensor::mutable_data() {
  if (!node().is_leaf())
    throw TensorError("in-place modification of a graph-tracked tensor");
  return node().data;
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item() on tensor of shape " + shape_str(shape()));
  return node().data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  if (!node().is_leaf()) throw TensorError("requires_grad can only be set on leaves");
  node().requires_grad = value;
  return *this;
}

void Tensor::zero_grad() { node().grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node().data, false); }

void Tensor::backward() const {
  Node& root = node();
  if (root.data.size() != 1)
    throw TensorError("backward() needs a scalar loss, got shape " + shape_str(root.shape));
  if (!root.requires_grad)
    throw TensorError("backward() on a tensor detached from any parameter");
  if (root.consumed)
    throw TensorError("backward() called twice on the same graph without rebuilding it");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (!n->is_leaf() && n->consumed)
      throw TensorError("backward() through a graph that was already differentiated");

  root.grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order)
    if (!n->is_leaf()) n->consumed = true;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::Div, a, b); }

Tensor neg(const Tensor& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) fail("log", "non-positive input in tensor of shape " + shape_str(a.shape()));
  return unary(a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) fail("sqrt", "non-positive input in tensor of shape " + shape_str(a.shape()));
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) fail("clamp", "lo > hi");
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(a, [lo](double x) { return x < lo ? lo : x; },
               [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) fail("matmul", "expects rank-2 operands, " + shapes2(a, b));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) fail("matmul", "inner dimension mismatch, " + shapes2(a, b));
  std::vector<double> out(m * n, 0.0);
  gemm_nn(out.data(), a.node().data.data(), b.node().data.data(), m, k, n);
  NodePtr na = a.node_ptr(), nb = b.node_ptr();
  return make_result({m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](Node& self) {
    if (na->requires_grad)
      gemm_nt(na->grad_buffer().data(), self.grad.data(), nb->data.data(), m, k, n);
    if (nb->requires_grad)
      gemm_tn(nb->grad_buffer().data(), na->data.data(), self.grad.data(), m, k, n);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3) fail("bmm", "expects rank-3 operands, " + shapes2(a, b));
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k) fail("bmm", "dimension mismatch, " + shapes2(a, b));
  std::vector<double> out(bs * m * n, 0.0);
  for (std::size_t i = 0; i < bs; ++i)
    gemm_nn(&out[i * m * n], &a.node().data[i * m * k], &b.node().data[i * k * n], m, k, n);
  NodePtr na = a.node_ptr(), nb = b.node_ptr();
  return make_result({bs, m, n}, std::move(out), {&a, &b}, [na, nb, bs, m, k, n](Node& self) {
    for (std::size_t i = 0; i < bs; ++i) {
      if (na->requires_grad)
        gemm_nt(&na->grad_buffer()[i * m * k], &self.grad[i * m * n], &nb->data[i * k * n], m,
                k, n);
      if (nb->requires_grad)
        gemm_tn(&nb->grad_buffer()[i * k * n], &na->data[i * m * k], &self.grad[i * m * n], m,
                k, n);
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3) fail("transpose", "expects rank 2 or 3, got " + shape_str(a.shape()));
  const bool batched = a.rank() == 3;
  const std::size_t bs = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(batched ? 1 : 0), n = a.dim(batched ? 2 : 1);
  std::vector<double> out(a.numel());
  const auto& da = a.node().data;
  for (std::size_t b = 0; b < bs; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = da[b * m * n + i * n + j];
  Shape shape = batched ? Shape{bs, n, m} : Shape{n, m};
  NodePtr na = a.node_ptr();
  return make_result(shape, std::move(out), {&a}, [na, bs, m, n](Node& self) {
    if (!na->requires_grad) return;
    auto& ga = na->grad_buffer();
    for (std::size_t b = 0; b < bs; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
  });
}

Tensor sum(const Tensor& a) { return sum(reshape(a, {a.numel()}), 0, false); }

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis(
      "sum", a, axis, keepdim,
      [](const double* x, std::size_t n, std::size_t stride) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x[j * stride];
        return s;
      },
      [](const double*, double* gx, std::size_t n, std::size_t stride, double, double g) {
        for (std::size_t j = 0; j < n; ++j) gx[j * stride] += g;
      });
}

Tensor mean(const Tensor& a) { return mean(reshape(a, {a.numel()}), 0, false); }

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis(
      "mean", a, axis, keepdim,
      [](const double* x, std::size_t n, std::size_t stride) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x[j * stride];
        return s / static_cast<double>(n);
      },
      [](const double*, double* gx, std::size_t n, std::size_t stride, double, double g) {
        const double share = g / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) gx[j * stride] += share;
      });
}

Tensor l2_norm(const Tensor& a) { return l2_norm(reshape(a, {a.numel()}), 0, false); }

Tensor l2_norm(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis(
      "l2_norm", a, axis, keepdim,
      [](const double* x, std::size_t n, std::size_t stride) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x[j * stride] * x[j * stride];
        return std::sqrt(s);
      },
      [](const double* x, double* gx, std::size_t n, std::size_t stride, double y, double g) {
        if (y == 0.0) return;
        for (std::size_t j = 0; j < n; ++j) gx[j * stride] += g * x[j * stride] / y;
      });
}

Tensor logsumexp(const Tensor& a) { return logsumexp(reshape(a, {a.numel()}), 0, false); }

Tensor logsumexp(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis(
      "logsumexp", a, axis, keepdim,
      [](const double* x, std::size_t n, std::size_t stride) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) m = std::max(m, x[j * stride]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j * stride] - m);
        return m + std::log(s);
      },
      [](const double* x, double* gx, std::size_t n, std::size_t stride, double y, double g) {
        for (std::size_t j = 0; j < n; ++j) gx[j * stride] += g * std::exp(x[j * stride] - y);
      });
}

Tensor max(const Tensor& a) { return max(reshape(a, {a.numel()}), 0, false); }

Tensor max(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis(
      "max", a, axis, keepdim,
      [](const double* x, std::size_t n, std::size_t stride) {
        double m = x[0];
        for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[j * stride]);
        return m;
      },
      [](const double* x, double* gx, std::size_t n, std::size_t stride, double y, double g) {
        for (std::size_t j = 0; j < n; ++j)
          if (x[j * stride] == y) {
            gx[j * stride] += g;
            return;
          }
      });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  return exp(sub(a, logsumexp(a, axis, true)));
}

Tensor normalize(const Tensor& a, std::size_t axis, double eps) {
  return div(a, clamp_min(l2_norm(a, axis, true), eps));
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel_of(shape) != a.numel())
    fail("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  NodePtr na = a.node_ptr();
  return make_result(shape, a.node().data, {&a}, [na](Node& self) {
    if (!na->requires_grad) return;
    auto& ga = na->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) fail("concat", "invalid axis for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) fail("concat", "rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        fail("concat", "shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    out_shape[axis] += s[axis];
  }
  const AxisSplit sp = split_axis("concat", out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[axis];
    const auto& dp = p.node().data;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(&dp[o * len * sp.inner], len * sp.inner,
                  &out[(o * sp.n + off) * sp.inner]);
    off += len;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_result_multi(out_shape, std::move(out), parts,
                           [nodes, offsets, sp, axis](Node& self) {
                             for (std::size_t q = 0; q < nodes.size(); ++q) {
                               Node& p = *nodes[q];
                               if (!p.requires_grad) continue;
                               auto& gp = p.grad_buffer();
                               const std::size_t len = p.shape[axis];
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t j = 0; j < len * sp.inner; ++j)
                                   gp[o * len * sp.inner + j] +=
                                       self.grad[(o * sp.n + offsets[q]) * sp.inner + j];
                             }
                           });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit sp = split_axis("slice", a.shape(), axis);
  if (length == 0 || start + length > sp.n)
    fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                      ") out of bounds for " + shape_str(a.shape()));
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> out(numel_of(shape));
  const auto& da = a.node().data;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(&da[(o * sp.n + start) * sp.inner], length * sp.inner,
                &out[o * length * sp.inner]);
  NodePtr na = a.node_ptr();
  return make_result(shape, std::move(out), {&a}, [na, sp, start, length](Node& self) {
    if (!na->requires_grad) return;
    auto& ga = na->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < length * sp.inner; ++j)
        ga[(o * sp.n + start) * sp.inner + j] += self.grad[o * length * sp.inner + j];
  });
}

Tensor index_select(const Tensor& a, std::span<const std::size_t> indices) {
  if (indices.empty()) fail("index_select", "no indices");
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.numel() / rows;
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * width);
  const auto& da = a.node().data;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows)
      fail("index_select", "index " + std::to_string(idx[r]) + " out of range for " +
                               shape_str(a.shape()));
    std::copy_n(&da[idx[r] * width], width, &out[r * width]);
  }
  Shape shape = a.shape();
  shape[0] = idx.size();
  NodePtr na = a.node_ptr();
  return make_result(shape, std::move(out), {&a}, [na, idx, width](Node& self) {
    if (!na->requires_grad) return;
    auto& ga = na->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) ga[idx[r] * width + j] += self.grad[r * width + j];
  });
}

Tensor diagonal(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    fail("diagonal", "expects a square matrix, got " + shape_str(a.shape()));
  const std::size_t n = a.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.node().data[i * n + i];
  NodePtr na = a.node_ptr();
  return make_result({n}, std::move(out), {&a}, [na, n](Node& self) {
    if (!na->requires_grad) return;
    auto& ga = na->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) ga[i * n + i] += self.grad[i];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4)
    fail("conv2d", "expects x [B,C,H,W] and weight [O,C,k,k], " + shapes2(x, weight));
  ConvGeom g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.cin || weight.dim(3) != g.k)
    fail("conv2d", "channel/kernel mismatch, " + shapes2(x, weight));
  if (stride == 0) fail("conv2d", "stride must be positive");
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k)
    fail("conv2d", "kernel larger than padded input " + shape_str(x.shape()));
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout))
    fail("conv2d", "bias shape " + shape_str(bias.shape()));

  std::vector<double> out(g.batch * g.cout * g.hw_out(), 0.0);
  std::vector<double> cols(g.ckk() * g.hw_out());
  const auto& dx = x.node().data;
  const auto& dw = weight.node().data;
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, &dx[b * g.cin * g.h * g.w], cols.data());
    double* ob = &out[b * g.cout * g.hw_out()];
    gemm_nn(ob, dw.data(), cols.data(), g.cout, g.ckk(), g.hw_out());
    if (bias.defined())
      for (std::size_t o = 0; o < g.cout; ++o)
        for (std::size_t p = 0; p < g.hw_out(); ++p) ob[o * g.hw_out() + p] += bias[o];
  }
  NodePtr nx = x.node_ptr(), nw = weight.node_ptr();
  NodePtr nb = bias.defined() ? bias.node_ptr() : nullptr;
  Tensor none;
  return make_result({g.batch, g.cout, g.ho, g.wo}, std::move(out),
                     {&x, &weight, bias.defined() ? &bias : &none}, [nx, nw, nb, g](Node& self) {
                       std::vector<double> cols(g.ckk() * g.hw_out());
                       std::vector<double> gcols(g.ckk() * g.hw_out());
                       for (std::size_t b = 0; b < g.batch; ++b) {
                         const double* gout = &self.grad[b * g.cout * g.hw_out()];
                         if (nw->requires_grad) {
                           im2col(g, &nx->data[b * g.cin * g.h * g.w], cols.data());
                           gemm_nt(nw->grad_buffer().data(), gout, cols.data(), g.cout, g.ckk(),
                                   g.hw_out());
                         }
                         if (nx->requires_grad) {
                           std::fill(gcols.begin(), gcols.end(), 0.0);
                           gemm_tn(gcols.data(), nw->data.data(), gout, g.cout, g.ckk(),
                                   g.hw_out());
                           col2im(g, gcols.data(), &nx->grad_buffer()[b * g.cin * g.h * g.w]);
                         }
                         if (nb && nb->requires_grad) {
                           auto& gb = nb->grad_buffer();
                           for (std::size_t o = 0; o < g.cout; ++o)
                             for (std::size_t p = 0; p < g.hw_out(); ++p)
                               gb[o] += gout[o * g.hw_out() + p];
                         }
                       }
                     });
}

Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 4) fail("upsample2x", "expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ty = upsample_taps(h);
  auto tx = upsample_taps(w);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<double> out(planes * ho * wo);
  const auto& dx = x.node().data;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = &dx[p * h * w];
    double* dst = &out[p * ho * wo];
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const Lerp& ly = ty[oy];
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Lerp& lx = tx[ox];
        const double top = src[ly.i0 * w + lx.i0] * (1 - lx.w1) + src[ly.i0 * w + lx.i1] * lx.w1;
        const double bot = src[ly.i1 * w + lx.i0] * (1 - lx.w1) + src[ly.i1 * w + lx.i1] * lx.w1;
        dst[oy * wo + ox] = top * (1 - ly.w1) + bot * ly.w1;
      }
    }
  }
  NodePtr nx = x.node_ptr();
  return make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), {&x},
                     [nx, ty, tx, planes, h, w, ho, wo](Node& self) {
                       if (!nx->requires_grad) return;
                       auto& gx = nx->grad_buffer();
                       for (std::size_t p = 0; p < planes; ++p) {
                         double* dst = &gx[p * h * w];
                         const double* g = &self.grad[p * ho * wo];
                         for (std::size_t oy = 0; oy < ho; ++oy) {
                           const Lerp& ly = ty[oy];
                           for (std::size_t ox = 0; ox < wo; ++ox) {
                             const Lerp& lx = tx[ox];
                             const double v = g[oy * wo + ox];
                             dst[ly.i0 * w + lx.i0] += v * (1 - ly.w1) * (1 - lx.w1);
                             dst[ly.i0 * w + lx.i1] += v * (1 - ly.w1) * lx.w1;
                             dst[ly.i1 * w + lx.i0] += v * ly.w1 * (1 - lx.w1);
                             dst[ly.i1 * w + lx.i1] += v * ly.w1 * lx.w1;
                           }
                         }
                       }
                     });
}

Tensor avg_pool2x(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    fail("avg_pool2x", "expects [B,C,H,W] with even H, W, got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<double> out(planes * ho * wo);
  const auto& dx = x.node().data;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        const double* s = &dx[p * h * w + 2 * y * w + 2 * xx];
        out[(p * ho + y) * wo + xx] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
      }
  NodePtr nx = x.node_ptr();
  return make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), {&x},
                     [nx, planes, h, w, ho, wo](Node& self) {
                       if (!nx->requires_grad) return;
                       auto& gx = nx->grad_buffer();
                       for (std::size_t p = 0; p < planes; ++p)
                         for (std::size_t y = 0; y < ho; ++y)
                           for (std::size_t xx = 0; xx < wo; ++xx) {
                             const double g = 0.25 * self.grad[(p * ho + y) * wo + xx];
                             double* d = &gx[p * h * w + 2 * y * w + 2 * xx];
                             d[0] += g;
                             d[1] += g;
                             d[w] += g;
                             d[w + 1] += g;
                           }
                     });
}

Tensor bce(const Tensor& p, const Tensor& target, double eps) {
  if (p.shape() != target.shape())
    fail("bce", "shape mismatch, " + shapes2(p, target));
  const Tensor pc = clamp(p, eps, 1.0 - eps);
  const Tensor ll = add(mul(target, log(pc)), mul(1.0 - target, log(1.0 - pc)));
  return neg(mean(ll));
}

}  // namespace dusss
