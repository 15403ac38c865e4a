#include "advrank/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace advrank {

namespace detail {

constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<float>> storage;
  std::vector<float> grad;  // empty means "no grad yet"
  bool requires_grad = false;
  std::weak_ptr<TapeState> tape;
  std::size_t node = kNoNode;
};

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  std::function<void(const Node&)> backward;
};

struct TapeState {
  std::vector<Node> nodes;
};

namespace {
thread_local std::vector<std::shared_ptr<TapeState>> tape_stack;

std::vector<float>& grad_slot(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.storage->size(), 0.0f);
  return t.grad;
}
}  // namespace

}  // namespace detail

using detail::Node;
using detail::TensorImpl;

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b)) {}

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<float> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                     " values but " + std::to_string(data.size()) + " were given");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<std::vector<float>>(std::move(data));
  impl->requires_grad = requires_grad;
  return impl;
}

const TensorImpl& checked(const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("operation on an undefined tensor");
  return *t.impl();
}

}  // namespace

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(make_impl(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = advrank::numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = advrank::numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return checked(*this).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("size: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(*this).storage->size(); }

std::span<const float> Tensor::data() const { return *checked(*this).storage; }

std::span<float> Tensor::mutable_data() {
  checked(*this);
  return *impl_->storage;
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return data()[0];
}

bool Tensor::requires_grad() const { return checked(*this).requires_grad; }
bool Tensor::has_grad() const { return !checked(*this).grad.empty(); }
std::span<const float> Tensor::grad() const { return checked(*this).grad; }

void Tensor::zero_grad() {
  checked(*this);
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
  const auto& src = checked(*this);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = src.shape;
  impl->storage = src.storage;
  return Tensor(std::move(impl));
}

Tensor Tensor::grad_view() const {
  Tensor t = detach();
  t.impl_->requires_grad = true;
  return t;
}

Tensor Tensor::clone() const {
  const auto& src = checked(*this);
  return Tensor(src.shape, *src.storage, false);
}

bool Tensor::on_tape() const { return defined() && impl_->node != detail::kNoNode && !impl_->tape.expired(); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : state_(std::make_shared<detail::TapeState>()) { detail::tape_stack.push_back(state_); }

Tape::~Tape() {
  auto& stack = detail::tape_stack;
  auto it = std::find(stack.rbegin(), stack.rend(), state_);
  if (it != stack.rend()) stack.erase(std::next(it).base());
}

bool Tape::active() { return !detail::tape_stack.empty(); }

std::size_t Tape::size() const { return state_->nodes.size(); }

namespace {

void run_backward(detail::TapeState& state, const TensorImpl& loss) {
  if (loss.storage->size() != 1) {
    throw AutogradError("backward: loss must be a scalar, got shape " + to_string(loss.shape));
  }
  const std::size_t last = loss.node;
  for (std::size_t i = 0; i <= last; ++i) {
    auto& out = *state.nodes[i].output;
    out.grad.assign(out.storage->size(), 0.0f);
  }
  state.nodes[last].output->grad[0] = 1.0f;
  for (std::size_t i = last + 1; i-- > 0;) {
    const Node& node = state.nodes[i];
    node.backward(node);
  }
}

}  // namespace

void Tape::backward(const Tensor& loss) {
  const auto& impl = checked(loss);
  if (impl.node == detail::kNoNode || impl.tape.lock() != state_) {
    throw AutogradError("backward: loss is not recorded on this tape");
  }
  run_backward(*state_, impl);
}

void backward(const Tensor& loss) {
  const auto& impl = checked(loss);
  if (impl.node == detail::kNoNode) throw AutogradError("backward: loss is not recorded on any tape");
  auto state = impl.tape.lock();
  if (!state) throw AutogradError("backward: the tape that recorded this loss has been destroyed");
  run_backward(*state, impl);
}

// ---------------------------------------------------------------------------
// Recording helpers

namespace {

using BackwardFn = std::function<void(const Node&)>;

Tensor record(Shape shape, std::vector<float> data, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  bool needs = false;
  for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  if (!needs || detail::tape_stack.empty()) return out;

  auto& state = detail::tape_stack.back();
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.tape = state;
  impl.node = state->nodes.size();
  Node node;
  for (const Tensor* in : inputs) node.inputs.push_back(in->impl());
  node.output = out.impl();
  node.backward = std::move(fn);
  state->nodes.push_back(std::move(node));
  return out;
}

// Accumulates into input k's grad only when that input tracks gradients.
std::vector<float>* grad_of(const Node& node, std::size_t k) {
  auto& in = *node.inputs[k];
  return in.requires_grad ? &detail::grad_slot(in) : nullptr;
}

// Flat index into `in_shape` for every element of `out_shape` under broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& in_shape, const Shape& out_shape) {
  const std::size_t nd = out_shape.size();
  std::vector<std::size_t> in_stride(nd, 0);
  {
    std::size_t stride = 1;
    for (std::size_t k = 0; k < in_shape.size(); ++k) {
      const std::size_t axis_in = in_shape.size() - 1 - k;
      const std::size_t axis_out = nd - 1 - k;
      in_stride[axis_out] = in_shape[axis_in] == 1 ? 0 : stride;
      stride *= in_shape[axis_in];
    }
  }
  const std::size_t n = numel(out_shape);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(nd, 0);
  std::size_t flat_in = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = flat_in;
    for (std::size_t axis = nd; axis-- > 0;) {
      if (++counter[axis] < out_shape[axis]) {
        flat_in += in_stride[axis];
        break;
      }
      flat_in -= in_stride[axis] * (out_shape[axis] - 1);
      counter[axis] = 0;
    }
  }
  return idx;
}

struct BinaryPlan {
  Shape out_shape;
  std::vector<std::size_t> ia;  // empty means identity
  std::vector<std::size_t> ib;
};

BinaryPlan plan_binary(const Tensor& a, const Tensor& b, const char* op) {
  BinaryPlan plan;
  plan.out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  if (a.shape() != plan.out_shape) plan.ia = broadcast_index(a.shape(), plan.out_shape);
  if (b.shape() != plan.out_shape) plan.ib = broadcast_index(b.shape(), plan.out_shape);
  return plan;
}

// f(x, y) -> value; dfdx / dfdy take (x, y, out) and return the local partials.
template <class F, class DX, class DY>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, F f, DX dfdx, DY dfdy) {
  auto plan = std::make_shared<BinaryPlan>(plan_binary(a, b, op));
  const std::size_t n = numel(plan->out_shape);
  std::vector<float> out(n);
  const auto xa = a.data();
  const auto xb = b.data();
  const bool ida = plan->ia.empty();
  const bool idb = plan->ib.empty();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(xa[ida ? i : plan->ia[i]], xb[idb ? i : plan->ib[i]]);
  }
  return record(plan->out_shape, std::move(out), {&a, &b}, [plan, dfdx, dfdy](const Node& node) {
    const auto& g = node.output->grad;
    const auto& y = *node.output->storage;
    const auto& va = *node.inputs[0]->storage;
    const auto& vb = *node.inputs[1]->storage;
    auto* ga = grad_of(node, 0);
    auto* gb = grad_of(node, 1);
    const bool ida = plan->ia.empty();
    const bool idb = plan->ib.empty();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ka = ida ? i : plan->ia[i];
      const std::size_t kb = idb ? i : plan->ib[i];
      if (ga) (*ga)[ka] += g[i] * dfdx(va[ka], vb[kb], y[i]);
      if (gb) (*gb)[kb] += g[i] * dfdy(va[ka], vb[kb], y[i]);
    }
  });
}

template <class F, class D>
Tensor unary_op(const Tensor& a, F f, D dfdx) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return record(a.shape(), std::move(out), {&a}, [dfdx](const Node& node) {
    auto* ga = grad_of(node, 0);
    if (!ga) return;
    const auto& g = node.output->grad;
    const auto& x = *node.inputs[0]->storage;
    const auto& y = *node.output->storage;
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dfdx(x[i], y[i]);
  });
}

void require_dim(const Tensor& t, std::size_t d, const char* op) {
  if (t.dim() != d) {
    throw ShapeError(std::string(op) + ": expected a " + std::to_string(d) + "-d tensor, got shape " +
                     to_string(t.shape()));
  }
}

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t k = 0; k < nd; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) throw ShapeError(op, a, b);
    out[nd - 1 - k] = std::max(da, db);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](float x, float y) { return x + y; }, [](float, float, float) { return 1.0f; },
      [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](float x, float y) { return x - y; }, [](float, float, float) { return 1.0f; },
      [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](float x, float y) { return x * y; }, [](float, float y, float) { return y; },
      [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](float x, float y) { return x / y; }, [](float, float y, float) { return 1.0f / y; },
      [](float, float y, float out) { return -out / y; });
}

Tensor scale(const Tensor& a, float s) {
  return unary_op(a, [s](float x) { return s * x; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary_op(a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

// NaN passes through so a diverged value is not masked as an inactive unit.
Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](float x) { return x > 0.0f || std::isnan(x) ? x : 0.0f; }, [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(
      a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_dim(a, 2, "matmul");
  require_dim(b, 2, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
  std::vector<float> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return record({m, n}, std::move(out), {&a, &b}, [m, k, n](const Node& node) {
    const ConstMap g(node.output->grad.data(), m, n);
    if (auto* ga = grad_of(node, 0)) {
      MutMap(ga->data(), m, k).noalias() += g * ConstMap(node.inputs[1]->storage->data(), k, n).transpose();
    }
    if (auto* gb = grad_of(node, 1)) {
      MutMap(gb->data(), k, n).noalias() += ConstMap(node.inputs[0]->storage->data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_dim(a, 2, "transpose");
  const std::size_t m = a.size(0), n = a.size(1);
  std::vector<float> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.data().data(), m, n).transpose();
  return record({n, m}, std::move(out), {&a}, [m, n](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      MutMap(ga->data(), m, n) += ConstMap(node.output->grad.data(), n, m).transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return record({}, {static_cast<float>(acc)}, {&a}, [](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      const float g = node.output->grad[0];
      for (auto& v : *ga) v += g;
    }
  });
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return record({}, {static_cast<float>(acc / static_cast<double>(n))}, {&a}, [n](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      const float g = node.output->grad[0] / static_cast<float>(n);
      for (auto& v : *ga) v += g;
    }
  });
}

Tensor sum_last(const Tensor& a) {
  if (a.dim() == 0) throw ShapeError("sum_last: scalar input");
  const std::size_t n = a.shape().back();
  const std::size_t rows = n == 0 ? 0 : a.numel() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  const auto x = a.data();
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += x[r * n + j];
    out[r] = static_cast<float>(acc);
  }
  return record(std::move(out_shape), std::move(out), {&a}, [rows, n](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      const auto& g = node.output->grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += g[r];
    }
  });
}

Tensor l2_norm_rows(const Tensor& a) {
  require_dim(a, 2, "l2_norm_rows");
  const std::size_t m = a.size(0), n = a.size(1);
  const auto x = a.data();
  std::vector<float> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(x[r * n + j]) * x[r * n + j];
    out[r] = static_cast<float>(std::sqrt(acc));
  }
  return record({m}, std::move(out), {&a}, [m, n](const Node& node) {
    auto* ga = grad_of(node, 0);
    if (!ga) return;
    const auto& g = node.output->grad;
    const auto& norm = *node.output->storage;
    const auto& x = *node.inputs[0]->storage;
    const float uniform = n ? 1.0f / std::sqrt(static_cast<float>(n)) : 0.0f;
    for (std::size_t r = 0; r < m; ++r) {
      if (norm[r] > 0.0f) {
        const float s = g[r] / norm[r];
        for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += s * x[r * n + j];
      } else {
        for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += g[r] * uniform;
      }
    }
  });
}

Tensor dot_rows(const Tensor& a, const Tensor& b) {
  require_dim(a, 2, "dot_rows");
  if (a.shape() != b.shape()) throw ShapeError("dot_rows", a.shape(), b.shape());
  const std::size_t m = a.size(0), n = a.size(1);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<float> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(x[r * n + j]) * y[r * n + j];
    out[r] = static_cast<float>(acc);
  }
  return record({m}, std::move(out), {&a, &b}, [m, n](const Node& node) {
    const auto& g = node.output->grad;
    const auto& x = *node.inputs[0]->storage;
    const auto& y = *node.inputs[1]->storage;
    auto* ga = grad_of(node, 0);
    auto* gb = grad_of(node, 1);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < n; ++j) {
        if (ga) (*ga)[r * n + j] += g[r] * y[r * n + j];
        if (gb) (*gb)[r * n + j] += g[r] * x[r * n + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shapes(a.shape(), shape, "broadcast_to") != shape) throw ShapeError("broadcast_to", a.shape(), shape);
  if (a.shape() == shape) return reshape(a, shape);
  auto idx = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), shape));
  const auto x = a.data();
  std::vector<float> out(idx->size());
  for (std::size_t i = 0; i < idx->size(); ++i) out[i] = x[(*idx)[i]];
  return record(shape, std::move(out), {&a}, [idx](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      const auto& g = node.output->grad;
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[(*idx)[i]] += g[i];
    }
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  const auto x = a.data();
  return record(shape, std::vector<float>(x.begin(), x.end()), {&a}, [](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      const auto& g = node.output->grad;
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.dim() == 0) throw ShapeError("slice_rows: scalar input");
  if (begin > end || end > a.size(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + to_string(a.shape()));
  }
  const std::size_t stride = a.numel() / std::max<std::size_t>(a.size(0), 1);
  Shape shape = a.shape();
  shape[0] = end - begin;
  const auto x = a.data();
  std::vector<float> out(x.begin() + begin * stride, x.begin() + end * stride);
  return record(std::move(shape), std::move(out), {&a}, [begin, stride](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      const auto& g = node.output->grad;
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * stride + i] += g[i];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.dim() == 0) throw ShapeError("gather_rows: scalar input");
  const std::size_t n_rows = a.size(0);
  const std::size_t stride = n_rows ? a.numel() / n_rows : 0;
  Shape shape = a.shape();
  shape[0] = rows.size();
  const auto x = a.data();
  std::vector<float> out(rows.size() * stride);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_rows) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of bounds for " + to_string(a.shape()));
    }
    std::copy_n(x.begin() + rows[r] * stride, stride, out.begin() + r * stride);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return record(std::move(shape), std::move(out), {&a}, [idx, stride](const Node& node) {
    if (auto* ga = grad_of(node, 0)) {
      const auto& g = node.output->grad;
      for (std::size_t r = 0; r < idx->size(); ++r)
        for (std::size_t j = 0; j < stride; ++j) (*ga)[(*idx)[r] * stride + j] += g[r * stride + j];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<float> out;
  for (const auto& p : parts) {
    if (p.dim() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    }
    rows += p.size(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;

  // Variadic recording: inputs list is built by hand since the count varies.
  Tensor result(shape, std::move(out));
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (!needs || detail::tape_stack.empty()) return result;
  auto& state = detail::tape_stack.back();
  auto& impl = *result.impl();
  impl.requires_grad = true;
  impl.tape = state;
  impl.node = state->nodes.size();
  Node node;
  for (const auto& p : parts) node.inputs.push_back(p.impl());
  node.output = result.impl();
  node.backward = [](const Node& n) {
    std::size_t offset = 0;
    const auto& g = n.output->grad;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t len = n.inputs[k]->storage->size();
      if (auto* gk = grad_of(n, k)) {
        for (std::size_t i = 0; i < len; ++i) (*gk)[i] += g[offset + i];
      }
      offset += len;
    }
  };
  state->nodes.push_back(std::move(node));
  return result;
}

Tensor concat_rows(std::initializer_list<Tensor> parts) {
  return concat_rows(std::span<const Tensor>(parts.begin(), parts.size()));
}

}  // namespace advrank
