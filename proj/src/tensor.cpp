#include "lvf/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace lvf {

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

using MatRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

thread_local Tape* g_active_tape = nullptr;
thread_local int g_nograd_depth = 0;

void validate_shape(const Shape& s) {
  for (int64_t d : s)
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
}

std::vector<double>& ensure_grad(detail::TensorNode* n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
  return n->grad;
}

bool tracking(std::initializer_list<const Tensor*> ins) {
  if (g_nograd_depth > 0 || g_active_tape == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

std::shared_ptr<detail::TensorNode> make_node(Shape shape,
                                              std::vector<double> data) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  int64_t n = shape_size(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, 0.0));
  node->requires_grad = requires_grad;
  return wrap(node);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  int64_t n = shape_size(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return wrap(node);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  validate_shape(shape);
  if (shape_size(shape) != static_cast<int64_t>(data.size()))
    throw ShapeError("from_data: " + std::to_string(data.size()) +
                     " values do not fill shape " + shape_str(shape));
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return wrap(node);
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("dim " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  return s[axis];
}

int64_t Tensor::size() const { return shape_size(shape()); }

std::vector<double>& Tensor::data() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->data;
}

const std::vector<double>& Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->data;
}

double Tensor::value() const {
  if (size() != 1)
    throw ContractError("value() needs a single-element tensor, got " +
                        shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size())
    throw ShapeError("index rank " + std::to_string(idx.size()) +
                     " does not match " + shape_str(s));
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    if (v < 0 || v >= s[i])
      throw ShapeError("index " + std::to_string(v) + " out of range for " +
                       shape_str(s));
    flat = flat * s[i] + v;
    ++i;
  }
  return data()[flat];
}

void Tensor::set(std::initializer_list<int64_t> idx, double v) {
  const Shape& s = shape();
  if (idx.size() != s.size())
    throw ShapeError("index rank " + std::to_string(idx.size()) +
                     " does not match " + shape_str(s));
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t d : idx) {
    if (d < 0 || d >= s[i])
      throw ShapeError("index " + std::to_string(d) + " out of range for " +
                       shape_str(s));
    flat = flat * s[i] + d;
    ++i;
  }
  data()[flat] = v;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->requires_grad = rg;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  return ensure_grad(node_.get());
}

void Tensor::zero_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->grad.assign(node_->data.size(), 0.0);
}

void Tensor::clear_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->grad.clear();
}

Tensor Tensor::clone() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return from_data(node_->shape, node_->data);
}

int64_t Tensor::tape_pos() const { return node_ ? node_->tape_pos : -1; }

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::TensorNode> out,
                  std::vector<std::shared_ptr<detail::TensorNode>> parents,
                  std::function<void()> back) {
  out->requires_grad = true;
  out->tape_pos = static_cast<int64_t>(entries_.size());
  entries_.push_back({std::move(out), std::move(parents), std::move(back)});
}

void Tape::backward(const Tensor& loss) {
  if (entries_.empty())
    throw ContractError("backward on an empty tape");
  if (loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got " +
                        shape_str(loss.shape()));
  auto node = loss.node();
  int64_t pos = node ? node->tape_pos : -1;
  if (pos < 0 || pos >= static_cast<int64_t>(entries_.size()) ||
      entries_[pos].out != node)
    throw ContractError("loss was not recorded on this tape");
  ensure_grad(node.get())[0] += 1.0;
  for (int64_t k = pos; k >= 0; --k) entries_[k].back();
  // Intermediate grads are scratch for the sweep; dropping them here keeps
  // repeated backward calls additive on the leaves only.
  for (int64_t k = pos; k >= 0; --k) entries_[k].out->grad.clear();
}

std::vector<Tape::EntryInfo> Tape::structure() const {
  std::vector<EntryInfo> out;
  out.reserve(entries_.size());
  for (size_t i = 0; i < entries_.size(); ++i) {
    EntryInfo e;
    e.out_pos = static_cast<int64_t>(i);
    for (const auto& p : entries_[i].parents) {
      int64_t pos = p->tape_pos;
      if (pos < 0 || pos >= static_cast<int64_t>(entries_.size()) ||
          entries_[pos].out != p)
        pos = -1;
      e.parent_pos.push_back(pos);
    }
    out.push_back(std::move(e));
  }
  return out;
}

NoGrad::NoGrad() { ++g_nograd_depth; }
NoGrad::~NoGrad() { --g_nograd_depth; }

bool grad_enabled() { return g_nograd_depth == 0; }

// ---- elementwise -----------------------------------------------------------

namespace {

bool is_suffix_of(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

const char* ew_name(EwKind k) {
  switch (k) {
    case EwKind::Add: return "add";
    case EwKind::Sub: return "sub";
    case EwKind::Mul: return "mul";
    case EwKind::Div: return "divide";
    case EwKind::Neg: return "neg";
    case EwKind::Exp: return "exp";
    case EwKind::Ln: return "ln";
    case EwKind::PowScalar: return "pow";
    case EwKind::Silu: return "silu";
  }
  return "?";
}

bool ew_binary(EwKind k) {
  return k == EwKind::Add || k == EwKind::Sub || k == EwKind::Mul ||
         k == EwKind::Div;
}

}  // namespace

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b, double p) {
  if (ew_binary(kind) != (b != nullptr))
    throw ParamError(std::string(ew_name(kind)) +
                     (b ? " takes one operand" : " needs two operands"));

  // Domain checks happen before any allocation so failures leave no output.
  const std::vector<double>& ad = a.data();
  switch (kind) {
    case EwKind::Exp:
      for (double v : ad)
        if (v > 700.0)
          throw NumericError("exp overflow on input " + fmt_double(v));
      break;
    case EwKind::Ln:
      for (double v : ad)
        if (v <= 0.0)
          throw NumericError("ln of non-positive input " + fmt_double(v));
      break;
    case EwKind::PowScalar:
      for (double v : ad) {
        if (v < 0.0 && p != std::floor(p))
          throw NumericError("pow of negative base " + fmt_double(v) +
                             " with non-integer exponent " + fmt_double(p));
        if (v == 0.0 && p < 0.0)
          throw NumericError("pow of zero base with negative exponent");
      }
      break;
    case EwKind::Div:
      for (double v : b->data())
        if (v == 0.0) throw NumericError("division by zero");
      break;
    default:
      break;
  }

  Shape out_shape;
  int64_t amod = a.size();
  int64_t bmod = b ? b->size() : 1;
  if (b) {
    if (is_suffix_of(b->shape(), a.shape())) {
      out_shape = a.shape();
    } else if (is_suffix_of(a.shape(), b->shape())) {
      out_shape = b->shape();
    } else {
      throw ShapeError(std::string(ew_name(kind)) + ": shapes " +
                       shape_str(a.shape()) + " and " + shape_str(b->shape()) +
                       " do not broadcast");
    }
  } else {
    out_shape = a.shape();
  }
  // i % amod walks the suffix operand cyclically; for the full-size operand
  // the modulus is a no-op.
  if (amod == 0 || (b && bmod == 0)) {
    amod = std::max<int64_t>(amod, 1);
    bmod = std::max<int64_t>(bmod, 1);
  }

  int64_t n = shape_size(out_shape);
  std::vector<double> out(n);
  const double* bd = b ? b->data().data() : nullptr;
  for (int64_t i = 0; i < n; ++i) {
    double x = ad[i % amod];
    double y = bd ? bd[i % bmod] : 0.0;
    double r = 0.0;
    switch (kind) {
      case EwKind::Add: r = x + y; break;
      case EwKind::Sub: r = x - y; break;
      case EwKind::Mul: r = x * y; break;
      case EwKind::Div: r = x / y; break;
      case EwKind::Neg: r = -x; break;
      case EwKind::Exp: r = std::exp(x); break;
      case EwKind::Ln: r = std::log(x); break;
      case EwKind::PowScalar: r = std::pow(x, p); break;
      case EwKind::Silu: r = x / (1.0 + std::exp(-x)); break;
    }
    out[i] = r;
  }
  auto on = make_node(std::move(out_shape), std::move(out));

  bool track = b ? tracking({&a, b}) : tracking({&a});
  if (track) {
    auto an = a.node();
    auto bn = b ? b->node() : nullptr;
    std::vector<std::shared_ptr<detail::TensorNode>> parents{an};
    if (bn) parents.push_back(bn);
    g_active_tape->record(
        on, std::move(parents), [kind, an, bn, on, amod, bmod, p, n] {
          if (on->grad.empty()) return;
          const std::vector<double>& go = on->grad;
          double* ga = (an->requires_grad) ? ensure_grad(an.get()).data()
                                           : nullptr;
          double* gb = (bn && bn->requires_grad) ? ensure_grad(bn.get()).data()
                                                 : nullptr;
          const double* av = an->data.data();
          const double* bv = bn ? bn->data.data() : nullptr;
          const double* ov = on->data.data();
          for (int64_t i = 0; i < n; ++i) {
            double g = go[i];
            int64_t ia = i % amod;
            switch (kind) {
              case EwKind::Add:
                if (ga) ga[ia] += g;
                if (gb) gb[i % bmod] += g;
                break;
              case EwKind::Sub:
                if (ga) ga[ia] += g;
                if (gb) gb[i % bmod] -= g;
                break;
              case EwKind::Mul:
                if (ga) ga[ia] += g * bv[i % bmod];
                if (gb) gb[i % bmod] += g * av[ia];
                break;
              case EwKind::Div: {
                double bb = bv[i % bmod];
                if (ga) ga[ia] += g / bb;
                if (gb) gb[i % bmod] -= g * av[ia] / (bb * bb);
                break;
              }
              case EwKind::Neg:
                if (ga) ga[ia] -= g;
                break;
              case EwKind::Exp:
                if (ga) ga[ia] += g * ov[i];
                break;
              case EwKind::Ln:
                if (ga) ga[ia] += g / av[ia];
                break;
              case EwKind::PowScalar:
                if (ga) ga[ia] += g * p * std::pow(av[ia], p - 1.0);
                break;
              case EwKind::Silu: {
                double x = av[ia];
                double s = 1.0 / (1.0 + std::exp(-x));
                if (ga) ga[ia] += g * s * (1.0 + x * (1.0 - s));
                break;
              }
            }
          }
        });
  }
  return Tensor::wrap(on);
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(EwKind::Add, a, &b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(EwKind::Sub, a, &b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(EwKind::Mul, a, &b);
}
Tensor divide(const Tensor& a, const Tensor& b) {
  return elementwise(EwKind::Div, a, &b);
}
Tensor neg(const Tensor& a) { return elementwise(EwKind::Neg, a); }
Tensor exp_op(const Tensor& a) { return elementwise(EwKind::Exp, a); }
Tensor ln(const Tensor& a) { return elementwise(EwKind::Ln, a); }
Tensor pow_scalar(const Tensor& a, double p) {
  return elementwise(EwKind::PowScalar, a, nullptr, p);
}
Tensor silu(const Tensor& a) { return elementwise(EwKind::Silu, a); }

Tensor scale(const Tensor& a, double s) {
  int64_t n = a.size();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = a.data()[i] * s;
  auto on = make_node(a.shape(), std::move(out));
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on, s, n] {
      if (on->grad.empty() || !an->requires_grad) return;
      double* ga = ensure_grad(an.get()).data();
      for (int64_t i = 0; i < n; ++i) ga[i] += on->grad[i] * s;
    });
  }
  return Tensor::wrap(on);
}

Tensor add_scalar(const Tensor& a, double s) {
  int64_t n = a.size();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = a.data()[i] + s;
  auto on = make_node(a.shape(), std::move(out));
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on, n] {
      if (on->grad.empty() || !an->requires_grad) return;
      double* ga = ensure_grad(an.get()).data();
      for (int64_t i = 0; i < n; ++i) ga[i] += on->grad[i];
    });
  }
  return Tensor::wrap(on);
}

// ---- matmul / transpose ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (k != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree: " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto on = make_node({m, n}, std::vector<double>(m * n));
  {
    Eigen::Map<const MatRM> A(a.data().data(), m, k);
    Eigen::Map<const MatRM> B(b.data().data(), k, n);
    Eigen::Map<MatRM> C(on->data.data(), m, n);
    C.noalias() = A * B;
  }
  if (tracking({&a, &b})) {
    auto an = a.node();
    auto bn = b.node();
    g_active_tape->record(on, {an, bn}, [an, bn, on, m, k, n] {
      if (on->grad.empty()) return;
      Eigen::Map<const MatRM> GO(on->grad.data(), m, n);
      if (an->requires_grad) {
        Eigen::Map<const MatRM> B(bn->data.data(), k, n);
        Eigen::Map<MatRM> GA(ensure_grad(an.get()).data(), m, k);
        GA.noalias() += GO * B.transpose();
      }
      if (bn->requires_grad) {
        Eigen::Map<const MatRM> A(an->data.data(), m, k);
        Eigen::Map<MatRM> GB(ensure_grad(bn.get()).data(), k, n);
        GB.noalias() += A.transpose() * GO;
      }
    });
  }
  return Tensor::wrap(on);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const double* src = a.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  auto on = make_node({n, m}, std::move(out));
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on, m, n] {
      if (on->grad.empty() || !an->requires_grad) return;
      double* ga = ensure_grad(an.get()).data();
      const double* go = on->grad.data();
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < m; ++i) ga[i * n + j] += go[j * m + i];
    });
  }
  return Tensor::wrap(on);
}

// ---- softmax / rms_norm ----------------------------------------------------

namespace {

struct AxisSplit {
  int64_t outer, n, inner;
};

AxisSplit split_axis(const char* op, const Shape& s, int axis) {
  int r = static_cast<int>(s.size());
  if (r == 0) throw ShapeError(std::string(op) + ": rank-0 input");
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError(std::string(op) + ": axis out of range for " +
                     shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  for (int i = axis + 1; i < r; ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  AxisSplit sp = split_axis("softmax", x.shape(), axis);
  int64_t total = x.size();
  std::vector<double> out(total);
  const double* xd = x.data().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      int64_t base = o * sp.n * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < sp.n; ++j)
        mx = std::max(mx, xd[base + j * sp.inner]);
      double sum = 0.0;
      for (int64_t j = 0; j < sp.n; ++j) {
        double e = std::exp(xd[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        sum += e;
      }
      for (int64_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= sum;
    }
  auto on = make_node(x.shape(), std::move(out));
  if (tracking({&x})) {
    auto xn = x.node();
    g_active_tape->record(on, {xn}, [xn, on, sp] {
      if (on->grad.empty() || !xn->requires_grad) return;
      double* gx = ensure_grad(xn.get()).data();
      const double* go = on->grad.data();
      const double* y = on->data.data();
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t in = 0; in < sp.inner; ++in) {
          int64_t base = o * sp.n * sp.inner + in;
          double dot = 0.0;
          for (int64_t j = 0; j < sp.n; ++j) {
            int64_t k = base + j * sp.inner;
            dot += go[k] * y[k];
          }
          for (int64_t j = 0; j < sp.n; ++j) {
            int64_t k = base + j * sp.inner;
            gx[k] += y[k] * (go[k] - dot);
          }
        }
    });
  }
  return Tensor::wrap(on);
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, int axis, double eps) {
  AxisSplit sp = split_axis("rms_norm", x.shape(), axis);
  if (gain.rank() != 1 || gain.dim(0) != sp.n)
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) +
                     " does not match axis length " + std::to_string(sp.n));
  int64_t total = x.size();
  std::vector<double> out(total);
  const double* xd = x.data().data();
  const double* gd = gain.data().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      int64_t base = o * sp.n * sp.inner + in;
      double ms = 0.0;
      for (int64_t j = 0; j < sp.n; ++j) {
        double v = xd[base + j * sp.inner];
        ms += v * v;
      }
      double r = std::sqrt(ms / sp.n + eps);
      for (int64_t j = 0; j < sp.n; ++j) {
        int64_t k = base + j * sp.inner;
        out[k] = xd[k] / r * gd[j];
      }
    }
  auto on = make_node(x.shape(), std::move(out));
  if (tracking({&x, &gain})) {
    auto xn = x.node();
    auto gn = gain.node();
    g_active_tape->record(on, {xn, gn}, [xn, gn, on, sp, eps] {
      if (on->grad.empty()) return;
      const double* go = on->grad.data();
      const double* xd = xn->data.data();
      const double* gd = gn->data.data();
      double* gx = xn->requires_grad ? ensure_grad(xn.get()).data() : nullptr;
      double* gg = gn->requires_grad ? ensure_grad(gn.get()).data() : nullptr;
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t in = 0; in < sp.inner; ++in) {
          int64_t base = o * sp.n * sp.inner + in;
          double ms = 0.0;
          for (int64_t j = 0; j < sp.n; ++j) {
            double v = xd[base + j * sp.inner];
            ms += v * v;
          }
          double r = std::sqrt(ms / sp.n + eps);
          double s = 0.0;
          for (int64_t j = 0; j < sp.n; ++j) {
            int64_t k = base + j * sp.inner;
            s += go[k] * gd[j] * xd[k];
          }
          double r3 = r * r * r;
          for (int64_t j = 0; j < sp.n; ++j) {
            int64_t k = base + j * sp.inner;
            if (gx) gx[k] += go[k] * gd[j] / r - xd[k] * s / (sp.n * r3);
            if (gg) gg[j] += go[k] * xd[k] / r;
          }
        }
    });
  }
  return Tensor::wrap(on);
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto on = make_node({}, {s});
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on] {
      if (on->grad.empty() || !an->requires_grad) return;
      double g = on->grad[0];
      double* ga = ensure_grad(an.get()).data();
      for (size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
    });
  }
  return Tensor::wrap(on);
}

Tensor mean_all(const Tensor& a) {
  int64_t n = a.size();
  if (n == 0) throw ShapeError("mean_all of empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto on = make_node({}, {s / n});
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on, n] {
      if (on->grad.empty() || !an->requires_grad) return;
      double g = on->grad[0] / n;
      double* ga = ensure_grad(an.get()).data();
      for (size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
    });
  }
  return Tensor::wrap(on);
}

// ---- layout ops ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " has " +
                     std::to_string(a.size()) + " values, target " +
                     shape_str(shape) + " needs " +
                     std::to_string(shape_size(shape)));
  auto on = make_node(std::move(shape), a.data());
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on] {
      if (on->grad.empty() || !an->requires_grad) return;
      double* ga = ensure_grad(an.get()).data();
      for (size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return Tensor::wrap(on);
}

Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
  if (a.rank() != 2)
    throw ShapeError("slice_rows expects rank 2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  if (r0 < 0 || r1 < r0 || r1 > m)
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") invalid for " +
                     shape_str(a.shape()));
  int64_t rows = r1 - r0;
  std::vector<double> out(rows * n);
  std::memcpy(out.data(), a.data().data() + r0 * n, rows * n * sizeof(double));
  auto on = make_node({rows, n}, std::move(out));
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on, r0, rows, n] {
      if (on->grad.empty() || !an->requires_grad) return;
      double* ga = ensure_grad(an.get()).data();
      const double* go = on->grad.data();
      for (int64_t i = 0; i < rows * n; ++i) ga[r0 * n + i] += go[i];
    });
  }
  return Tensor::wrap(on);
}

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  if (a.rank() != 2)
    throw ShapeError("slice_cols expects rank 2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 < c0 || c1 > n)
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") invalid for " +
                     shape_str(a.shape()));
  int64_t cols = c1 - c0;
  std::vector<double> out(m * cols);
  const double* src = a.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < cols; ++j) out[i * cols + j] = src[i * n + c0 + j];
  auto on = make_node({m, cols}, std::move(out));
  if (tracking({&a})) {
    auto an = a.node();
    g_active_tape->record(on, {an}, [an, on, c0, cols, m, n] {
      if (on->grad.empty() || !an->requires_grad) return;
      double* ga = ensure_grad(an.get()).data();
      const double* go = on->grad.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < cols; ++j)
          ga[i * n + c0 + j] += go[i * cols + j];
    });
  }
  return Tensor::wrap(on);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of no tensors");
  int64_t n = -1, rows = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 2)
      throw ShapeError("concat_rows expects rank 2, got " +
                       shape_str(t.shape()));
    if (n < 0) n = t.dim(1);
    if (t.dim(1) != n)
      throw ShapeError("concat_rows: column mismatch between [" +
                       std::to_string(parts[0].dim(0)) + "," +
                       std::to_string(n) + "] and " + shape_str(t.shape()));
    rows += t.dim(0);
  }
  std::vector<double> out(rows * n);
  int64_t at = 0;
  for (const Tensor& t : parts) {
    std::memcpy(out.data() + at, t.data().data(),
                t.size() * sizeof(double));
    at += t.size();
  }
  auto on = make_node({rows, n}, std::move(out));
  bool track = false;
  for (const Tensor& t : parts) track = track || tracking({&t});
  if (track) {
    std::vector<std::shared_ptr<detail::TensorNode>> parents;
    for (const Tensor& t : parts) parents.push_back(t.node());
    auto ps = parents;
    g_active_tape->record(on, std::move(parents), [ps, on] {
      if (on->grad.empty()) return;
      const double* go = on->grad.data();
      int64_t at = 0;
      for (const auto& pn : ps) {
        int64_t sz = static_cast<int64_t>(pn->data.size());
        if (pn->requires_grad) {
          double* gp = ensure_grad(pn.get()).data();
          for (int64_t i = 0; i < sz; ++i) gp[i] += go[at + i];
        }
        at += sz;
      }
    });
  }
  return Tensor::wrap(on);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of no tensors");
  int64_t m = -1, cols = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 2)
      throw ShapeError("concat_cols expects rank 2, got " +
                       shape_str(t.shape()));
    if (m < 0) m = t.dim(0);
    if (t.dim(0) != m)
      throw ShapeError("concat_cols: row mismatch between [" +
                       std::to_string(m) + "," +
                       std::to_string(parts[0].dim(1)) + "] and " +
                       shape_str(t.shape()));
    cols += t.dim(1);
  }
  std::vector<double> out(m * cols);
  int64_t c_at = 0;
  for (const Tensor& t : parts) {
    int64_t tc = t.dim(1);
    const double* src = t.data().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < tc; ++j) out[i * cols + c_at + j] = src[i * tc + j];
    c_at += tc;
  }
  auto on = make_node({m, cols}, std::move(out));
  bool track = false;
  for (const Tensor& t : parts) track = track || tracking({&t});
  if (track) {
    std::vector<std::shared_ptr<detail::TensorNode>> parents;
    for (const Tensor& t : parts) parents.push_back(t.node());
    auto ps = parents;
    g_active_tape->record(on, std::move(parents), [ps, on, m, cols] {
      if (on->grad.empty()) return;
      const double* go = on->grad.data();
      int64_t c_at = 0;
      for (const auto& pn : ps) {
        int64_t tc = static_cast<int64_t>(pn->shape[1]);
        if (pn->requires_grad) {
          double* gp = ensure_grad(pn.get()).data();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < tc; ++j)
              gp[i * tc + j] += go[i * cols + c_at + j];
        }
        c_at += tc;
      }
    });
  }
  return Tensor::wrap(on);
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.rank() != 2)
    throw ShapeError("gather_rows expects rank 2, got " +
                     shape_str(table.shape()));
  int64_t v = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= v)
      throw ParamError("gather_rows: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
  int64_t n = static_cast<int64_t>(ids.size());
  std::vector<double> out(n * d);
  const double* src = table.data().data();
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * d, src + ids[i] * d, d * sizeof(double));
  auto on = make_node({n, d}, std::move(out));
  if (tracking({&table})) {
    auto tn = table.node();
    auto ids_c = ids;
    g_active_tape->record(on, {tn}, [tn, on, ids_c, d] {
      if (on->grad.empty() || !tn->requires_grad) return;
      double* gt = ensure_grad(tn.get()).data();
      const double* go = on->grad.data();
      for (size_t i = 0; i < ids_c.size(); ++i)
        for (int64_t j = 0; j < d; ++j)
          gt[ids_c[i] * d + j] += go[i * d + j];
    });
  }
  return Tensor::wrap(on);
}

Tensor permute_elements(const Tensor& x, const std::vector<int64_t>& src_index,
                        Shape out_shape) {
  validate_shape(out_shape);
  int64_t n = shape_size(out_shape);
  if (static_cast<int64_t>(src_index.size()) != n)
    throw ShapeError("permute_elements: " + std::to_string(src_index.size()) +
                     " indices do not fill " + shape_str(out_shape));
  int64_t xsz = x.size();
  for (int64_t s : src_index)
    if (s < 0 || s >= xsz)
      throw ParamError("permute_elements: source index " + std::to_string(s) +
                       " out of range [0," + std::to_string(xsz) + ")");
  std::vector<double> out(n);
  const double* xd = x.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = xd[src_index[i]];
  auto on = make_node(std::move(out_shape), std::move(out));
  if (tracking({&x})) {
    auto xn = x.node();
    auto idx = src_index;
    g_active_tape->record(on, {xn}, [xn, on, idx] {
      if (on->grad.empty() || !xn->requires_grad) return;
      double* gx = ensure_grad(xn.get()).data();
      const double* go = on->grad.data();
      for (size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += go[i];
    });
  }
  return Tensor::wrap(on);
}

// ---- rope2d ----------------------------------------------------------------

Tensor rope2d(const Tensor& x,
              const std::vector<std::array<int64_t, 2>>& positions,
              double base) {
  if (x.rank() != 2)
    throw ShapeError("rope2d expects rank 2, got " + shape_str(x.shape()));
  int64_t n = x.dim(0), hd = x.dim(1);
  if (hd % 4 != 0)
    throw ShapeError("rope2d: head dim " + std::to_string(hd) +
                     " must be divisible by 4");
  if (static_cast<int64_t>(positions.size()) != n)
    throw ShapeError("rope2d: " + std::to_string(positions.size()) +
                     " positions for " + std::to_string(n) + " rows");
  int64_t half = hd / 2;
  int64_t pairs = half / 2;
  std::vector<double> theta(pairs);
  for (int64_t j = 0; j < pairs; ++j)
    theta[j] = std::pow(base, -2.0 * static_cast<double>(j) /
                                  static_cast<double>(half));
  std::vector<double> out(n * hd);
  const double* xd = x.data().data();
  for (int64_t i = 0; i < n; ++i) {
    for (int axis = 0; axis < 2; ++axis) {
      double pos = static_cast<double>(positions[i][axis]);
      int64_t off = i * hd + axis * half;
      for (int64_t j = 0; j < pairs; ++j) {
        double ang = pos * theta[j];
        double c = std::cos(ang), s = std::sin(ang);
        double x0 = xd[off + 2 * j], x1 = xd[off + 2 * j + 1];
        out[off + 2 * j] = c * x0 - s * x1;
        out[off + 2 * j + 1] = s * x0 + c * x1;
      }
    }
  }
  auto on = make_node({n, hd}, std::move(out));
  if (tracking({&x})) {
    auto xn = x.node();
    auto pos_c = positions;
    g_active_tape->record(on, {xn}, [xn, on, pos_c, theta, n, hd, half, pairs] {
      if (on->grad.empty() || !xn->requires_grad) return;
      double* gx = ensure_grad(xn.get()).data();
      const double* go = on->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        for (int axis = 0; axis < 2; ++axis) {
          double pos = static_cast<double>(pos_c[i][axis]);
          int64_t off = i * hd + axis * half;
          for (int64_t j = 0; j < pairs; ++j) {
            double ang = pos * theta[j];
            double c = std::cos(ang), s = std::sin(ang);
            double g0 = go[off + 2 * j], g1 = go[off + 2 * j + 1];
            gx[off + 2 * j] += c * g0 + s * g1;
            gx[off + 2 * j + 1] += -s * g0 + c * g1;
          }
        }
      }
    });
  }
  return Tensor::wrap(on);
}

// ---- gradient checking -----------------------------------------------------

namespace {

double rel_err(double a, double b) {
  return std::fabs(a - b) / (std::fabs(a) + std::fabs(b) + 1e-12);
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                  double eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y = f(x);
    tape.backward(y);
    analytic = x.grad();
  }
  NoGrad ng;
  double worst = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    double orig = x.data()[i];
    x.data()[i] = orig + eps;
    double fp = f(x).value();
    x.data()[i] = orig - eps;
    double fm = f(x).value();
    x.data()[i] = orig;
    double numeric = (fp - fm) / (2.0 * eps);
    worst = std::max(worst, rel_err(analytic[i], numeric));
  }
  return worst;
}

double grad_check_params(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double eps) {
  std::vector<std::vector<double>> analytic;
  for (const Tensor& p : params) {
    Tensor q = p;
    q.set_requires_grad(true);
    q.zero_grad();
  }
  {
    Tape tape;
    Tensor y = f();
    tape.backward(y);
    for (const Tensor& p : params) {
      Tensor q = p;
      analytic.push_back(q.grad());
    }
  }
  NoGrad ng;
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (int64_t i = 0; i < p.size(); ++i) {
      double orig = p.data()[i];
      p.data()[i] = orig + eps;
      double fp = f().value();
      p.data()[i] = orig - eps;
      double fm = f().value();
      p.data()[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, rel_err(analytic[pi][i], numeric));
    }
  }
  return worst;
}

// ---- serialization ---------------------------------------------------------

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write("OLVT", 4);
  uint32_t rank = static_cast<uint32_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), 4);
  for (int64_t d : t.shape()) {
    uint32_t dd = static_cast<uint32_t>(d);
    out.write(reinterpret_cast<const char*>(&dd), 4);
  }
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "OLVT", 4) != 0)
    throw IoError("bad magic in " + path);
  uint32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), 4);
  if (!in || rank > 8) throw IoError("corrupt header in " + path);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = 0;
    in.read(reinterpret_cast<char*>(&d), 4);
    if (!in) throw IoError("corrupt header in " + path);
    shape[i] = d;
  }
  int64_t n = shape_size(shape);
  std::vector<double> data(n);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double)))
    throw IoError("truncated payload in " + path);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace lvf
