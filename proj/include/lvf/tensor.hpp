#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lvf/error.hpp"

namespace lvf {

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  int64_t tape_pos = -1;  // index of the producing tape entry, -1 for leaves
};
}  // namespace detail

// Dense row-major f64 tensor. Copies share the underlying node (handle
// semantics); clone() makes an independent detached copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);  // rank 0

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int axis) const;
  int64_t size() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double value() const;  // size-1 tensors only
  double at(std::initializer_list<int64_t> idx) const;
  void set(std::initializer_list<int64_t> idx, double v);

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  std::vector<double>& grad();  // allocates zeros on first use
  void zero_grad();
  void clear_grad();  // drops the buffer entirely (has_grad() becomes false)

  Tensor clone() const;
  int64_t tape_pos() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Define-by-run tape. Construction pushes this tape as the active recorder
// for the current thread; destruction restores the previous one. Entries are
// recorded in execution order, so parents always precede their consumers.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and sweeps entries once, in reverse recording
  // order. Grads accumulate across calls until zeroed.
  void backward(const Tensor& loss);

  size_t size() const { return entries_.size(); }

  struct EntryInfo {
    int64_t out_pos;
    std::vector<int64_t> parent_pos;  // -1 for leaves
  };
  std::vector<EntryInfo> structure() const;

  void record(std::shared_ptr<detail::TensorNode> out,
              std::vector<std::shared_ptr<detail::TensorNode>> parents,
              std::function<void()> back);

  static Tape* active();

 private:
  struct Entry {
    std::shared_ptr<detail::TensorNode> out;
    std::vector<std::shared_ptr<detail::TensorNode>> parents;
    std::function<void()> back;
  };
  std::vector<Entry> entries_;
  Tape* prev_ = nullptr;
};

// Disables gradient recording (and requires_grad propagation) within scope.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

bool grad_enabled();

// ---- operations ------------------------------------------------------------
// Binary ops broadcast over trailing dimensions only: the smaller shape must
// be a suffix of the larger one. Gradients are reduced back over the
// broadcast (leading) axes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor ln(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor silu(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

enum class EwKind { Add, Sub, Mul, Div, Neg, Exp, Ln, PowScalar, Silu };
Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr,
                   double p = 0.0);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // 2-D

Tensor softmax(const Tensor& x, int axis);
Tensor rms_norm(const Tensor& x, const Tensor& gain, int axis, double eps);

Tensor sum_all(const Tensor& a);   // rank-0 result
Tensor mean_all(const Tensor& a);  // rank-0 result

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1);  // 2-D, [r0,r1)
Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1);  // 2-D, [c0,c1)
Tensor concat_rows(const std::vector<Tensor>& parts);        // 2-D
Tensor concat_cols(const std::vector<Tensor>& parts);        // 2-D
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids);

// out[i] = x.flat[src_index[i]]; src_index must be a permutation-like map
// with size == shape_size(out_shape).
Tensor permute_elements(const Tensor& x, const std::vector<int64_t>& src_index,
                        Shape out_shape);

// Axial 2-D rotary encoding over the last dimension of x [n, head_dim]:
// first half rotated by row angles, second half by column angles, with
// frequency j of each half = base^(-2j / (head_dim/2)).
Tensor rope2d(const Tensor& x,
              const std::vector<std::array<int64_t, 2>>& positions,
              double base);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- gradient checking -----------------------------------------------------
// Central differences against the tape gradient. Returns the max over
// components of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                  double eps = 1e-5);

// Same check for a closure over many parameter tensors (model blocks).
double grad_check_params(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double eps = 1e-5);

// ---- serialization ---------------------------------------------------------
// Flat binary format: magic "OLVT", u32 rank, u32 dims..., all little-endian,
// then the f64 payload.

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace lvf
