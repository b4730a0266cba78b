#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Reverse-mode automatic differentiation over dense 64-bit arrays.
//
// A Tape owns an append-only sequence of nodes; insertion order is a valid
// topological order (an operation is recorded after its parents), so the
// backward pass is a single reverse sweep. Tensors are cheap handles into a
// tape and stay valid for the tape's lifetime. Graphs are rebuilt per
// training step; parameters live outside the tape and enter as leaves.

namespace rankuda::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

class Tensor {
 public:
  Tensor() = default;
  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const;
  std::span<const double> value() const;
  // Accumulated gradient; empty until a backward pass reaches this node.
  std::span<const double> grad() const;
  double item() const;  // scalar tensors only
  bool requires_grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Tensor(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Scratch gradients for one backward walk. Keeping the walk's gradients
// separate from the persistent per-node accumulators makes repeated
// backward() calls accumulate correctly even when losses share subgraphs.
class BackCtx {
 public:
  explicit BackCtx(std::size_t n) : g_(n) {}
  std::span<double> accum(const Tape& t, int id);
  bool touched(int id) const { return !g_[static_cast<std::size_t>(id)].empty(); }
  std::span<const double> at(int id) const {
    return g_[static_cast<std::size_t>(id)];
  }

 private:
  std::vector<std::vector<double>> g_;
};

class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // persistent, lazily allocated
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<int> parents;
    std::function<void(Tape&, int, BackCtx&)> back;
  };

  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false);
  Tensor scalar(double v, bool requires_grad = false);
  Tensor full(Shape shape, double v, bool requires_grad = false);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Every
  // requires_grad ancestor receives its gradient, accumulated on top of
  // whatever previous backward() calls already deposited.
  void backward(const Tensor& loss);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int emit(Node n);
  Tensor handle(int id) { return Tensor(this, id); }

 private:
  std::vector<Node> nodes_;
};

// Per-layer batch-norm running statistics (not learnable).
struct BatchNormBuffer {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  void init(int channels) {
    running_mean.assign(static_cast<std::size_t>(channels), 0.0);
    running_var.assign(static_cast<std::size_t>(channels), 1.0);
  }
};

// Elementwise; shapes must match except that a 1-element tensor broadcasts
// against an array.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
Tensor transpose(const Tensor& a);                // 2-D
Tensor reshape(const Tensor& a, Shape s);
Tensor slice(const Tensor& a, int axis, int begin, int end);
Tensor concat(std::span<const Tensor> parts, int axis);

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor softmax(const Tensor& a);  // over the last dimension; 1-D or 2-D

Tensor sum(const Tensor& a);          // scalar
Tensor mean(const Tensor& a);         // scalar
Tensor sum_squares(const Tensor& a);  // squared L2 norm, scalar

// Row-vector broadcasts for (rows, cols) matrices; r has cols elements.
Tensor add_rowvec(const Tensor& m, const Tensor& r);
Tensor sub_rowvec(const Tensor& m, const Tensor& r);

// x: (N,C,H,W), w: (OC,C,KH,KW), bias: optional (OC).
Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias,
              int stride, int pad);
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffer& buf, bool training, double momentum = 0.1,
                  double eps = 1e-5);
Tensor avg_pool(const Tensor& x, int window, int stride);
Tensor global_avg_pool(const Tensor& x);  // (N,C,H,W) -> (N,C)

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return sub(c, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Gradient verification by central finite differences. `f` evaluates the
// scalar objective at the given parameter vector; when `grad_out` is
// non-null it must also fill the analytic gradient (typically by building a
// tape and running backward). Relative error uses a max(1,|a|,|n|)
// denominator.
struct FdCheckResult {
  bool pass = false;
  double max_rel_err = 0.0;
};
using FdFunc =
    std::function<double(std::span<const double>, std::vector<double>*)>;
FdCheckResult finite_diff_check(const FdFunc& f, std::vector<double> params,
                                double tol, double step = 1e-5);

}  // namespace rankuda::ad
