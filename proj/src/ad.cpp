#include "rankuda/ad.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <utility>

namespace rankuda::ad {

namespace {

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw std::invalid_argument(std::string(op) + ": " + msg);
}

void check_same_tape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.tape() != b.tape()) fail(op, "operands belong to different tapes");
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// C(m,n) += A(m,k) * B(k,n), row-major.
void gemm_nn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    double* crow = C + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double a = arow[p];
      const double* brow = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C(m,k) += A(m,n) * B(k,n)^T
void gemm_nt(const double* A, const double* B, double* C, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * n;
    double* crow = C + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = B + static_cast<std::size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C(k,n) += A(m,k)^T * B(m,n)
void gemm_tn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    const double* brow = B + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double a = arow[p];
      double* crow = C + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

struct ConvDims {
  int batch, cin, h, w;
  int cout, kh, kw;
  int stride, pad;
  int ho, wo;
};

void im2col(const double* x, const ConvDims& d, int sample, double* col) {
  // col: (cin*kh*kw) x (ho*wo)
  const int hw = d.h * d.w;
  const double* xs = x + static_cast<std::size_t>(sample) * d.cin * hw;
  const int out_hw = d.ho * d.wo;
  for (int c = 0; c < d.cin; ++c) {
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        double* row =
            col + static_cast<std::size_t>((c * d.kh + ky) * d.kw + kx) * out_hw;
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) {
            std::fill(row + oy * d.wo, row + (oy + 1) * d.wo, 0.0);
            continue;
          }
          const double* xrow = xs + static_cast<std::size_t>(c) * hw + iy * d.w;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * d.stride - d.pad + kx;
            row[oy * d.wo + ox] = (ix < 0 || ix >= d.w) ? 0.0 : xrow[ix];
          }
        }
      }
    }
  }
}

void col2im_accum(const double* col, const ConvDims& d, int sample, double* gx) {
  const int hw = d.h * d.w;
  double* gs = gx + static_cast<std::size_t>(sample) * d.cin * hw;
  const int out_hw = d.ho * d.wo;
  for (int c = 0; c < d.cin; ++c) {
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        const double* row =
            col + static_cast<std::size_t>((c * d.kh + ky) * d.kw + kx) * out_hw;
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          double* grow = gs + static_cast<std::size_t>(c) * hw + iy * d.w;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.w) grow[ix] += row[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::span<const double> Tensor::value() const { return tape_->node(id_).value; }
std::span<const double> Tensor::grad() const { return tape_->node(id_).grad; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::item() const {
  const auto& n = tape_->node(id_);
  if (n.value.size() != 1) fail("item", "tensor of shape " + shape_str(n.shape) + " is not scalar");
  return n.value[0];
}

std::span<double> BackCtx::accum(const Tape& t, int id) {
  auto& g = g_[static_cast<std::size_t>(id)];
  if (g.empty()) g.assign(t.node(id).value.size(), 0.0);
  return g;
}

int Tape::emit(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) fail("leaf", "shape must have at least one dimension");
  for (int d : shape) {
    if (d <= 0) fail("leaf", "non-positive dimension in " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    fail("leaf", "shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = requires_grad;
  return Tensor(this, emit(std::move(n)));
}

Tensor Tape::scalar(double v, bool requires_grad) {
  return leaf({1}, {v}, requires_grad);
}

Tensor Tape::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> vals(numel(shape), v);
  return leaf(std::move(shape), std::move(vals), requires_grad);
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) fail("backward", "loss belongs to another tape");
  const Node& ln = node(loss.id());
  if (ln.value.size() != 1) {
    fail("backward", "loss must be scalar, got shape " + shape_str(ln.shape));
  }
  BackCtx ctx(nodes_.size());
  ctx.accum(*this, loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    if (!ctx.touched(id)) continue;
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.back) n.back(*this, id, ctx);
    if (n.requires_grad) {
      if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
      auto g = ctx.at(id);
      for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

namespace {

bool any_requires(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Elementwise binary op with 1-element broadcast on either side.
template <class Fwd, class Bwd>
Tensor binary_op(const char* opname, const Tensor& a, const Tensor& b, Fwd fwd,
                 Bwd bwd, bool check_finite = false) {
  check_same_tape(opname, a, b);
  Tape& t = *a.tape();
  const auto av = a.value();
  const auto bv = b.value();
  const bool a_scalar = av.size() == 1;
  const bool b_scalar = bv.size() == 1;
  if (av.size() != bv.size() && !a_scalar && !b_scalar) {
    fail(opname, "shape mismatch between " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t n = std::max(av.size(), bv.size());
  Tape::Node out;
  out.shape = av.size() >= bv.size() ? a.shape() : b.shape();
  out.value.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.value[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  }
  if (check_finite && !all_finite(out.value)) {
    fail(opname, "produced non-finite values");
  }
  out.op = opname;
  out.requires_grad = any_requires({&a, &b});
  out.parents = {a.id(), b.id()};
  const int aid = a.id(), bid = b.id();
  out.back = [aid, bid, a_scalar, b_scalar, bwd](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    const auto av2 = tp.node(aid).value;
    const auto bv2 = tp.node(bid).value;
    auto ga = ctx.accum(tp, aid);
    auto gb = ctx.accum(tp, bid);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av2[a_scalar ? 0 : i];
      const double y = bv2[b_scalar ? 0 : i];
      double dx = 0.0, dy = 0.0;
      bwd(x, y, g[i], dx, dy);
      ga[a_scalar ? 0 : i] += dx;
      gb[b_scalar ? 0 : i] += dy;
    }
  };
  return t.handle(t.emit(std::move(out)));
}

// Elementwise unary op.
template <class Fwd, class Bwd>
Tensor unary_op(const char* opname, const Tensor& a, Fwd fwd, Bwd bwd) {
  Tape& t = *a.tape();
  const auto av = a.value();
  Tape::Node out;
  out.shape = a.shape();
  out.value.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out.value[i] = fwd(av[i]);
  out.op = opname;
  out.requires_grad = a.requires_grad();
  out.parents = {a.id()};
  const int aid = a.id();
  out.back = [aid, bwd](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    const auto av2 = tp.node(aid).value;
    const auto yv = tp.node(self).value;
    auto ga = ctx.accum(tp, aid);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += bwd(av2[i], yv[i]) * g[i];
    }
  };
  return t.handle(t.emit(std::move(out)));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g * y;
        dy = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g / y;
        dy = -g * x / (y * y);
      },
      /*check_finite=*/true);
}

Tensor add(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double c) {
  return unary_op(
      "mul_scalar", a, [c](double x) { return x * c; },
      [c](double, double) { return c; });
}

Tensor sub(double c, const Tensor& a) {
  return unary_op(
      "rsub_scalar", a, [c](double x) { return c - x; },
      [](double, double) { return -1.0; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      "clamp", a,
      [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_tape("matmul", a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    fail("matmul", "incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const int m = sa[0], k = sa[1], n = sb[1];
  Tape& t = *a.tape();
  Tape::Node out;
  out.shape = {m, n};
  out.value.assign(static_cast<std::size_t>(m) * n, 0.0);
  gemm_nn(a.value().data(), b.value().data(), out.value.data(), m, k, n);
  out.op = "matmul";
  out.requires_grad = any_requires({&a, &b});
  out.parents = {a.id(), b.id()};
  const int aid = a.id(), bid = b.id();
  out.back = [aid, bid, m, k, n](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    const auto av = tp.node(aid).value;
    const auto bv = tp.node(bid).value;
    auto ga = ctx.accum(tp, aid);
    auto gb = ctx.accum(tp, bid);
    gemm_nt(g.data(), bv.data(), ga.data(), m, n, k);  // gA += g * B^T
    gemm_tn(av.data(), g.data(), gb.data(), m, k, n);  // gB += A^T * g
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor transpose(const Tensor& a) {
  const auto& s = a.shape();
  if (s.size() != 2) fail("transpose", "expected 2-D, got " + shape_str(s));
  const int r = s[0], c = s[1];
  Tape& t = *a.tape();
  Tape::Node out;
  out.shape = {c, r};
  out.value.resize(a.value().size());
  const auto av = a.value();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out.value[static_cast<std::size_t>(j) * r + i] =
          av[static_cast<std::size_t>(i) * c + j];
    }
  }
  out.op = "transpose";
  out.requires_grad = a.requires_grad();
  out.parents = {a.id()};
  const int aid = a.id();
  out.back = [aid, r, c](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    auto ga = ctx.accum(tp, aid);
    for (int j = 0; j < c; ++j) {
      for (int i = 0; i < r; ++i) {
        ga[static_cast<std::size_t>(i) * c + j] +=
            g[static_cast<std::size_t>(j) * r + i];
      }
    }
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor reshape(const Tensor& a, Shape s) {
  if (numel(s) != a.value().size()) {
    fail("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(s));
  }
  Tape& t = *a.tape();
  Tape::Node out;
  out.shape = std::move(s);
  out.value.assign(a.value().begin(), a.value().end());
  out.op = "reshape";
  out.requires_grad = a.requires_grad();
  out.parents = {a.id()};
  const int aid = a.id();
  out.back = [aid](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    auto ga = ctx.accum(tp, aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor slice(const Tensor& a, int axis, int begin, int end) {
  const auto& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    fail("slice", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  if (begin < 0 || end > s[static_cast<std::size_t>(axis)] || begin >= end) {
    fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") invalid for axis of size " +
                      std::to_string(s[static_cast<std::size_t>(axis)]));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) {
    inner *= static_cast<std::size_t>(s[i]);
  }
  const std::size_t len = static_cast<std::size_t>(end - begin);
  const std::size_t axis_n = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);
  Shape os = s;
  os[static_cast<std::size_t>(axis)] = end - begin;
  Tape& t = *a.tape();
  Tape::Node out;
  out.shape = std::move(os);
  out.value.resize(outer * len * inner);
  const auto av = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = av.data() + (o * axis_n + static_cast<std::size_t>(begin)) * inner;
    double* dst = out.value.data() + o * len * inner;
    std::copy(src, src + len * inner, dst);
  }
  out.op = "slice";
  out.requires_grad = a.requires_grad();
  out.parents = {a.id()};
  const int aid = a.id();
  out.back = [aid, outer, inner, len, axis_n, begin](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    auto ga = ctx.accum(tp, aid);
    for (std::size_t o = 0; o < outer; ++o) {
      double* dst = ga.data() + (o * axis_n + static_cast<std::size_t>(begin)) * inner;
      const double* src = g.data() + o * len * inner;
      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) fail("concat", "no inputs");
  Tape& t = *parts[0].tape();
  const auto& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) {
    fail("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  }
  int axis_total = 0;
  for (const Tensor& p : parts) {
    check_same_tape("concat", parts[0], p);
    const auto& sp = p.shape();
    if (sp.size() != s0.size()) {
      fail("concat", "rank mismatch between " + shape_str(s0) + " and " + shape_str(sp));
    }
    for (std::size_t i = 0; i < sp.size(); ++i) {
      if (static_cast<int>(i) != axis && sp[i] != s0[i]) {
        fail("concat", "shape mismatch between " + shape_str(s0) + " and " + shape_str(sp));
      }
    }
    axis_total += sp[static_cast<std::size_t>(axis)];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s0[i]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s0.size(); ++i) {
    inner *= static_cast<std::size_t>(s0[i]);
  }
  Shape os = s0;
  os[static_cast<std::size_t>(axis)] = axis_total;
  Tape::Node out;
  out.shape = std::move(os);
  out.value.resize(outer * static_cast<std::size_t>(axis_total) * inner);
  std::vector<int> part_lens;
  part_lens.reserve(parts.size());
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t plen =
        static_cast<std::size_t>(p.shape()[static_cast<std::size_t>(axis)]);
    part_lens.push_back(static_cast<int>(plen));
    const auto pv = p.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pv.data() + o * plen * inner, pv.data() + (o + 1) * plen * inner,
                out.value.data() + (o * static_cast<std::size_t>(axis_total) + offset) * inner);
    }
    offset += plen;
  }
  out.op = "concat";
  bool rg = false;
  out.parents.reserve(parts.size());
  for (const Tensor& p : parts) {
    out.parents.push_back(p.id());
    rg = rg || p.requires_grad();
  }
  out.requires_grad = rg;
  const std::size_t total = static_cast<std::size_t>(axis_total);
  out.back = [outer, inner, total, part_lens](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    const auto& parents = tp.node(self).parents;
    std::size_t offset2 = 0;
    for (std::size_t pi = 0; pi < parents.size(); ++pi) {
      const std::size_t plen = static_cast<std::size_t>(part_lens[pi]);
      auto gp = ctx.accum(tp, parents[pi]);
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = g.data() + (o * total + offset2) * inner;
        double* dst = gp.data() + o * plen * inner;
        for (std::size_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
      }
      offset2 += plen;
    }
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor softmax(const Tensor& a) {
  const auto& s = a.shape();
  if (s.empty() || s.size() > 2) {
    fail("softmax", "expected 1-D or 2-D, got " + shape_str(s));
  }
  if (!all_finite(a.value())) fail("softmax", "non-finite input");
  const int rows = s.size() == 2 ? s[0] : 1;
  const int cols = s.size() == 2 ? s[1] : s[0];
  Tape& t = *a.tape();
  Tape::Node out;
  out.shape = s;
  out.value.resize(a.value().size());
  const auto av = a.value();
  for (int r = 0; r < rows; ++r) {
    const double* x = av.data() + static_cast<std::size_t>(r) * cols;
    double* y = out.value.data() + static_cast<std::size_t>(r) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= z;
  }
  out.op = "softmax";
  out.requires_grad = a.requires_grad();
  out.parents = {a.id()};
  const int aid = a.id();
  out.back = [aid, rows, cols](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    const auto yv = tp.node(self).value;
    auto ga = ctx.accum(tp, aid);
    for (int r = 0; r < rows; ++r) {
      const double* y = yv.data() + static_cast<std::size_t>(r) * cols;
      const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += gr[j] * y[j];
      double* gar = ga.data() + static_cast<std::size_t>(r) * cols;
      for (int j = 0; j < cols; ++j) gar[j] += y[j] * (gr[j] - dot);
    }
  };
  return t.handle(t.emit(std::move(out)));
}

namespace {

template <class Acc, class Bwd>
Tensor reduce_op(const char* opname, const Tensor& a, Acc acc, Bwd bwd) {
  Tape& t = *a.tape();
  const auto av = a.value();
  double total = 0.0;
  for (double x : av) total += acc(x);
  Tape::Node out;
  out.shape = {1};
  out.value = {total};
  out.op = opname;
  out.requires_grad = a.requires_grad();
  out.parents = {a.id()};
  const int aid = a.id();
  out.back = [aid, bwd](Tape& tp, int self, BackCtx& ctx) {
    const double g = ctx.at(self)[0];
    const auto av2 = tp.node(aid).value;
    auto ga = ctx.accum(tp, aid);
    for (std::size_t i = 0; i < av2.size(); ++i) ga[i] += bwd(av2[i]) * g;
  };
  return t.handle(t.emit(std::move(out)));
}

}  // namespace

Tensor sum(const Tensor& a) {
  return reduce_op(
      "sum", a, [](double x) { return x; }, [](double) { return 1.0; });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  return reduce_op(
      "mean", a, [inv](double x) { return x * inv; },
      [inv](double) { return inv; });
}

Tensor sum_squares(const Tensor& a) {
  return reduce_op(
      "sum_squares", a, [](double x) { return x * x; },
      [](double x) { return 2.0 * x; });
}

namespace {

Tensor rowvec_op(const char* opname, const Tensor& m, const Tensor& r, double sign) {
  check_same_tape(opname, m, r);
  const auto& sm = m.shape();
  if (sm.size() != 2) fail(opname, "matrix must be 2-D, got " + shape_str(sm));
  const std::size_t cols = static_cast<std::size_t>(sm[1]);
  if (r.value().size() != cols) {
    fail(opname, "row vector of shape " + shape_str(r.shape()) +
                     " does not match matrix " + shape_str(sm));
  }
  const std::size_t rows = static_cast<std::size_t>(sm[0]);
  Tape& t = *m.tape();
  Tape::Node out;
  out.shape = sm;
  out.value.resize(rows * cols);
  const auto mv = m.value();
  const auto rv = r.value();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      out.value[i * cols + j] = mv[i * cols + j] + sign * rv[j];
    }
  }
  out.op = opname;
  out.requires_grad = any_requires({&m, &r});
  out.parents = {m.id(), r.id()};
  const int mid = m.id(), rid = r.id();
  out.back = [mid, rid, rows, cols, sign](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    auto gm = ctx.accum(tp, mid);
    auto gr = ctx.accum(tp, rid);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        gm[i * cols + j] += g[i * cols + j];
        gr[j] += sign * g[i * cols + j];
      }
    }
  };
  return t.handle(t.emit(std::move(out)));
}

}  // namespace

Tensor add_rowvec(const Tensor& m, const Tensor& r) {
  return rowvec_op("add_rowvec", m, r, 1.0);
}

Tensor sub_rowvec(const Tensor& m, const Tensor& r) {
  return rowvec_op("sub_rowvec", m, r, -1.0);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias,
              int stride, int pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4) fail("conv2d", "input must be NCHW, got " + shape_str(sx));
  if (sw.size() != 4) fail("conv2d", "weights must be (OC,C,KH,KW), got " + shape_str(sw));
  if (sx[1] != sw[1]) {
    fail("conv2d", "channel mismatch between input " + shape_str(sx) +
                       " and weights " + shape_str(sw));
  }
  if (stride < 1 || pad < 0) fail("conv2d", "invalid stride/padding");
  ConvDims d;
  d.batch = sx[0];
  d.cin = sx[1];
  d.h = sx[2];
  d.w = sx[3];
  d.cout = sw[0];
  d.kh = sw[2];
  d.kw = sw[3];
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.ho <= 0 || d.wo <= 0) {
    fail("conv2d", "kernel " + shape_str(sw) + " does not fit input " + shape_str(sx));
  }
  if (bias && bias->value().size() != static_cast<std::size_t>(d.cout)) {
    fail("conv2d", "bias of shape " + shape_str(bias->shape()) +
                       " does not match " + std::to_string(d.cout) + " output channels");
  }
  Tape& t = *x.tape();
  const int kdim = d.cin * d.kh * d.kw;
  const int out_hw = d.ho * d.wo;
  Tape::Node out;
  out.shape = {d.batch, d.cout, d.ho, d.wo};
  out.value.assign(static_cast<std::size_t>(d.batch) * d.cout * out_hw, 0.0);
  std::vector<double> col(static_cast<std::size_t>(kdim) * out_hw);
  const auto xv = x.value();
  const auto wv = w.value();
  for (int nimg = 0; nimg < d.batch; ++nimg) {
    im2col(xv.data(), d, nimg, col.data());
    gemm_nn(wv.data(), col.data(),
            out.value.data() + static_cast<std::size_t>(nimg) * d.cout * out_hw,
            d.cout, kdim, out_hw);
  }
  if (bias) {
    const auto bv = bias->value();
    for (int nimg = 0; nimg < d.batch; ++nimg) {
      for (int oc = 0; oc < d.cout; ++oc) {
        double* dst = out.value.data() +
                      (static_cast<std::size_t>(nimg) * d.cout + oc) * out_hw;
        for (int i = 0; i < out_hw; ++i) dst[i] += bv[static_cast<std::size_t>(oc)];
      }
    }
  }
  out.op = "conv2d";
  out.parents = {x.id(), w.id()};
  bool rg = x.requires_grad() || w.requires_grad();
  int bias_id = -1;
  if (bias) {
    out.parents.push_back(bias->id());
    bias_id = bias->id();
    rg = rg || bias->requires_grad();
  }
  out.requires_grad = rg;
  const int xid = x.id(), wid = w.id();
  out.back = [xid, wid, bias_id, d, kdim, out_hw](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    const auto xv2 = tp.node(xid).value;
    const auto wv2 = tp.node(wid).value;
    auto gx = ctx.accum(tp, xid);
    auto gw = ctx.accum(tp, wid);
    std::vector<double> col(static_cast<std::size_t>(kdim) * out_hw);
    std::vector<double> gcol(static_cast<std::size_t>(kdim) * out_hw);
    for (int nimg = 0; nimg < d.batch; ++nimg) {
      const double* gout = g.data() + static_cast<std::size_t>(nimg) * d.cout * out_hw;
      im2col(xv2.data(), d, nimg, col.data());
      // gW += gout * col^T
      gemm_nt(gout, col.data(), gw.data(), d.cout, out_hw, kdim);
      // gcol = W^T * gout
      std::fill(gcol.begin(), gcol.end(), 0.0);
      gemm_tn(wv2.data(), gout, gcol.data(), d.cout, kdim, out_hw);
      col2im_accum(gcol.data(), d, nimg, gx.data());
    }
    if (bias_id >= 0) {
      auto gb = ctx.accum(tp, bias_id);
      for (int nimg = 0; nimg < d.batch; ++nimg) {
        for (int oc = 0; oc < d.cout; ++oc) {
          const double* gout =
              g.data() + (static_cast<std::size_t>(nimg) * d.cout + oc) * out_hw;
          double acc = 0.0;
          for (int i = 0; i < out_hw; ++i) acc += gout[i];
          gb[static_cast<std::size_t>(oc)] += acc;
        }
      }
    }
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffer& buf, bool training, double momentum, double eps) {
  const auto& s = x.shape();
  if (s.size() != 4) fail("batch_norm", "input must be NCHW, got " + shape_str(s));
  const int batch = s[0], ch = s[1], h = s[2], w = s[3];
  if (gamma.value().size() != static_cast<std::size_t>(ch) ||
      beta.value().size() != static_cast<std::size_t>(ch)) {
    fail("batch_norm", "gamma/beta of shapes " + shape_str(gamma.shape()) + "/" +
                           shape_str(beta.shape()) + " do not match " +
                           std::to_string(ch) + " channels");
  }
  if (buf.running_mean.size() != static_cast<std::size_t>(ch)) {
    fail("batch_norm", "running buffer not initialized for " + std::to_string(ch) +
                           " channels");
  }
  Tape& t = *x.tape();
  const int hw = h * w;
  const std::size_t m = static_cast<std::size_t>(batch) * hw;  // per channel
  const auto xv = x.value();
  const auto gv = gamma.value();
  const auto bv = beta.value();

  std::vector<double> xhat(xv.size());
  std::vector<double> invstd(static_cast<std::size_t>(ch));
  if (training) {
    for (int c = 0; c < ch; ++c) {
      double mu = 0.0;
      for (int nimg = 0; nimg < batch; ++nimg) {
        const double* xc = xv.data() + (static_cast<std::size_t>(nimg) * ch + c) * hw;
        for (int i = 0; i < hw; ++i) mu += xc[i];
      }
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (int nimg = 0; nimg < batch; ++nimg) {
        const double* xc = xv.data() + (static_cast<std::size_t>(nimg) * ch + c) * hw;
        for (int i = 0; i < hw; ++i) {
          const double dxi = xc[i] - mu;
          var += dxi * dxi;
        }
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      invstd[static_cast<std::size_t>(c)] = is;
      for (int nimg = 0; nimg < batch; ++nimg) {
        const std::size_t off = (static_cast<std::size_t>(nimg) * ch + c) * hw;
        for (int i = 0; i < hw; ++i) xhat[off + i] = (xv[off + i] - mu) * is;
      }
      buf.running_mean[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * buf.running_mean[static_cast<std::size_t>(c)] + momentum * mu;
      buf.running_var[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * buf.running_var[static_cast<std::size_t>(c)] + momentum * var;
    }
  } else {
    for (int c = 0; c < ch; ++c) {
      const double mu = buf.running_mean[static_cast<std::size_t>(c)];
      const double is = 1.0 / std::sqrt(buf.running_var[static_cast<std::size_t>(c)] + eps);
      invstd[static_cast<std::size_t>(c)] = is;
      for (int nimg = 0; nimg < batch; ++nimg) {
        const std::size_t off = (static_cast<std::size_t>(nimg) * ch + c) * hw;
        for (int i = 0; i < hw; ++i) xhat[off + i] = (xv[off + i] - mu) * is;
      }
    }
  }

  Tape::Node out;
  out.shape = s;
  out.value.resize(xv.size());
  for (int c = 0; c < ch; ++c) {
    const double ga = gv[static_cast<std::size_t>(c)];
    const double be = bv[static_cast<std::size_t>(c)];
    for (int nimg = 0; nimg < batch; ++nimg) {
      const std::size_t off = (static_cast<std::size_t>(nimg) * ch + c) * hw;
      for (int i = 0; i < hw; ++i) out.value[off + i] = ga * xhat[off + i] + be;
    }
  }
  out.op = "batch_norm";
  out.requires_grad = any_requires({&x, &gamma, &beta});
  out.parents = {x.id(), gamma.id(), beta.id()};
  const int xid = x.id(), gid = gamma.id(), bid = beta.id();
  out.back = [xid, gid, bid, batch, ch, hw, m, training, xhat = std::move(xhat),
              invstd = std::move(invstd)](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    const auto gv2 = tp.node(gid).value;
    auto gx = ctx.accum(tp, xid);
    auto gg = ctx.accum(tp, gid);
    auto gb = ctx.accum(tp, bid);
    for (int c = 0; c < ch; ++c) {
      const double ga = gv2[static_cast<std::size_t>(c)];
      const double is = invstd[static_cast<std::size_t>(c)];
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0, sum_g = 0.0, sum_g_xhat = 0.0;
      for (int nimg = 0; nimg < batch; ++nimg) {
        const std::size_t off = (static_cast<std::size_t>(nimg) * ch + c) * hw;
        for (int i = 0; i < hw; ++i) {
          const double go = g[off + i];
          const double dxh = go * ga;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat[off + i];
          sum_g += go;
          sum_g_xhat += go * xhat[off + i];
        }
      }
      gg[static_cast<std::size_t>(c)] += sum_g_xhat;
      gb[static_cast<std::size_t>(c)] += sum_g;
      if (training) {
        const double inv_m = 1.0 / static_cast<double>(m);
        for (int nimg = 0; nimg < batch; ++nimg) {
          const std::size_t off = (static_cast<std::size_t>(nimg) * ch + c) * hw;
          for (int i = 0; i < hw; ++i) {
            const double dxh = g[off + i] * ga;
            gx[off + i] +=
                is * (dxh - inv_m * sum_dxhat - xhat[off + i] * inv_m * sum_dxhat_xhat);
          }
        }
      } else {
        for (int nimg = 0; nimg < batch; ++nimg) {
          const std::size_t off = (static_cast<std::size_t>(nimg) * ch + c) * hw;
          for (int i = 0; i < hw; ++i) gx[off + i] += g[off + i] * ga * is;
        }
      }
    }
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor avg_pool(const Tensor& x, int window, int stride) {
  const auto& s = x.shape();
  if (s.size() != 4) fail("avg_pool", "input must be NCHW, got " + shape_str(s));
  if (window < 1 || stride < 1) fail("avg_pool", "invalid window/stride");
  const int batch = s[0], ch = s[1], h = s[2], w = s[3];
  const int ho = (h - window) / stride + 1;
  const int wo = (w - window) / stride + 1;
  if (ho <= 0 || wo <= 0) {
    fail("avg_pool", "window " + std::to_string(window) + " does not fit " + shape_str(s));
  }
  Tape& t = *x.tape();
  Tape::Node out;
  out.shape = {batch, ch, ho, wo};
  out.value.assign(static_cast<std::size_t>(batch) * ch * ho * wo, 0.0);
  const auto xv = x.value();
  const double inv = 1.0 / (static_cast<double>(window) * window);
  for (int nimg = 0; nimg < batch; ++nimg) {
    for (int c = 0; c < ch; ++c) {
      const double* xc = xv.data() + (static_cast<std::size_t>(nimg) * ch + c) * h * w;
      double* oc = out.value.data() +
                   (static_cast<std::size_t>(nimg) * ch + c) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < window; ++ky) {
            for (int kx = 0; kx < window; ++kx) {
              acc += xc[(oy * stride + ky) * w + ox * stride + kx];
            }
          }
          oc[oy * wo + ox] = acc * inv;
        }
      }
    }
  }
  out.op = "avg_pool";
  out.requires_grad = x.requires_grad();
  out.parents = {x.id()};
  const int xid = x.id();
  out.back = [xid, batch, ch, h, w, ho, wo, window, stride, inv](Tape& tp, int self,
                                                                 BackCtx& ctx) {
    const auto g = ctx.at(self);
    auto gx = ctx.accum(tp, xid);
    for (int nimg = 0; nimg < batch; ++nimg) {
      for (int c = 0; c < ch; ++c) {
        double* gxc = gx.data() + (static_cast<std::size_t>(nimg) * ch + c) * h * w;
        const double* gc =
            g.data() + (static_cast<std::size_t>(nimg) * ch + c) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const double go = gc[oy * wo + ox] * inv;
            for (int ky = 0; ky < window; ++ky) {
              for (int kx = 0; kx < window; ++kx) {
                gxc[(oy * stride + ky) * w + ox * stride + kx] += go;
              }
            }
          }
        }
      }
    }
  };
  return t.handle(t.emit(std::move(out)));
}

Tensor global_avg_pool(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 4) fail("global_avg_pool", "input must be NCHW, got " + shape_str(s));
  const int batch = s[0], ch = s[1], hw = s[2] * s[3];
  Tape& t = *x.tape();
  Tape::Node out;
  out.shape = {batch, ch};
  out.value.resize(static_cast<std::size_t>(batch) * ch);
  const auto xv = x.value();
  const double inv = 1.0 / static_cast<double>(hw);
  for (int nimg = 0; nimg < batch; ++nimg) {
    for (int c = 0; c < ch; ++c) {
      const double* xc = xv.data() + (static_cast<std::size_t>(nimg) * ch + c) * hw;
      double acc = 0.0;
      for (int i = 0; i < hw; ++i) acc += xc[i];
      out.value[static_cast<std::size_t>(nimg) * ch + c] = acc * inv;
    }
  }
  out.op = "global_avg_pool";
  out.requires_grad = x.requires_grad();
  out.parents = {x.id()};
  const int xid = x.id();
  out.back = [xid, batch, ch, hw, inv](Tape& tp, int self, BackCtx& ctx) {
    const auto g = ctx.at(self);
    auto gx = ctx.accum(tp, xid);
    for (int nimg = 0; nimg < batch; ++nimg) {
      for (int c = 0; c < ch; ++c) {
        const double go = g[static_cast<std::size_t>(nimg) * ch + c] * inv;
        double* gxc = gx.data() + (static_cast<std::size_t>(nimg) * ch + c) * hw;
        for (int i = 0; i < hw; ++i) gxc[i] += go;
      }
    }
  };
  return t.handle(t.emit(std::move(out)));
}

FdCheckResult finite_diff_check(const FdFunc& f, std::vector<double> params,
                                double tol, double step) {
  std::vector<double> analytic;
  const double base = f(params, &analytic);
  if (!std::isfinite(base)) {
    throw std::runtime_error("finite_diff_check: objective is non-finite");
  }
  if (analytic.size() != params.size()) {
    throw std::runtime_error("finite_diff_check: gradient size mismatch");
  }
  FdCheckResult res;
  res.pass = true;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + step;
    const double fp = f(params, nullptr);
    params[i] = keep - step;
    const double fm = f(params, nullptr);
    params[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_diff_check: objective is non-finite");
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    res.max_rel_err = std::max(res.max_rel_err, rel);
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

}  // namespace rankuda::ad
