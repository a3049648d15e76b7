#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "emac/rng.hpp"

namespace emac {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated (zeros) iff requires_grad
  bool requires_grad = false;
};

class Tensor;

// Ordered record of executed operations. Recording happens during the
// forward pass, so inputs always precede the ops that consume them; the
// backward sweep walks the records in reverse exactly once.
class Tape {
 public:
  void record(std::function<void()> fn) {
    if (consumed_) throw std::logic_error("tape: cannot record after backward");
    records_.push_back(std::move(fn));
  }

  size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* t = nullptr;
  return t;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &t;
  }
  ~TapeScope() { detail::active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Value-semantic handle over a shared node. Copies alias the same storage,
// which is what the tape closures rely on.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = s;
    n->data.assign(static_cast<size_t>(shape_numel(s)), 0.0);
    set_requires_grad(*n, requires_grad);
    return Tensor(std::move(n));
  }

  static Tensor full(const Shape& s, double v, bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (auto& x : t.data()) x = v;
    return t;
  }

  static Tensor from(const Shape& s, std::vector<double> values,
                     bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape_numel(s))
      throw std::invalid_argument("tensor: data length does not match shape " +
                                  shape_str(s));
    auto n = std::make_shared<TensorNode>();
    n->shape = s;
    n->data = std::move(values);
    set_requires_grad(*n, requires_grad);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor randn(const Shape& s, RngStream& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (auto& x : t.data()) x = rng.normal() * stddev;
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  int rows() const { return require_2d().shape[0]; }
  int cols() const { return require_2d().shape[1]; }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  std::vector<double>& grad() { return node_->grad; }
  const std::vector<double>& grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }

  double value() const {
    if (numel() != 1) throw std::logic_error("value(): tensor is not a scalar");
    return node_->data[0];
  }

  double at(int r, int c) const {
    const auto& n = require_2d();
    return n.data[static_cast<size_t>(r) * n.shape[1] + c];
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  static void set_requires_grad(TensorNode& n, bool rg) {
    n.requires_grad = rg;
    if (rg) n.grad.assign(n.data.size(), 0.0);
  }

  const TensorNode& require_2d() const {
    if (node_->shape.size() != 2)
      throw std::logic_error("expected a 2-d tensor, got shape " +
                             shape_str(node_->shape));
    return *node_;
  }

  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline bool taping_for(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_output(const Shape& s, bool taped) {
  return Tensor::zeros(s, taped);
}

inline void record(std::function<void()> fn) { active_tape()->record(std::move(fn)); }

inline void accumulate(TensorNode& n, const std::vector<double>& g) {
  for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

}  // namespace detail

inline void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("tape: backward already ran");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  if (loss.requires_grad()) loss.node()->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  records_.clear();
  consumed_ = true;
}

inline void backward(const Tensor& loss) {
  if (!active_tape()) throw std::logic_error("backward: no active tape");
  active_tape()->backward(loss);
}

// ---------------------------------------------------------------------------
// elementwise / scalar ops

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const bool taped = detail::taping_for({&a, &b});
  Tensor out = detail::make_output(a.shape(), taped);
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (taped) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record([an, bn, on] {
      if (an->requires_grad) detail::accumulate(*an, on->grad);
      if (bn->requires_grad) detail::accumulate(*bn, on->grad);
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const bool taped = detail::taping_for({&a, &b});
  Tensor out = detail::make_output(a.shape(), taped);
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (taped) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record([an, bn, on] {
      if (an->requires_grad) detail::accumulate(*an, on->grad);
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const bool taped = detail::taping_for({&a, &b});
  Tensor out = detail::make_output(a.shape(), taped);
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (taped) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record([an, bn, on] {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->data[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->data[i];
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output(a.shape(), taped);
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + s;
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on] { detail::accumulate(*an, on->grad); });
  }
  return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output(a.shape(), taped);
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on, s] {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
    });
  }
  return out;
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// matmul / layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const bool taped = detail::taping_for({&a, &b});
  Tensor out = detail::make_output({m, n}, taped);
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const double av = pa[i * k + kk];
        const double* prow = pb + kk * n;
        double* orow = po + i * n;
        for (int j = 0; j < n; ++j) orow[j] += av * prow[j];
      }
  }
  if (taped) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record([an, bn, on, m, k, n] {
      const double* g = on->grad.data();
      if (an->requires_grad) {  // dA = dC . B^T as row dot products
        double* da = an->grad.data();
        const double* pb = bn->data.data();
        for (int i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          for (int kk = 0; kk < k; ++kk) {
            const double* brow = pb + kk * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            da[i * k + kk] += s;
          }
        }
      }
      if (bn->requires_grad) {  // dB = A^T . dC
        double* db = bn->grad.data();
        const double* pa = an->data.data();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* grow = g + i * n;
            double* brow = db + kk * n;
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output({n, m}, taped);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on, m, n] {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel())
    throw std::invalid_argument("reshape: size mismatch " + shape_str(a.shape()) +
                                " -> " + shape_str(s));
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output(s, taped);
  out.data() = a.data();
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on] { detail::accumulate(*an, on->grad); });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  const int other = parts[0].shape().size() == 2 ? parts[0].dim(1 - axis) : -1;
  if (other < 0) throw std::invalid_argument("concat: expects 2-d tensors");
  int total = 0;
  bool taped = false;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(1 - axis) != other)
      throw std::invalid_argument("concat: mismatched shapes");
    total += p.dim(axis);
    if (active_tape() && p.requires_grad()) taped = true;
  }
  Shape os = axis == 0 ? Shape{total, other} : Shape{other, total};
  Tensor out = detail::make_output(os, taped);
  int off = 0;
  for (const auto& p : parts) {
    const int r = p.rows(), c = p.cols();
    if (axis == 0) {
      std::copy(p.data().begin(), p.data().end(), out.data().begin() + off * c);
      off += r;
    } else {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.data()[i * total + off + j] = p.at(i, j);
      off += c;
    }
  }
  if (taped) {
    std::vector<std::shared_ptr<TensorNode>> inputs;
    for (const auto& p : parts) inputs.push_back(p.node());
    auto on = out.node();
    detail::record([inputs, on, axis, total, other] {
      int off = 0;
      for (const auto& in : inputs) {
        const int r = in->shape[0], c = in->shape[1];
        if (in->requires_grad) {
          if (axis == 0) {
            for (int64_t i = 0; i < int64_t(r) * c; ++i)
              in->grad[i] += on->grad[off * c + i];
          } else {
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < c; ++j)
                in->grad[i * c + j] += on->grad[i * total + off + j];
          }
        }
        off += (axis == 0) ? r : c;
      }
    });
  }
  return out;
}

inline std::vector<Tensor> split(const Tensor& a, int n_parts, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("split: axis must be 0 or 1");
  if (a.shape().size() != 2) throw std::invalid_argument("split: expects a 2-d tensor");
  const int extent = a.dim(axis);
  if (n_parts <= 0 || extent % n_parts != 0)
    throw std::invalid_argument("split: extent " + std::to_string(extent) +
                                " not divisible into " + std::to_string(n_parts));
  const int step = extent / n_parts;
  const int r = a.rows(), c = a.cols();
  const bool taped = detail::taping_for({&a});
  std::vector<Tensor> parts;
  for (int p = 0; p < n_parts; ++p) {
    Shape ps = axis == 0 ? Shape{step, c} : Shape{r, step};
    Tensor out = detail::make_output(ps, taped);
    if (axis == 0) {
      std::copy(a.data().begin() + int64_t(p) * step * c,
                a.data().begin() + int64_t(p + 1) * step * c, out.data().begin());
    } else {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < step; ++j)
          out.data()[i * step + j] = a.data()[i * c + p * step + j];
    }
    if (taped) {
      auto an = a.node(), on = out.node();
      detail::record([an, on, p, step, r, c, axis] {
        if (!an->requires_grad) return;
        if (axis == 0) {
          for (int64_t i = 0; i < int64_t(step) * c; ++i)
            an->grad[int64_t(p) * step * c + i] += on->grad[i];
        } else {
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < step; ++j)
              an->grad[i * c + p * step + j] += on->grad[i * step + j];
        }
      });
    }
    parts.push_back(out);
  }
  return parts;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  const int r = a.rows(), c = a.cols();
  for (int i : idx)
    if (i < 0 || i >= r)
      throw std::out_of_range("gather_rows: index " + std::to_string(i) +
                              " out of range [0," + std::to_string(r) + ")");
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output({static_cast<int>(idx.size()), c}, taped);
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(a.data().begin() + int64_t(idx[k]) * c,
              a.data().begin() + int64_t(idx[k] + 1) * c,
              out.data().begin() + int64_t(k) * c);
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on, idx, c] {
      if (!an->requires_grad) return;
      for (size_t k = 0; k < idx.size(); ++k)
        for (int j = 0; j < c; ++j)
          an->grad[int64_t(idx[k]) * c + j] += on->grad[int64_t(k) * c + j];
    });
  }
  return out;
}

// places src row k at output row idx[k]; all other rows zero
inline Tensor scatter_rows(const Tensor& src, const std::vector<int>& idx, int n_rows) {
  const int r = src.rows(), c = src.cols();
  if (static_cast<int>(idx.size()) != r)
    throw std::invalid_argument("scatter_rows: index list length " +
                                std::to_string(idx.size()) + " != rows " +
                                std::to_string(r));
  for (int i : idx)
    if (i < 0 || i >= n_rows)
      throw std::out_of_range("scatter_rows: index " + std::to_string(i) +
                              " out of range [0," + std::to_string(n_rows) + ")");
  const bool taped = detail::taping_for({&src});
  Tensor out = detail::make_output({n_rows, c}, taped);
  for (int k = 0; k < r; ++k)
    std::copy(src.data().begin() + int64_t(k) * c,
              src.data().begin() + int64_t(k + 1) * c,
              out.data().begin() + int64_t(idx[k]) * c);
  if (taped) {
    auto sn = src.node(), on = out.node();
    detail::record([sn, on, idx, c] {
      if (!sn->requires_grad) return;
      for (size_t k = 0; k < idx.size(); ++k)
        for (int j = 0; j < c; ++j)
          sn->grad[int64_t(k) * c + j] += on->grad[int64_t(idx[k]) * c + j];
    });
  }
  return out;
}

// repeats a 1xC row n times
inline Tensor broadcast_rows(const Tensor& row, int n) {
  if (row.shape().size() != 2 || row.rows() != 1)
    throw std::invalid_argument("broadcast_rows: expects a 1xC tensor, got " +
                                shape_str(row.shape()));
  const int c = row.cols();
  const bool taped = detail::taping_for({&row});
  Tensor out = detail::make_output({n, c}, taped);
  for (int i = 0; i < n; ++i)
    std::copy(row.data().begin(), row.data().end(), out.data().begin() + int64_t(i) * c);
  if (taped) {
    auto rn = row.node(), on = out.node();
    detail::record([rn, on, n, c] {
      if (!rn->requires_grad) return;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) rn->grad[j] += on->grad[int64_t(i) * c + j];
    });
  }
  return out;
}

// a[i, j] + row[0, j]
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.shape().size() != 2 || row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("add_row: bias shape " + shape_str(row.shape()) +
                                " does not match " + shape_str(a.shape()));
  const int r = a.rows(), c = a.cols();
  const bool taped = detail::taping_for({&a, &row});
  Tensor out = detail::make_output({r, c}, taped);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data()[i * c + j] = a.data()[i * c + j] + row.data()[j];
  if (taped) {
    auto an = a.node(), rn = row.node(), on = out.node();
    detail::record([an, rn, on, r, c] {
      if (an->requires_grad) detail::accumulate(*an, on->grad);
      if (rn->requires_grad)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) rn->grad[j] += on->grad[int64_t(i) * c + j];
    });
  }
  return out;
}

// rows [r0, r1) and cols [c0, c1) of a 2-d tensor
inline Tensor slice2d(const Tensor& a, int r0, int r1, int c0, int c1) {
  const int r = a.rows(), c = a.cols();
  if (r0 < 0 || r1 > r || c0 < 0 || c1 > c || r0 >= r1 || c0 >= c1)
    throw std::invalid_argument("slice2d: bad range");
  const int sr = r1 - r0, sc = c1 - c0;
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output({sr, sc}, taped);
  for (int i = 0; i < sr; ++i)
    for (int j = 0; j < sc; ++j)
      out.data()[i * sc + j] = a.data()[(r0 + i) * c + c0 + j];
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on, r0, c0, sr, sc, c] {
      if (!an->requires_grad) return;
      for (int i = 0; i < sr; ++i)
        for (int j = 0; j < sc; ++j)
          an->grad[(r0 + i) * c + c0 + j] += on->grad[i * sc + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / nonlinearities

inline Tensor sum(const Tensor& a) {
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output({1}, taped);
  double s = 0.0;
  for (double v : a.data()) s += v;
  out.data()[0] = s;
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on] {
      const double g = on->grad[0];
      for (auto& v : an->grad) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor gelu(const Tensor& a) {
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output(a.shape(), taped);
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on] {
      constexpr double inv_sqrt2 = 0.7071067811865475244;
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (size_t i = 0; i < on->grad.size(); ++i) {
        const double x = an->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        an->grad[i] += on->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// softmax over the last dimension, max-subtracted for stability
inline Tensor softmax_lastdim(const Tensor& a) {
  if (a.shape().empty()) throw std::invalid_argument("softmax: empty shape");
  const int n = a.shape().back();
  const int64_t slices = a.numel() / n;
  const bool taped = detail::taping_for({&a});
  Tensor out = detail::make_output(a.shape(), taped);
  for (int64_t s = 0; s < slices; ++s) {
    const double* x = a.data().data() + s * n;
    double* y = out.data().data() + s * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < n; ++j) y[j] /= z;
  }
  if (taped) {
    auto an = a.node(), on = out.node();
    detail::record([an, on, n, slices] {
      if (!an->requires_grad) return;
      for (int64_t s = 0; s < slices; ++s) {
        const double* y = on->data.data() + s * n;
        const double* gy = on->grad.data() + s * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
        double* gx = an->grad.data() + s * n;
        for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

// per-slice normalization over the last dimension, then affine
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (x.shape().empty()) throw std::invalid_argument("layer_norm: empty shape");
  const int d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw std::invalid_argument("layer_norm: gamma/beta must have shape [" +
                                std::to_string(d) + "]");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const int64_t slices = x.numel() / d;
  const bool taped = detail::taping_for({&x, &gamma, &beta});
  Tensor out = detail::make_output(x.shape(), taped);
  std::vector<double> inv_std(slices), means(slices);
  for (int64_t s = 0; s < slices; ++s) {
    const double* xs = x.data().data() + s * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xs[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xs[j] - mu) * (xs[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    means[s] = mu;
    inv_std[s] = is;
    double* ys = out.data().data() + s * d;
    for (int j = 0; j < d; ++j)
      ys[j] = (xs[j] - mu) * is * gamma.data()[j] + beta.data()[j];
  }
  if (taped) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    detail::record([xn, gn, bn, on, d, slices, means, inv_std] {
      for (int64_t s = 0; s < slices; ++s) {
        const double* xs = xn->data.data() + s * d;
        const double* gy = on->grad.data() + s * d;
        const double mu = means[s], is = inv_std[s];
        if (gn->requires_grad || bn->requires_grad) {
          for (int j = 0; j < d; ++j) {
            const double xhat = (xs[j] - mu) * is;
            if (gn->requires_grad) gn->grad[j] += gy[j] * xhat;
            if (bn->requires_grad) bn->grad[j] += gy[j];
          }
        }
        if (xn->requires_grad) {
          double m1 = 0.0, m2 = 0.0;  // mean(g*gamma), mean(g*gamma*xhat)
          for (int j = 0; j < d; ++j) {
            const double gg = gy[j] * gn->data[j];
            const double xhat = (xs[j] - mu) * is;
            m1 += gg;
            m2 += gg * xhat;
          }
          m1 /= d;
          m2 /= d;
          double* gx = xn->grad.data() + s * d;
          for (int j = 0; j < d; ++j) {
            const double gg = gy[j] * gn->data[j];
            const double xhat = (xs[j] - mu) * is;
            gx[j] += (gg - m1 - xhat * m2) * is;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// patch layout: h x w map <-> (h/p * w/p) x p^2 patch rows, row-major patches

inline Tensor patchify_op(const Tensor& map, int p) {
  if (map.shape().size() != 2)
    throw std::invalid_argument("patchify: expects a 2-d map");
  const int h = map.rows(), w = map.cols();
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw std::invalid_argument("patchify: map " + shape_str(map.shape()) +
                                " not tileable by patch " + std::to_string(p));
  const int gr = h / p, gc = w / p, n = gr * gc;
  const bool taped = detail::taping_for({&map});
  Tensor out = detail::make_output({n, p * p}, taped);
  for (int t = 0; t < n; ++t) {
    const int pr = t / gc, pc = t % gc;
    for (int r = 0; r < p; ++r)
      for (int c = 0; c < p; ++c)
        out.data()[int64_t(t) * p * p + r * p + c] =
            map.data()[int64_t(pr * p + r) * w + pc * p + c];
  }
  if (taped) {
    auto mn = map.node(), on = out.node();
    detail::record([mn, on, p, w, gc, n] {
      if (!mn->requires_grad) return;
      for (int t = 0; t < n; ++t) {
        const int pr = t / gc, pc = t % gc;
        for (int r = 0; r < p; ++r)
          for (int c = 0; c < p; ++c)
            mn->grad[int64_t(pr * p + r) * w + pc * p + c] +=
                on->grad[int64_t(t) * p * p + r * p + c];
      }
    });
  }
  return out;
}

inline Tensor unpatchify_op(const Tensor& patches, int grid_rows, int grid_cols, int p) {
  if (patches.shape().size() != 2 || patches.rows() != grid_rows * grid_cols ||
      patches.cols() != p * p)
    throw std::invalid_argument("unpatchify: tokens " + shape_str(patches.shape()) +
                                " do not form a " + std::to_string(grid_rows) + "x" +
                                std::to_string(grid_cols) + " grid of patch " +
                                std::to_string(p));
  const int h = grid_rows * p, w = grid_cols * p, n = grid_rows * grid_cols;
  const bool taped = detail::taping_for({&patches});
  Tensor out = detail::make_output({h, w}, taped);
  for (int t = 0; t < n; ++t) {
    const int pr = t / grid_cols, pc = t % grid_cols;
    for (int r = 0; r < p; ++r)
      for (int c = 0; c < p; ++c)
        out.data()[int64_t(pr * p + r) * w + pc * p + c] =
            patches.data()[int64_t(t) * p * p + r * p + c];
  }
  if (taped) {
    auto pn = patches.node(), on = out.node();
    detail::record([pn, on, p, w, grid_cols, n] {
      if (!pn->requires_grad) return;
      for (int t = 0; t < n; ++t) {
        const int pr = t / grid_cols, pc = t % grid_cols;
        for (int r = 0; r < p; ++r)
          for (int c = 0; c < p; ++c)
            pn->grad[int64_t(t) * p * p + r * p + c] +=
                on->grad[int64_t(pr * p + r) * w + pc * p + c];
      }
    });
  }
  return out;
}

}  // namespace emac
