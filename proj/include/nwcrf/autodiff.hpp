#pragma once

#include <Eigen/Core>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "nwcrf/tensor.hpp"

namespace nwcrf {

class Tape;

// Lightweight handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;
};

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstMatMap as_matrix(const Tensor& t, int64_t rows, int64_t cols) {
  return ConstMatMap(t.data(), rows, cols);
}
inline MatMap as_matrix(Tensor& t, int64_t rows, int64_t cols) {
  return MatMap(t.data(), rows, cols);
}

// Reverse-mode tape. Forward values are stored eagerly; each differentiable
// operation records a closure that pushes the output gradient back to its
// inputs. One tape serves one forward/backward pass and is then discarded.
class Tape {
 public:
  Var leaf(Tensor value) { return Var{this, emit(std::move(value), true)}; }
  Var constant(Tensor value) { return Var{this, emit(std::move(value), false)}; }

  const Tensor& value(Var v) const { return values_[static_cast<size_t>(v.id)]; }

  // Gradient accumulated so far; zeros if the variable was never reached.
  const Tensor& grad(Var v) { return grad_ref(v.id); }

  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss from a different tape");
    if (value(loss).numel() != 1) throw ContractError("backward: loss is not scalar");
    // Each pass propagates on fresh buffers and merges at the end, so
    // repeated calls accumulate one unit of seed each.
    std::vector<std::unique_ptr<Tensor>> previous;
    previous.swap(grads_);
    grads_.resize(values_.size());
    grad_ref(loss.id)[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
    for (size_t i = 0; i < previous.size(); ++i) {
      if (!previous[i]) continue;
      if (grads_[i])
        for (int64_t j = 0; j < grads_[i]->numel(); ++j) (*grads_[i])[j] += (*previous[i])[j];
      else
        grads_[i] = std::move(previous[i]);
    }
  }

  size_t num_ops() const { return ops_.size(); }

  // -- recording interface used by the operations below
  int32_t emit(Tensor value, bool needs_grad) {
    values_.push_back(std::move(value));
    grads_.emplace_back(nullptr);
    needs_grad_.push_back(needs_grad);
    return static_cast<int32_t>(values_.size() - 1);
  }

  void record(std::function<void(Tape&)> fn) { ops_.push_back(std::move(fn)); }

  bool needs_grad(int32_t id) const { return needs_grad_[static_cast<size_t>(id)]; }

  const Tensor& val(int32_t id) const { return values_[static_cast<size_t>(id)]; }

  Tensor& grad_ref(int32_t id) {
    auto& slot = grads_[static_cast<size_t>(id)];
    if (!slot) slot = std::make_unique<Tensor>(values_[static_cast<size_t>(id)].extents());
    return *slot;
  }

 private:
  std::vector<Tensor> values_;
  std::vector<std::unique_ptr<Tensor>> grads_;
  std::vector<bool> needs_grad_;
  std::vector<std::function<void(Tape&)>> ops_;
};

namespace detail {

inline Tape* common_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (Var v : vars) {
    if (!v.tape) throw ContractError("operation on a default-constructed Var");
    if (t && v.tape != t) throw ContractError("operands live on different tapes");
    t = v.tape;
  }
  return t;
}

inline bool any_needs_grad(Tape& t, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (t.needs_grad(v.id)) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

inline Var add(Var a, Var b) {
  Tape& t = *detail::common_tape({a, b});
  require_same_extents(t.value(a), t.value(b), "add");
  Tensor out = t.value(a) + t.value(b);
  Var r{&t, t.emit(std::move(out), detail::any_needs_grad(t, {a, b}))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, bi = b.id, oi = r.id](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      if (tp.needs_grad(ai)) {
        Tensor& ga = tp.grad_ref(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (tp.needs_grad(bi)) {
        Tensor& gb = tp.grad_ref(bi);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
      }
    });
  return r;
}

inline Var sub(Var a, Var b) {
  Tape& t = *detail::common_tape({a, b});
  require_same_extents(t.value(a), t.value(b), "sub");
  Tensor out = t.value(a) - t.value(b);
  Var r{&t, t.emit(std::move(out), detail::any_needs_grad(t, {a, b}))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, bi = b.id, oi = r.id](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      if (tp.needs_grad(ai)) {
        Tensor& ga = tp.grad_ref(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (tp.needs_grad(bi)) {
        Tensor& gb = tp.grad_ref(bi);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    });
  return r;
}

inline Var mul(Var a, Var b) {
  Tape& t = *detail::common_tape({a, b});
  require_same_extents(t.value(a), t.value(b), "mul");
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  Tensor out(av.extents());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  Var r{&t, t.emit(std::move(out), detail::any_needs_grad(t, {a, b}))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, bi = b.id, oi = r.id](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      const Tensor& av2 = tp.val(ai);
      const Tensor& bv2 = tp.val(bi);
      if (tp.needs_grad(ai)) {
        Tensor& ga = tp.grad_ref(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (tp.needs_grad(bi)) {
        Tensor& gb = tp.grad_ref(bi);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
      }
    });
  return r;
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = c * t.value(a);
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id, c](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
  return r;
}

inline Var add_scalar(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  return r;
}

template <class Fwd, class Bwd>
inline Var unary_elementwise(Var a, Fwd fwd, Bwd dfd, const char* /*name*/) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  Tensor out(av.extents());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(av[i]);
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id, dfd](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      const Tensor& x = tp.val(ai);
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * dfd(x[i]);
    });
  return r;
}

inline Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_elementwise(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      },
      "gelu");
}

inline Var sigmoid(Var a) {
  return unary_elementwise(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double x) {
        double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 - s);
      },
      "sigmoid");
}

inline Var log_elem(Var a) {
  const Tensor& av = a.tape->value(a);
  for (int64_t i = 0; i < av.numel(); ++i)
    if (av[i] <= 0.0) throw DomainError("log of nonpositive value " + std::to_string(av[i]));
  return unary_elementwise(
      a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; }, "log");
}

// sqrt clamped at zero: tiny negative inputs (roundoff from a mathematically
// nonnegative expression) map to 0, real negatives are a domain error.
inline Var sqrt_clamped(Var a) {
  const Tensor& av = a.tape->value(a);
  for (int64_t i = 0; i < av.numel(); ++i)
    if (av[i] < -1e-9) throw DomainError("sqrt of negative value " + std::to_string(av[i]));
  return unary_elementwise(
      a, [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; },
      [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; }, "sqrt");
}

inline Var clamp(Var a, double lo, double hi) {
  return unary_elementwise(
      a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; }, "clamp");
}

// ---------------------------------------------------------------------------
// linear algebra

inline Var matmul(Var a, Var b) {
  Tape& t = *detail::common_tape({a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(0))
    throw ShapeError("matmul: extents " + extents_str(av.extents()) + " x " +
                     extents_str(bv.extents()));
  int64_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
  Tensor out({m, n});
  as_matrix(out, m, n).noalias() = as_matrix(av, m, k) * as_matrix(bv, k, n);
  Var r{&t, t.emit(std::move(out), detail::any_needs_grad(t, {a, b}))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, bi = b.id, oi = r.id, m, k, n](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      auto gm = as_matrix(g, m, n);
      if (tp.needs_grad(ai)) {
        Tensor& ga = tp.grad_ref(ai);
        as_matrix(ga, m, k).noalias() += gm * as_matrix(tp.val(bi), k, n).transpose();
      }
      if (tp.needs_grad(bi)) {
        Tensor& gb = tp.grad_ref(bi);
        as_matrix(gb, k, n).noalias() += as_matrix(tp.val(ai), m, k).transpose() * gm;
      }
    });
  return r;
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw ShapeError("transpose: rank-2 required, got " + extents_str(av.extents()));
  int64_t m = av.extent(0), n = av.extent(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id, m, n](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
    });
  return r;
}

// [r x c] plus a length-c row vector broadcast over rows.
inline Var add_rows(Var a, Var rowvec) {
  Tape& t = *detail::common_tape({a, rowvec});
  const Tensor& av = t.value(a);
  const Tensor& vv = t.value(rowvec);
  if (av.rank() != 2 || vv.rank() != 1 || vv.extent(0) != av.extent(1))
    throw ShapeError("add_rows: extents " + extents_str(av.extents()) + " + " +
                     extents_str(vv.extents()));
  int64_t r0 = av.extent(0), c = av.extent(1);
  Tensor out = av;
  for (int64_t i = 0; i < r0; ++i)
    for (int64_t j = 0; j < c; ++j) out.at(i, j) += vv[j];
  Var r{&t, t.emit(std::move(out), detail::any_needs_grad(t, {a, rowvec}))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, vi = rowvec.id, oi = r.id, r0, c](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      if (tp.needs_grad(ai)) {
        Tensor& ga = tp.grad_ref(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (tp.needs_grad(vi)) {
        Tensor& gv = tp.grad_ref(vi);
        for (int64_t i = 0; i < r0; ++i)
          for (int64_t j = 0; j < c; ++j) gv[j] += g.at(i, j);
      }
    });
  return r;
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (int64_t i = 0; i < av.numel(); ++i) s += av[i];
  Var r{&t, t.emit(Tensor::scalar(s), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id](Tape& tp) {
      double g = tp.grad_ref(oi)[0];
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  return r;
}

inline Var reshape(Var a, Extents extents) {
  Tape& t = *a.tape;
  Tensor out = t.value(a).reshaped(std::move(extents));
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  return r;
}

// ---------------------------------------------------------------------------
// softmax

// Row-wise stabilized softmax. mask, when given, is a 0/1 tensor of the same
// extents; masked entries get exactly zero weight. A row with no unmasked
// entry is degenerate.
inline Var softmax_rows(Var logits, const Tensor* mask = nullptr) {
  Tape& t = *logits.tape;
  const Tensor& lv = t.value(logits);
  if (lv.rank() != 2) throw ShapeError("softmax_rows: rank-2 required, got " + extents_str(lv.extents()));
  if (mask && !mask->same_extents(lv))
    throw ShapeError("softmax_rows: mask extents " + extents_str(mask->extents()) + " vs logits " +
                     extents_str(lv.extents()));
  int64_t r0 = lv.extent(0), c = lv.extent(1);
  Tensor out({r0, c});
  for (int64_t i = 0; i < r0; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j)
      if (!mask || mask->at(i, j) != 0.0) mx = std::max(mx, lv.at(i, j));
    if (!std::isfinite(mx)) throw DegenerateError("softmax_rows: fully masked row " + std::to_string(i));
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double e = (!mask || mask->at(i, j) != 0.0) ? std::exp(lv.at(i, j) - mx) : 0.0;
      out.at(i, j) = e;
      s += e;
    }
    for (int64_t j = 0; j < c; ++j) out.at(i, j) /= s;
  }
  Var r{&t, t.emit(std::move(out), t.needs_grad(logits.id))};
  if (t.needs_grad(r.id))
    t.record([li = logits.id, oi = r.id, r0, c](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      const Tensor& y = tp.val(oi);
      Tensor& gl = tp.grad_ref(li);
      for (int64_t i = 0; i < r0; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
        for (int64_t j = 0; j < c; ++j) gl.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    });
  return r;
}

// ---------------------------------------------------------------------------
// convolution (H x W x Cin), odd square kernel, zero padding k/2

namespace detail {

inline void im2col(const Tensor& input, int64_t k, int64_t stride, Tensor& col, int64_t oh,
                   int64_t ow) {
  int64_t h = input.extent(0), w = input.extent(1), ci = input.extent(2);
  int64_t pad = k / 2;
  double* cp = col.data();
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox)
      for (int64_t ky = 0; ky < k; ++ky) {
        int64_t iy = oy * stride + ky - pad;
        for (int64_t kx = 0; kx < k; ++kx) {
          int64_t ix = ox * stride + kx - pad;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            const double* src = input.data() + (iy * w + ix) * ci;
            std::copy(src, src + ci, cp);
          } else {
            std::fill(cp, cp + ci, 0.0);
          }
          cp += ci;
        }
      }
}

inline void col2im_add(const Tensor& col, int64_t k, int64_t stride, Tensor& input_grad, int64_t oh,
                       int64_t ow) {
  int64_t h = input_grad.extent(0), w = input_grad.extent(1), ci = input_grad.extent(2);
  int64_t pad = k / 2;
  const double* cp = col.data();
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox)
      for (int64_t ky = 0; ky < k; ++ky) {
        int64_t iy = oy * stride + ky - pad;
        for (int64_t kx = 0; kx < k; ++kx) {
          int64_t ix = ox * stride + kx - pad;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            double* dst = input_grad.data() + (iy * w + ix) * ci;
            for (int64_t c = 0; c < ci; ++c) dst[c] += cp[c];
          }
          cp += ci;
        }
      }
}

}  // namespace detail

// input [H x W x Cin], kernel [k x k x Cin x Cout], bias [Cout]; stride 1
// keeps spatial extents (zero padding k/2).
inline Var conv2d(Var input, Var kernel, Var bias, int64_t stride = 1) {
  Tape& t = *detail::common_tape({input, kernel, bias});
  const Tensor& iv = t.value(input);
  const Tensor& kv = t.value(kernel);
  const Tensor& bv = t.value(bias);
  if (iv.rank() != 3) throw ShapeError("conv2d: input rank 3 required, got " + extents_str(iv.extents()));
  if (kv.rank() != 4 || kv.extent(0) != kv.extent(1) || kv.extent(0) % 2 == 0)
    throw ShapeError("conv2d: kernel must be odd-square [k,k,Cin,Cout], got " +
                     extents_str(kv.extents()));
  if (kv.extent(2) != iv.extent(2))
    throw ShapeError("conv2d: channel mismatch, input " + extents_str(iv.extents()) + " vs kernel " +
                     extents_str(kv.extents()));
  if (bv.rank() != 1 || bv.extent(0) != kv.extent(3))
    throw ShapeError("conv2d: bias extents " + extents_str(bv.extents()) + " vs kernel " +
                     extents_str(kv.extents()));
  int64_t h = iv.extent(0), w = iv.extent(1), ci = iv.extent(2);
  int64_t k = kv.extent(0), co = kv.extent(3);
  int64_t pad = k / 2;
  int64_t oh = (h + 2 * pad - k) / stride + 1;
  int64_t ow = (w + 2 * pad - k) / stride + 1;

  Tensor col({oh * ow, k * k * ci});
  detail::im2col(iv, k, stride, col, oh, ow);
  Tensor out({oh, ow, co});
  as_matrix(out, oh * ow, co).noalias() =
      as_matrix(col, oh * ow, k * k * ci) * as_matrix(kv, k * k * ci, co);
  for (int64_t p = 0; p < oh * ow; ++p)
    for (int64_t c = 0; c < co; ++c) out[p * co + c] += bv[c];

  Var r{&t, t.emit(std::move(out), detail::any_needs_grad(t, {input, kernel, bias}))};
  if (t.needs_grad(r.id)) {
    auto col_saved = std::make_shared<Tensor>(std::move(col));
    t.record([ii = input.id, ki = kernel.id, bi = bias.id, oi = r.id, col_saved, k, ci, co, oh, ow,
              stride](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      auto gm = as_matrix(g, oh * ow, co);
      if (tp.needs_grad(ki)) {
        Tensor& gk = tp.grad_ref(ki);
        as_matrix(gk, k * k * ci, co).noalias() +=
            as_matrix(*col_saved, oh * ow, k * k * ci).transpose() * gm;
      }
      if (tp.needs_grad(bi)) {
        Tensor& gb = tp.grad_ref(bi);
        for (int64_t p = 0; p < oh * ow; ++p)
          for (int64_t c = 0; c < co; ++c) gb[c] += g[p * co + c];
      }
      if (tp.needs_grad(ii)) {
        Tensor gcol({oh * ow, k * k * ci});
        as_matrix(gcol, oh * ow, k * k * ci).noalias() =
            gm * as_matrix(tp.val(ki), k * k * ci, co).transpose();
        detail::col2im_add(gcol, k, stride, tp.grad_ref(ii), oh, ow);
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// spatial rearrangement

// Depth-to-space with block 2: [h x w x d] -> [2h x 2w x d/4],
// out(2y+dy, 2x+dx, c) = in(y, x, c*4 + dy*2 + dx).
inline Var pixel_rearrange(Var input) {
  Tape& t = *input.tape;
  const Tensor& iv = t.value(input);
  if (iv.rank() != 3 || iv.extent(2) % 4 != 0)
    throw ShapeError("pixel_rearrange: depth must be divisible by 4, got " +
                     extents_str(iv.extents()));
  int64_t h = iv.extent(0), w = iv.extent(1), d = iv.extent(2);
  Tensor out({2 * h, 2 * w, d / 4});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < d / 4; ++c)
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx)
            out.at(2 * y + dy, 2 * x + dx, c) = iv.at(y, x, c * 4 + dy * 2 + dx);
  Var r{&t, t.emit(std::move(out), t.needs_grad(input.id))};
  if (t.needs_grad(r.id))
    t.record([ii = input.id, oi = r.id, h, w, d](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& gi = tp.grad_ref(ii);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          for (int64_t c = 0; c < d / 4; ++c)
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx)
                gi.at(y, x, c * 4 + dy * 2 + dx) += g.at(2 * y + dy, 2 * x + dx, c);
    });
  return r;
}

// Inverse of pixel_rearrange (space-to-depth with block 2).
inline Var pixel_rearrange_inverse(Var input) {
  Tape& t = *input.tape;
  const Tensor& iv = t.value(input);
  if (iv.rank() != 3 || iv.extent(0) % 2 != 0 || iv.extent(1) % 2 != 0)
    throw ShapeError("pixel_rearrange_inverse: even spatial extents required, got " +
                     extents_str(iv.extents()));
  int64_t h = iv.extent(0) / 2, w = iv.extent(1) / 2, c0 = iv.extent(2);
  Tensor out({h, w, 4 * c0});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < c0; ++c)
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx)
            out.at(y, x, c * 4 + dy * 2 + dx) = iv.at(2 * y + dy, 2 * x + dx, c);
  Var r{&t, t.emit(std::move(out), t.needs_grad(input.id))};
  if (t.needs_grad(r.id))
    t.record([ii = input.id, oi = r.id, h, w, c0](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& gi = tp.grad_ref(ii);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          for (int64_t c = 0; c < c0; ++c)
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx)
                gi.at(2 * y + dy, 2 * x + dx, c) += g.at(y, x, c * 4 + dy * 2 + dx);
    });
  return r;
}

// Adaptive average pooling onto an s x s grid; bucket i covers rows
// floor(i*H/s) .. floor((i+1)*H/s).
inline Var avg_pool_to(Var input, int64_t s) {
  Tape& t = *input.tape;
  const Tensor& iv = t.value(input);
  if (iv.rank() != 3) throw ShapeError("avg_pool_to: rank-3 input required");
  int64_t h = iv.extent(0), w = iv.extent(1), c = iv.extent(2);
  if (s <= 0 || s > std::min(h, w))
    throw ShapeError("avg_pool_to: scale " + std::to_string(s) + " exceeds extents " +
                     extents_str(iv.extents()));
  Tensor out({s, s, c});
  for (int64_t by = 0; by < s; ++by) {
    int64_t y0 = by * h / s, y1 = (by + 1) * h / s;
    for (int64_t bx = 0; bx < s; ++bx) {
      int64_t x0 = bx * w / s, x1 = (bx + 1) * w / s;
      double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int64_t y = y0; y < y1; ++y)
          for (int64_t x = x0; x < x1; ++x) acc += iv.at(y, x, ch);
        out.at(by, bx, ch) = acc * inv;
      }
    }
  }
  Var r{&t, t.emit(std::move(out), t.needs_grad(input.id))};
  if (t.needs_grad(r.id))
    t.record([ii = input.id, oi = r.id, h, w, c, s](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& gi = tp.grad_ref(ii);
      for (int64_t by = 0; by < s; ++by) {
        int64_t y0 = by * h / s, y1 = (by + 1) * h / s;
        for (int64_t bx = 0; bx < s; ++bx) {
          int64_t x0 = bx * w / s, x1 = (bx + 1) * w / s;
          double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
          for (int64_t ch = 0; ch < c; ++ch) {
            double gv = g.at(by, bx, ch) * inv;
            for (int64_t y = y0; y < y1; ++y)
              for (int64_t x = x0; x < x1; ++x) gi.at(y, x, ch) += gv;
          }
        }
      }
    });
  return r;
}

inline Var resize_nearest(Var input, int64_t oh, int64_t ow) {
  Tape& t = *input.tape;
  const Tensor& iv = t.value(input);
  if (iv.rank() != 3) throw ShapeError("resize_nearest: rank-3 input required");
  int64_t h = iv.extent(0), w = iv.extent(1), c = iv.extent(2);
  Tensor out({oh, ow, c});
  for (int64_t y = 0; y < oh; ++y) {
    int64_t sy = y * h / oh;
    for (int64_t x = 0; x < ow; ++x) {
      int64_t sx = x * w / ow;
      for (int64_t ch = 0; ch < c; ++ch) out.at(y, x, ch) = iv.at(sy, sx, ch);
    }
  }
  Var r{&t, t.emit(std::move(out), t.needs_grad(input.id))};
  if (t.needs_grad(r.id))
    t.record([ii = input.id, oi = r.id, h, w, c, oh, ow](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& gi = tp.grad_ref(ii);
      for (int64_t y = 0; y < oh; ++y) {
        int64_t sy = y * h / oh;
        for (int64_t x = 0; x < ow; ++x) {
          int64_t sx = x * w / ow;
          for (int64_t ch = 0; ch < c; ++ch) gi.at(sy, sx, ch) += g.at(y, x, ch);
        }
      }
    });
  return r;
}

// ---------------------------------------------------------------------------
// concatenation / slicing / gathering

// Concatenate along the last dimension; leading extents must agree.
inline Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_channels: empty input");
  Tape& t = *parts[0].tape;
  const Tensor& first = t.value(parts[0]);
  Extents lead(first.extents().begin(), first.extents().end() - 1);
  int64_t rows = 1;
  for (int64_t d : lead) rows *= d;
  int64_t total_c = 0;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    Extents pl(pv.extents().begin(), pv.extents().end() - 1);
    if (pl != lead)
      throw ShapeError("concat_channels: leading extents " + extents_str(pv.extents()) + " vs " +
                       extents_str(first.extents()));
    total_c += pv.extent(pv.rank() - 1);
    needs = needs || t.needs_grad(p.id);
  }
  Extents oext = lead;
  oext.push_back(total_c);
  Tensor out(oext);
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    int64_t pc = pv.extent(pv.rank() - 1);
    for (int64_t r0 = 0; r0 < rows; ++r0)
      std::copy(pv.data() + r0 * pc, pv.data() + (r0 + 1) * pc, out.data() + r0 * total_c + off);
    off += pc;
  }
  Var r{&t, t.emit(std::move(out), needs)};
  if (needs) {
    std::vector<int32_t> ids;
    std::vector<int64_t> widths;
    for (Var p : parts) {
      ids.push_back(p.id);
      widths.push_back(t.value(p).extent(t.value(p).rank() - 1));
    }
    t.record([ids, widths, oi = r.id, rows, total_c](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      int64_t off2 = 0;
      for (size_t i = 0; i < ids.size(); ++i) {
        if (tp.needs_grad(ids[i])) {
          Tensor& gp = tp.grad_ref(ids[i]);
          for (int64_t r0 = 0; r0 < rows; ++r0)
            for (int64_t c = 0; c < widths[i]; ++c)
              gp[r0 * widths[i] + c] += g[r0 * total_c + off2 + c];
        }
        off2 += widths[i];
      }
    });
  }
  return r;
}

inline Var concat_channels(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat_channels(std::span<const Var>(v));
}

inline Var slice_channels(Var a, int64_t begin, int64_t count) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  int64_t c = av.extent(av.rank() - 1);
  if (begin < 0 || count <= 0 || begin + count > c)
    throw ShapeError("slice_channels: [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of " + std::to_string(c));
  Extents oext(av.extents().begin(), av.extents().end() - 1);
  int64_t rows = 1;
  for (int64_t d : oext) rows *= d;
  oext.push_back(count);
  Tensor out(oext);
  for (int64_t r0 = 0; r0 < rows; ++r0)
    std::copy(av.data() + r0 * c + begin, av.data() + r0 * c + begin + count,
              out.data() + r0 * count);
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id, begin, count, rows, c](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t r0 = 0; r0 < rows; ++r0)
        for (int64_t j = 0; j < count; ++j) ga[r0 * c + begin + j] += g[r0 * count + j];
    });
  return r;
}

// Concatenate rank-2 tensors along rows.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty input");
  Tape& t = *parts[0].tape;
  int64_t c = t.value(parts[0]).extent(1);
  int64_t rows = 0;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    if (pv.rank() != 2 || pv.extent(1) != c)
      throw ShapeError("concat_rows: extents " + extents_str(pv.extents()));
    rows += pv.extent(0);
    needs = needs || t.needs_grad(p.id);
  }
  Tensor out({rows, c});
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    std::copy(pv.data(), pv.data() + pv.numel(), out.data() + off);
    off += pv.numel();
  }
  Var r{&t, t.emit(std::move(out), needs)};
  if (needs) {
    std::vector<int32_t> ids;
    std::vector<int64_t> sizes;
    for (Var p : parts) {
      ids.push_back(p.id);
      sizes.push_back(t.value(p).numel());
    }
    t.record([ids, sizes, oi = r.id](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      int64_t off2 = 0;
      for (size_t i = 0; i < ids.size(); ++i) {
        if (tp.needs_grad(ids[i])) {
          Tensor& gp = tp.grad_ref(ids[i]);
          for (int64_t j = 0; j < sizes[i]; ++j) gp[j] += g[off2 + j];
        }
        off2 += sizes[i];
      }
    });
  }
  return r;
}

// Row gather from a rank-2 tensor; index -1 yields a zero row (padding).
inline Var gather_rows(Var a, const std::vector<int64_t>& indices) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw ShapeError("gather_rows: rank-2 input required");
  int64_t rows = av.extent(0), c = av.extent(1);
  for (int64_t idx : indices)
    if (idx < -1 || idx >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of " +
                       std::to_string(rows));
  Tensor out({static_cast<int64_t>(indices.size()), c});
  for (size_t k = 0; k < indices.size(); ++k)
    if (indices[k] >= 0)
      std::copy(av.data() + indices[k] * c, av.data() + (indices[k] + 1) * c,
                out.data() + static_cast<int64_t>(k) * c);
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id))
    t.record([ai = a.id, oi = r.id, indices, c](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      Tensor& ga = tp.grad_ref(ai);
      for (size_t k = 0; k < indices.size(); ++k)
        if (indices[k] >= 0)
          for (int64_t j = 0; j < c; ++j)
            ga[indices[k] * c + j] += g[static_cast<int64_t>(k) * c + j];
    });
  return r;
}

// Row-wise layer normalization without affine parameters.
inline Var layer_norm_rows(Var a, double eps = 1e-5) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw ShapeError("layer_norm_rows: rank-2 input required");
  int64_t r0 = av.extent(0), c = av.extent(1);
  Tensor out({r0, c});
  Tensor inv_std({r0});
  for (int64_t i = 0; i < r0; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += av.at(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = av.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int64_t j = 0; j < c; ++j) out.at(i, j) = (av.at(i, j) - mean) * is;
  }
  Var r{&t, t.emit(std::move(out), t.needs_grad(a.id))};
  if (t.needs_grad(r.id)) {
    auto saved = std::make_shared<Tensor>(std::move(inv_std));
    t.record([ai = a.id, oi = r.id, saved, r0, c](Tape& tp) {
      const Tensor& g = tp.grad_ref(oi);
      const Tensor& y = tp.val(oi);
      Tensor& ga = tp.grad_ref(ai);
      for (int64_t i = 0; i < r0; ++i) {
        double gmean = 0.0, gdot = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          gmean += g.at(i, j);
          gdot += g.at(i, j) * y.at(i, j);
        }
        gmean /= static_cast<double>(c);
        gdot /= static_cast<double>(c);
        double is = (*saved)[i];
        for (int64_t j = 0; j < c; ++j)
          ga.at(i, j) += is * (g.at(i, j) - gmean - y.at(i, j) * gdot);
      }
    });
  }
  return r;
}

// Affine map: x [r x in] * w [in x out] + b [out].
inline Var linear(Var x, Var w, Var b) { return add_rows(matmul(x, w), b); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

}  // namespace nwcrf
