#include "htr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "blas.hpp"
#include "htr/errors.hpp"

namespace htr {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool should_record(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record(const char* op, std::vector<NodePtr<T>> inputs, BasicTensor<T>& out,
            std::function<void()> fn) {
  out.node()->requires_grad = true;
  active_tape<T>()->record({op, std::move(inputs), out.node(), std::move(fn)});
}

template <typename T>
void check_finite(const char* op, const BasicTensor<T>& out) {
  if (!finite_checks_enabled()) return;
  for (T v : out.data()) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
T* grad_of(const NodePtr<T>& n) {
  n->ensure_grad();
  return n->grad.data();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

// ---------------------------------------------------------------- matmul

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const bool batched = a.rank() == 3;
  const auto mismatch = "matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape());
  require((a.rank() == 2 || a.rank() == 3) && b.rank() == a.rank(), mismatch);
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1];
  const std::size_t n = b.shape()[b.rank() - 1];
  require(b.shape()[b.rank() - 2] == k, mismatch);
  if (batched) require(b.dim(0) == batch, mismatch);

  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> c(batch * m * n);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, false, int(m), int(n), int(k), T(1), ap + i * m * k, int(k),
                 bp + i * k * n, int(n), T(0), c.data() + i * m * n, int(n));
  }
  BasicTensor<T> out(std::move(out_shape), std::move(c));
  check_finite("matmul", out);
  if (should_record<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record<T>("matmul", {an, bn}, out, [=] {
      const T* dc = on->grad.data();
      for (std::size_t i = 0; i < batch; ++i) {
        const T* dci = dc + i * m * n;
        if (an->requires_grad) {
          // dA = dC * B^T
          detail::gemm(false, true, int(m), int(k), int(n), T(1), dci, int(n),
                       bn->value.data() + i * k * n, int(n), T(1), grad_of(an) + i * m * k,
                       int(k));
        }
        if (bn->requires_grad) {
          // dB = A^T * dC
          detail::gemm(true, false, int(k), int(n), int(m), T(1), an->value.data() + i * m * k,
                       int(k), dci, int(n), T(1), grad_of(bn) + i * k * n, int(n));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((ch * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = long(oy * g.stride + ki) - long(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= long(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = img + (ch * g.h + std::size_t(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = long(ox * g.stride + kj) - long(g.pad);
            dst[ox] = (ix < 0 || ix >= long(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t cols = g.col_cols();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((ch * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = long(oy * g.stride + ki) - long(g.pad);
          if (iy < 0 || iy >= long(g.h)) continue;
          T* dst = img + (ch * g.h + std::size_t(iy)) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = long(ox * g.stride + kj) - long(g.pad);
            if (ix >= 0 && ix < long(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

std::size_t pooled_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p,
                          const char* op, const Shape& shape) {
  if (s == 0) throw DimensionError(std::string(op) + ": stride must be positive");
  if (k == 0 || in + 2 * p < k) {
    throw DimensionError(std::string(op) + ": non-positive output extent for input " +
                         shape_str(shape) + " kernel " + std::to_string(k) + " padding " +
                         std::to_string(p));
  }
  return (in + 2 * p - k) / s + 1;
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dParams params) {
  require(input.rank() == 4 && weight.rank() == 4 && input.dim(1) == weight.dim(1),
          "conv2d shape mismatch: input " + shape_str(input.shape()) + " weight " +
              shape_str(weight.shape()));
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = params.stride;
  g.pad = params.padding;
  g.oh = pooled_extent(g.h, g.kh, g.stride, g.pad, "conv2d", input.shape());
  g.ow = pooled_extent(g.w, g.kw, g.stride, g.pad, "conv2d", input.shape());
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == g.f,
            "conv2d bias " + shape_str(bias.shape()) + " does not match " +
                std::to_string(g.f) + " filters");
  }

  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  std::vector<T> col(rows * cols);
  std::vector<T> y(g.n * g.f * cols);
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  for (std::size_t i = 0; i < g.n; ++i) {
    im2col(x + i * g.c * g.h * g.w, g, col.data());
    T* yi = y.data() + i * g.f * cols;
    detail::gemm(false, false, int(g.f), int(cols), int(rows), T(1), wt, int(rows), col.data(),
                 int(cols), T(0), yi, int(cols));
    if (bias.defined()) {
      for (std::size_t f = 0; f < g.f; ++f) {
        const T bv = bias.data()[f];
        for (std::size_t p = 0; p < cols; ++p) yi[f * cols + p] += bv;
      }
    }
  }
  BasicTensor<T> out(Shape{g.n, g.f, g.oh, g.ow}, std::move(y));
  check_finite("conv2d", out);
  if (should_record<T>({&input, &weight, &bias})) {
    auto xn = input.node(), wn = weight.node(), on = out.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<NodePtr<T>> ins{xn, wn};
    if (bn) ins.push_back(bn);
    record<T>("conv2d", std::move(ins), out, [=] {
      const std::size_t rows = g.col_rows(), cols = g.col_cols();
      std::vector<T> col(rows * cols);
      std::vector<T> dcol(xn->requires_grad ? rows * cols : 0);
      const T* dy = on->grad.data();
      for (std::size_t i = 0; i < g.n; ++i) {
        const T* dyi = dy + i * g.f * cols;
        if (wn->requires_grad) {
          im2col(xn->value.data() + i * g.c * g.h * g.w, g, col.data());
          detail::gemm(false, true, int(g.f), int(rows), int(cols), T(1), dyi, int(cols),
                       col.data(), int(cols), T(1), grad_of(wn), int(rows));
        }
        if (xn->requires_grad) {
          detail::gemm(true, false, int(rows), int(cols), int(g.f), T(1), wn->value.data(),
                       int(rows), dyi, int(cols), T(0), dcol.data(), int(cols));
          col2im_add(dcol.data(), g, grad_of(xn) + i * g.c * g.h * g.w);
        }
        if (bn && bn->requires_grad) {
          T* db = grad_of(bn);
          for (std::size_t f = 0; f < g.f; ++f) {
            T s = 0;
            for (std::size_t p = 0; p < cols; ++p) s += dyi[f * cols + p];
            db[f] += s;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- maxpool2d

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, Pool2dParams params) {
  require(input.rank() == 4, "maxpool2d expects [N,C,H,W], got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t k = params.kernel, s = params.stride, p = params.padding;
  if (p >= k) throw DimensionError("maxpool2d padding must be smaller than the kernel");
  const std::size_t oh = pooled_extent(h, k, s, p, "maxpool2d", input.shape());
  const std::size_t ow = pooled_extent(w, k, s, p, "maxpool2d", input.shape());

  std::vector<T> y(n * c * oh * ow);
  std::vector<std::size_t> argmax(y.size());
  const T* x = input.data().data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* xp = x + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = std::numeric_limits<std::size_t>::max();
        for (std::size_t ki = 0; ki < k; ++ki) {
          const long iy = long(oy * s + ki) - long(p);
          if (iy < 0 || iy >= long(h)) continue;
          for (std::size_t kj = 0; kj < k; ++kj) {
            const long ix = long(ox * s + kj) - long(p);
            if (ix < 0 || ix >= long(w)) continue;
            const std::size_t idx = std::size_t(iy) * w + std::size_t(ix);
            if (best_idx == std::numeric_limits<std::size_t>::max() || xp[idx] > best) {
              best = xp[idx];
              best_idx = idx;
            }
          }
        }
        y[o] = best;
        argmax[o] = plane * h * w + best_idx;
      }
    }
  }
  BasicTensor<T> out(Shape{n, c, oh, ow}, std::move(y));
  check_finite("maxpool2d", out);
  if (should_record<T>({&input})) {
    auto xn = input.node(), on = out.node();
    record<T>("maxpool2d", {xn}, out, [xn, on, argmax = std::move(argmax)] {
      T* dx = grad_of(xn);
      const T* dy = on->grad.data();
      for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- batchnorm2d

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormState<T>& state, bool training,
                           double momentum, double eps) {
  require(input.rank() == 4, "batchnorm2d expects [N,C,H,W], got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  for (const BasicTensor<T>* t : std::initializer_list<const BasicTensor<T>*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    require(t->rank() == 1 && t->dim(0) == c,
            "batchnorm2d parameter " + shape_str(t->shape()) + " does not match " +
                std::to_string(c) + " channels");
  }
  if (!(eps > 0)) throw ContractError("batchnorm2d eps must be positive");
  const std::size_t count = n * hw;
  if (training && count < 2) {
    throw DegenerateError("batchnorm2d train mode needs at least 2 values per channel, got " +
                          std::to_string(count));
  }

  const T* x = input.data().data();
  std::vector<T> xhat(input.numel());
  std::vector<T> invstd(c);
  std::vector<T> y(input.numel());
  auto rm = state.running_mean.mutable_data();
  auto rv = state.running_var.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (training) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) s += x[(i * c + ch) * hw + j];
      mean = s / double(count);
      double ss = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = x[(i * c + ch) * hw + j] - mean;
          ss += d * d;
        }
      var = ss / double(count);
      rm[ch] = T((1.0 - momentum) * rm[ch] + momentum * mean);
      rv[ch] = T((1.0 - momentum) * rv[ch] + momentum * ss / double(count - 1));
    } else {
      mean = rm[ch];
      var = rv[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[ch] = T(is);
    const T g = gamma.data()[ch], b = beta.data()[ch];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t idx = (i * c + ch) * hw + j;
        xhat[idx] = T((x[idx] - mean) * is);
        y[idx] = g * xhat[idx] + b;
      }
    }
  }
  BasicTensor<T> out(input.shape(), std::move(y));
  check_finite("batchnorm2d", out);
  if (should_record<T>({&input, &gamma, &beta})) {
    auto xn = input.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    record<T>("batchnorm2d", {xn, gn, bn}, out,
              [=, xhat = std::move(xhat), invstd = std::move(invstd)] {
                const T* dy = on->grad.data();
                for (std::size_t ch = 0; ch < c; ++ch) {
                  T sum_dy = 0, sum_dy_xhat = 0;
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < hw; ++j) {
                      const std::size_t idx = (i * c + ch) * hw + j;
                      sum_dy += dy[idx];
                      sum_dy_xhat += dy[idx] * xhat[idx];
                    }
                  if (gn->requires_grad) grad_of(gn)[ch] += sum_dy_xhat;
                  if (bn->requires_grad) grad_of(bn)[ch] += sum_dy;
                  if (!xn->requires_grad) continue;
                  T* dx = grad_of(xn);
                  const T g = gn->value[ch];
                  const T k = g * invstd[ch];
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < hw; ++j) {
                      const std::size_t idx = (i * c + ch) * hw + j;
                      if (training) {
                        dx[idx] += k / T(count) *
                                   (T(count) * dy[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
                      } else {
                        dx[idx] += k * dy[idx];
                      }
                    }
                }
              });
  }
  return out;
}

// ---------------------------------------------------------------- layer_norm

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  require(input.rank() >= 1, "layer_norm needs rank >= 1");
  const std::size_t d = input.shape().back();
  require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
          "layer_norm affine shapes " + shape_str(gamma.shape()) + "/" +
              shape_str(beta.shape()) + " do not match last axis of " +
              shape_str(input.shape()));
  if (!(eps > 0)) throw ContractError("layer_norm eps must be positive");
  const std::size_t rows = input.numel() / d;
  const T* x = input.data().data();
  const T* g = gamma.data().data();
  const T* b = beta.data().data();
  std::vector<T> xhat(input.numel()), invstd(rows), y(input.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    double mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= double(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= double(d);
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[r] = T(is);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = T((xr[j] - mean) * is);
      y[r * d + j] = g[j] * xhat[r * d + j] + b[j];
    }
  }
  BasicTensor<T> out(input.shape(), std::move(y));
  check_finite("layer_norm", out);
  if (should_record<T>({&input, &gamma, &beta})) {
    auto xn = input.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    record<T>("layer_norm", {xn, gn, bn}, out,
              [=, xhat = std::move(xhat), invstd = std::move(invstd)] {
                const T* dy = on->grad.data();
                T* dg = gn->requires_grad ? grad_of(gn) : nullptr;
                T* db = bn->requires_grad ? grad_of(bn) : nullptr;
                T* dx = xn->requires_grad ? grad_of(xn) : nullptr;
                for (std::size_t r = 0; r < rows; ++r) {
                  const T* dyr = dy + r * d;
                  const T* xh = xhat.data() + r * d;
                  T s1 = 0, s2 = 0;
                  for (std::size_t j = 0; j < d; ++j) {
                    if (dg) dg[j] += dyr[j] * xh[j];
                    if (db) db[j] += dyr[j];
                    const T dxh = dyr[j] * gn->value[j];
                    s1 += dxh;
                    s2 += dxh * xh[j];
                  }
                  if (!dx) continue;
                  for (std::size_t j = 0; j < d; ++j) {
                    const T dxh = dyr[j] * gn->value[j];
                    dx[r * d + j] += invstd[r] / T(d) * (T(d) * dxh - s1 - xh[j] * s2);
                  }
                }
              });
  }
  return out;
}

// ---------------------------------------------------------------- softmax

namespace {

template <typename T>
BasicTensor<T> softmax_impl(const BasicTensor<T>& input, const BlockMask* mask) {
  require(input.rank() >= 1, "softmax needs rank >= 1");
  const std::size_t d = input.shape().back();
  const std::size_t rows = input.numel() / d;
  std::size_t group = 0, mrows = 1;
  if (mask) {
    require(input.rank() >= 2, "masked softmax needs rank >= 2");
    mrows = input.shape()[input.rank() - 2];
    require(mask->rows == mrows && mask->cols == d &&
                mask->blocked.size() == mask->batch * mask->rows * mask->cols,
            "mask [" + std::to_string(mask->batch) + "," + std::to_string(mask->rows) + "," +
                std::to_string(mask->cols) + "] does not fit scores " +
                shape_str(input.shape()));
    const std::size_t lead = rows / mrows;
    require(mask->batch > 0 && lead % mask->batch == 0,
            "mask batch " + std::to_string(mask->batch) + " does not divide leading extent " +
                std::to_string(lead));
    group = lead / mask->batch;
  }

  const T* x = input.data().data();
  std::vector<T> y(input.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    T* yr = y.data() + r * d;
    const std::uint8_t* blocked = nullptr;
    if (mask) {
      const std::size_t b = (r / mrows) / group;
      blocked = mask->blocked.data() + (b * mask->rows + r % mrows) * d;
    }
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < d; ++j) {
      if (blocked && blocked[j]) continue;
      mx = any ? std::max(mx, xr[j]) : xr[j];
      any = true;
    }
    if (!any) throw MaskError("attention mask blocks every key for query row " +
                              std::to_string(r % mrows));
    T total = 0;
    for (std::size_t j = 0; j < d; ++j) {
      if (blocked && blocked[j]) {
        yr[j] = 0;
        continue;
      }
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] /= total;
  }
  BasicTensor<T> out(input.shape(), std::move(y));
  check_finite("softmax", out);
  if (should_record<T>({&input})) {
    auto xn = input.node(), on = out.node();
    record<T>("softmax", {xn}, out, [=] {
      const T* dy = on->grad.data();
      const T* yv = on->value.data();
      T* dx = grad_of(xn);
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += dy[r * d + j] * yv[r * d + j];
        for (std::size_t j = 0; j < d; ++j)
          dx[r * d + j] += yv[r * d + j] * (dy[r * d + j] - dot);
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input) {
  return softmax_impl(input, nullptr);
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input, const BlockMask& mask) {
  return softmax_impl(input, &mask);
}

// ---------------------------------------------------------------- cross entropy

template <typename T>
BasicTensor<T> cross_entropy_masked(const BasicTensor<T>& logits, std::span<const TokenId> targets,
                                    TokenId ignore_id) {
  require(logits.rank() == 2 && logits.dim(0) == targets.size(),
          "cross_entropy_masked: logits " + shape_str(logits.shape()) + " vs " +
              std::to_string(targets.size()) + " targets");
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  const T* x = logits.data().data();
  std::vector<T> probs(t * v, T(0));
  std::vector<TokenId> kept(targets.begin(), targets.end());
  std::size_t count = 0;
  double total = 0;
  for (std::size_t r = 0; r < t; ++r) {
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || std::size_t(targets[r]) >= v) {
      throw ContractError("target id " + std::to_string(targets[r]) + " out of range for " +
                          std::to_string(v) + " classes");
    }
    const T* xr = x + r * v;
    const T mx = *std::max_element(xr, xr + v);
    double s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(double(xr[j] - mx));
    const double lse = double(mx) + std::log(s);
    total += lse - double(xr[targets[r]]);
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = T(std::exp(double(xr[j]) - lse));
    ++count;
  }
  if (count == 0) throw EmptyLossError("cross_entropy_masked: every target position is ignored");
  BasicTensor<T> out = BasicTensor<T>::scalar(T(total / double(count)));
  check_finite("cross_entropy_masked", out);
  if (should_record<T>({&logits})) {
    auto xn = logits.node(), on = out.node();
    record<T>("cross_entropy_masked", {xn}, out,
              [=, probs = std::move(probs), kept = std::move(kept)] {
                const T g = on->grad[0] / T(count);
                T* dx = grad_of(xn);
                for (std::size_t r = 0; r < t; ++r) {
                  if (kept[r] == ignore_id) continue;
                  for (std::size_t j = 0; j < v; ++j) dx[r * v + j] += g * probs[r * v + j];
                  dx[r * v + std::size_t(kept[r])] -= g;
                }
              });
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> y(x.data().begin(), x.data().end());
  for (auto& v : y) v = v > T(0) ? v : T(0);
  BasicTensor<T> out(x.shape(), std::move(y));
  check_finite("relu", out);
  if (should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>("relu", {xn}, out, [=] {
      T* dx = grad_of(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (xn->value[i] > T(0)) dx[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avgpool(const BasicTensor<T>& x) {
  require(x.rank() == 4, "global_avgpool expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += x.data()[i * hw + j];
    y[i] = s / T(hw);
  }
  BasicTensor<T> out(Shape{x.dim(0), x.dim(1)}, std::move(y));
  if (should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>("global_avgpool", {xn}, out, [=] {
      T* dx = grad_of(xn);
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t j = 0; j < hw; ++j) dx[i * hw + j] += on->grad[i] / T(hw);
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(),
          "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  BasicTensor<T> out(a.shape(), std::move(y));
  check_finite("add", out);
  if (should_record<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record<T>("add", {an, bn}, out, [=] {
      for (const auto& in : {an, bn}) {
        if (!in->requires_grad) continue;
        T* d = grad_of(in);
        for (std::size_t i = 0; i < on->grad.size(); ++i) d[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(),
          "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  BasicTensor<T> out(a.shape(), std::move(y));
  check_finite("mul", out);
  if (should_record<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record<T>("mul", {an, bn}, out, [=] {
      if (an->requires_grad) {
        T* d = grad_of(an);
        for (std::size_t i = 0; i < on->grad.size(); ++i) d[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        T* d = grad_of(bn);
        for (std::size_t i = 0; i < on->grad.size(); ++i) d[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor) {
  const T f = T(factor);
  std::vector<T> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= f;
  BasicTensor<T> out(x.shape(), std::move(y));
  check_finite("scale", out);
  if (should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>("scale", {xn}, out, [=] {
      T* d = grad_of(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) d[i] += f * on->grad[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  require(x.rank() >= 1 && bias.rank() == 1 && bias.dim(0) == x.shape().back(),
          "add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
              shape_str(x.shape()));
  const std::size_t d = bias.dim(0);
  std::vector<T> y(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias.data()[i % d];
  BasicTensor<T> out(x.shape(), std::move(y));
  check_finite("add_bias", out);
  if (should_record<T>({&x, &bias})) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    record<T>("add_bias", {xn, bn}, out, [=] {
      if (xn->requires_grad) {
        T* dx = grad_of(xn);
        for (std::size_t i = 0; i < on->grad.size(); ++i) dx[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        T* db = grad_of(bn);
        for (std::size_t i = 0; i < on->grad.size(); ++i) db[i % d] += on->grad[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- layout

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes size");
  BasicTensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>("reshape", {xn}, out, [=] {
      T* d = grad_of(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) d[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool valid = perm.size() == r;
  for (std::size_t i = 0; valid && i < r; ++i) {
    valid = perm[i] < r && !seen[perm[i]];
    if (valid) seen[perm[i]] = true;
  }
  require(valid, "permute: invalid permutation for shape " + shape_str(x.shape()));

  const Shape& in_shape = x.shape();
  const Shape in_strides = row_major_strides(in_shape);
  Shape out_shape(r), src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  const std::size_t total = x.numel();
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < total; ++o) {
    src[o] = offset;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      offset += src_stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      offset -= src_stride[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  std::vector<T> y(total);
  for (std::size_t o = 0; o < total; ++o) y[o] = x.data()[src[o]];
  BasicTensor<T> out(std::move(out_shape), std::move(y));
  if (should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>("permute", {xn}, out, [xn, on, src = std::move(src)] {
      T* d = grad_of(xn);
      for (std::size_t o = 0; o < src.size(); ++o) d[src[o]] += on->grad[o];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, std::size_t axis0, std::size_t axis1) {
  require(axis0 < x.rank() && axis1 < x.rank(),
          "transpose axes out of range for " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[axis0], perm[axis1]);
  return permute(x, perm);
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat of zero tensors");
  const Shape& first = parts[0].shape();
  require(axis < first.size(), "concat axis out of range for " + shape_str(first));
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i)
      ok = i == axis || p.shape()[i] == first[i];
    require(ok, "concat shape mismatch: " + shape_str(first) + " vs " + shape_str(p.shape()));
    total_axis += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  std::vector<T> y(shape_numel(out_shape));
  std::size_t at = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * block, block, y.data() + o * total_axis * inner + at);
    at += block;
  }
  BasicTensor<T> out(std::move(out_shape), std::move(y));
  bool any = false;
  for (const auto& p : parts) any = any || should_record<T>({&p});
  if (any) {
    std::vector<NodePtr<T>> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = out.node();
    record<T>("concat", ins, out, [=] {
      std::size_t at = 0;
      for (const auto& in : ins) {
        const std::size_t block = in->shape[axis] * inner;
        if (in->requires_grad) {
          T* d = grad_of(in);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < block; ++j)
              d[o * block + j] += on->grad[o * total_axis * inner + at + j];
        }
        at += block;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  BasicTensor<T> out = BasicTensor<T>::scalar(s);
  check_finite("sum", out);
  if (should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>("sum", {xn}, out, [=] {
      T* d = grad_of(xn);
      for (std::size_t i = 0; i < xn->value.size(); ++i) d[i] += on->grad[0];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const TokenId> ids) {
  require(table.rank() == 2, "embedding table must be [V,d], got " + shape_str(table.shape()));
  require(!ids.empty(), "embedding_lookup with no ids");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> y(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || std::size_t(ids[i]) >= v) {
      throw ContractError("token id " + std::to_string(ids[i]) + " out of range for vocabulary of " +
                          std::to_string(v));
    }
    std::copy_n(table.data().data() + std::size_t(ids[i]) * d, d, y.data() + i * d);
  }
  BasicTensor<T> out(Shape{ids.size(), d}, std::move(y));
  if (should_record<T>({&table})) {
    auto tn = table.node(), on = out.node();
    std::vector<TokenId> rows(ids.begin(), ids.end());
    record<T>("embedding_lookup", {tn}, out, [tn, on, d, rows = std::move(rows)] {
      T* g = grad_of(tn);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[std::size_t(rows[i]) * d + j] += on->grad[i * d + j];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, std::mt19937_64& rng) {
  if (p < 0 || p >= 1) throw ContractError("dropout probability must be in [0,1)");
  if (p == 0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    m = u < p ? T(0) : keep_scale;
  }
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * mask[i];
  BasicTensor<T> out(x.shape(), std::move(y));
  if (should_record<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>("dropout", {xn}, out, [xn, on, mask = std::move(mask)] {
      T* d = grad_of(xn);
      for (std::size_t i = 0; i < mask.size(); ++i) d[i] += mask[i] * on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- instantiation

#define HTR_INSTANTIATE_OPS(T)                                                               \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                 const BasicTensor<T>&, Conv2dParams);                      \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, Pool2dParams);                   \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                      const BasicTensor<T>&, BatchNormState<T>&, bool,      \
                                      double, double);                                       \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                     const BasicTensor<T>&, double);                        \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                   \
  template BasicTensor<T> softmax(const BasicTensor<T>&, const BlockMask&);                 \
  template BasicTensor<T> cross_entropy_masked(const BasicTensor<T>&,                       \
                                               std::span<const TokenId>, TokenId);          \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                      \
  template BasicTensor<T> global_avgpool(const BasicTensor<T>&);                            \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                             \
  template BasicTensor<T> add_bias(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                            \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);  \
  template BasicTensor<T> transpose(const BasicTensor<T>&, std::size_t, std::size_t);       \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);          \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                       \
  template BasicTensor<T> embedding_lookup(const BasicTensor<T>&, std::span<const TokenId>); \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, std::mt19937_64&);

HTR_INSTANTIATE_OPS(float)
HTR_INSTANTIATE_OPS(double)

#undef HTR_INSTANTIATE_OPS

}  // namespace htr
