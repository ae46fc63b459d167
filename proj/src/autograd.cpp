#include "colongpt/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "colongpt/error.hpp"
#include "colongpt/kernels.hpp"

namespace colongpt::ag {

const Tensor& Var::value() const { return tape->value(*this); }
const Tensor& Var::grad() const { return tape->grad(*this); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), nullptr, Tensor{}, requires_grad, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::external(const Tensor& value, bool requires_grad) {
  nodes_.push_back(Node{Tensor{}, &value, Tensor{}, requires_grad, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::make(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool rg = false;
  for (const Var& v : inputs) {
    if (v && v.tape != this) throw UsageError("autograd: mixing vars from different tapes");
    if (v) rg = rg || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), nullptr, Tensor{}, rg, rg ? std::move(backward) : Backward{}});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  const Tensor& v = n.external ? *n.external : n.value;
  if (n.grad.size() != v.size() || n.grad.shape() != v.shape()) n.grad = Tensor(v.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (value(root.id).size() != 1) throw ShapeError("backward: root must be a scalar");
  grad_buffer(root.id)[0] = 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, id);
  }
}

Var ParamBinder::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  const bool rg = trainable_ == nullptr || trainable_->count(name) != 0;
  Var v = tape_.external(raw(name), rg);
  bound_.emplace(name, v);
  return v;
}

const Tensor& ParamBinder::raw(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("missing parameter '" + name + "'");
  return it->second;
}

ParamMap ParamBinder::gradients() const {
  ParamMap out;
  for (const auto& [name, v] : bound_) {
    if (!tape_.requires_grad(v)) continue;
    const Tensor& g = tape_.grad(v);
    out[name] = g.size() == 0 ? Tensor(tape_.value(v).shape(), 0.0) : g;
  }
  return out;
}

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

std::size_t id_or_none(Var v) { return v ? v.id : kNone; }

void require_same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v) continue;
    if (t && v.tape != t) throw UsageError("autograd: mixing vars from different tapes");
    t = v.tape;
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.size() != bv.size()) {
    throw ShapeError("add: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  Tensor y = av;
  kernels::axpy(1.0, bv.span(), y.span());
  const Var in[] = {a, b};
  return a.tape->make(std::move(y), in, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    if (t.requires_grad(ai)) kernels::axpy(1.0, dy.span(), t.grad_buffer(ai).span());
    if (t.requires_grad(bi)) kernels::axpy(1.0, dy.span(), t.grad_buffer(bi).span());
  });
}

Var scale(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v *= s;
  const Var in[] = {a};
  return a.tape->make(std::move(y), in, [ai = a.id, s](Tape& t, std::size_t self) {
    kernels::axpy(s, t.grad_buffer(self).span(), t.grad_buffer(ai).span());
  });
}

Var linear(Var x, Var w, Var b) {
  require_same_tape({x, w, b});
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const std::size_t n = X.rows(), in = X.cols(), out = W.rows();
  if (W.cols() != in) {
    throw ShapeError("linear: input " + shape_string(X.shape()) + " vs weight " + shape_string(W.shape()));
  }
  if (b && b.value().size() != out) throw ShapeError("linear: bias length mismatch");
  Tensor Y = matmul_nt(X, W);
  if (b) {
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, bv.span(), Y.row(i));
  }
  const Var inputs[] = {x, w, b};
  return x.tape->make(std::move(Y), inputs,
                      [xi = x.id, wi = w.id, bi = id_or_none(b), n, in, out](Tape& t, std::size_t self) {
                        const Tensor& dY = t.grad_buffer(self);
                        if (t.requires_grad(xi)) {
                          kernels::gemm(n, in, out, dY.span(), t.value(wi).span(), t.grad_buffer(xi).span(), true);
                        }
                        if (t.requires_grad(wi)) {
                          const Tensor dYt = transpose(dY);
                          kernels::gemm(out, in, n, dYt.span(), t.value(xi).span(), t.grad_buffer(wi).span(), true);
                        }
                        if (bi != kNone && t.requires_grad(bi)) {
                          Tensor& db = t.grad_buffer(bi);
                          for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, dY.row(i), db.span());
                        }
                      });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

Var gelu(Var x) {
  Tensor y = x.value();
  for (double& v : y.values()) v = gelu_value(v);
  const Var in[] = {x};
  return x.tape->make(std::move(y), in, [xi = x.id](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& xv = t.value(xi);
    Tensor& dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * gelu_derivative(xv[i]);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape({x, gain, bias});
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), c = X.cols();
  const Tensor& g = gain.value();
  const Tensor& b = bias.value();
  if (g.size() != c || b.size() != c) throw ShapeError("layer_norm: affine length mismatch");
  Tensor xhat = Tensor::matrix(n, c);
  std::vector<double> rstd(n);
  Tensor Y = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += X.at(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (X.at(i, j) - mean) * (X.at(i, j) - mean);
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat.at(i, j) = (X.at(i, j) - mean) * rstd[i];
      Y.at(i, j) = xhat.at(i, j) * g[j] + b[j];
    }
  }
  const Var in[] = {x, gain, bias};
  return x.tape->make(
      std::move(Y), in,
      [xi = x.id, gi = gain.id, bi = bias.id, xhat = std::move(xhat), rstd = std::move(rstd), n, c](
          Tape& t, std::size_t self) {
        const Tensor& dY = t.grad_buffer(self);
        const Tensor& g = t.value(gi);
        if (t.requires_grad(gi)) {
          Tensor& dg = t.grad_buffer(gi);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) dg[j] += dY.at(i, j) * xhat.at(i, j);
        }
        if (t.requires_grad(bi)) {
          Tensor& db = t.grad_buffer(bi);
          for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, dY.row(i), db.span());
        }
        if (!t.requires_grad(xi)) return;
        Tensor& dX = t.grad_buffer(xi);
        std::vector<double> dxhat(c);
        for (std::size_t i = 0; i < n; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dxhat[j] = dY.at(i, j) * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat.at(i, j);
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) dX.at(i, j) += rstd[i] * (dxhat[j] - m1 - xhat.at(i, j) * m2);
        }
      });
}

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  require_same_tape({q, k, v});
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t n = Q.rows(), d = Q.cols();
  if (K.rows() != n || V.rows() != n || K.cols() != d || V.cols() != d) {
    throw ShapeError("attention: q/k/v shapes disagree");
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: model dim not divisible by heads");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[h][i][j], j <= i
  std::vector<double> probs(heads * n * n, 0.0);
  Tensor O = Tensor::matrix(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      double* p = probs.data() + (h * n + i) * n;
      const auto qi = Q.row(i).subspan(off, dh);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = kernels::dot(qi, K.row(j).subspan(off, dh)) * sc;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      auto oi = O.row(i).subspan(off, dh);
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= z;
        kernels::axpy(p[j], V.row(j).subspan(off, dh), oi);
      }
    }
  }
  const Var in[] = {q, k, v};
  return q.tape->make(
      std::move(O), in,
      [qi_ = q.id, ki = k.id, vi = v.id, probs = std::move(probs), n, heads, dh, sc](Tape& t, std::size_t self) {
        const Tensor& dO = t.grad_buffer(self);
        const Tensor& Q = t.value(qi_);
        const Tensor& K = t.value(ki);
        const Tensor& V = t.value(vi);
        const bool gq = t.requires_grad(qi_), gk = t.requires_grad(ki), gv = t.requires_grad(vi);
        Tensor* dQ = gq ? &t.grad_buffer(qi_) : nullptr;
        Tensor* dK = gk ? &t.grad_buffer(ki) : nullptr;
        Tensor* dV = gv ? &t.grad_buffer(vi) : nullptr;
        std::vector<double> dp(n);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < n; ++i) {
            const double* p = probs.data() + (h * n + i) * n;
            const auto doi = dO.row(i).subspan(off, dh);
            double rowdot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              dp[j] = kernels::dot(doi, V.row(j).subspan(off, dh));
              rowdot += p[j] * dp[j];
            }
            for (std::size_t j = 0; j <= i; ++j) {
              if (gv) kernels::axpy(p[j], doi, dV->row(j).subspan(off, dh));
              const double ds = p[j] * (dp[j] - rowdot) * sc;
              if (gq) kernels::axpy(ds, K.row(j).subspan(off, dh), dQ->row(i).subspan(off, dh));
              if (gk) kernels::axpy(ds, Q.row(i).subspan(off, dh), dK->row(j).subspan(off, dh));
            }
          }
        }
      });
}

Var gather_rows(Var table, std::span<const std::size_t> rows) {
  const Tensor& T = table.value();
  const std::size_t c = T.cols();
  Tensor Y = Tensor::matrix(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= T.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(T.row(rows[i]).data(), c, Y.row(i).data());
  }
  const Var in[] = {table};
  return table.tape->make(std::move(Y), in,
                          [ti = table.id, idx = std::vector<std::size_t>(rows.begin(), rows.end())](
                              Tape& t, std::size_t self) {
                            const Tensor& dY = t.grad_buffer(self);
                            Tensor& dT = t.grad_buffer(ti);
                            for (std::size_t i = 0; i < idx.size(); ++i) kernels::axpy(1.0, dY.row(i), dT.row(idx[i]));
                          });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().value().cols();
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets;
  for (const Var& p : parts) {
    if (p.tape != parts.front().tape) throw UsageError("autograd: mixing vars from different tapes");
    if (p.value().cols() != c) throw ShapeError("concat_rows: column mismatch");
    ids.push_back(p.id);
    offsets.push_back(n);
    n += p.value().rows();
  }
  Tensor Y = Tensor::matrix(n, c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    std::copy(v.values().begin(), v.values().end(), Y.values().begin() + offsets[k] * c);
  }
  return parts.front().tape->make(std::move(Y), parts,
                                  [ids = std::move(ids), offsets = std::move(offsets), c](Tape& t, std::size_t self) {
                                    const Tensor& dY = t.grad_buffer(self);
                                    for (std::size_t k = 0; k < ids.size(); ++k) {
                                      if (!t.requires_grad(ids[k])) continue;
                                      Tensor& dp = t.grad_buffer(ids[k]);
                                      kernels::axpy(1.0, dY.span().subspan(offsets[k] * c, dp.size()), dp.span());
                                    }
                                  });
}

namespace {

struct Bins {
  std::vector<std::size_t> start, end;
};

Bins pool_bins(std::size_t in, std::size_t s) {
  Bins b;
  for (std::size_t i = 0; i < s; ++i) {
    b.start.push_back((i * in) / s);
    b.end.push_back(((i + 1) * in + s - 1) / s);
  }
  return b;
}

}  // namespace

Var adaptive_avg_pool(Var grid, std::size_t h, std::size_t w, std::size_t s) {
  const Tensor& X = grid.value();
  if (X.rows() != h * w) throw ShapeError("adaptive_avg_pool: grid rows != h*w");
  if (s < 1 || s > std::min(h, w)) {
    throw ShapeError("adaptive_avg_pool: target side " + std::to_string(s) + " outside [1, " +
                     std::to_string(std::min(h, w)) + "]");
  }
  const std::size_t c = X.cols();
  const Bins rb = pool_bins(h, s), cb = pool_bins(w, s);
  Tensor Y = Tensor::matrix(s * s, c);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      auto out = Y.row(i * s + j);
      const std::size_t count = (rb.end[i] - rb.start[i]) * (cb.end[j] - cb.start[j]);
      for (std::size_t r = rb.start[i]; r < rb.end[i]; ++r)
        for (std::size_t q = cb.start[j]; q < cb.end[j]; ++q) kernels::axpy(1.0, X.row(r * w + q), out);
      const double inv = 1.0 / static_cast<double>(count);
      for (double& v : out) v *= inv;
    }
  }
  const Var in[] = {grid};
  return grid.tape->make(std::move(Y), in, [gi = grid.id, rb, cb, s, w](Tape& t, std::size_t self) {
    const Tensor& dY = t.grad_buffer(self);
    Tensor& dX = t.grad_buffer(gi);
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        const std::size_t count = (rb.end[i] - rb.start[i]) * (cb.end[j] - cb.start[j]);
        const double inv = 1.0 / static_cast<double>(count);
        for (std::size_t r = rb.start[i]; r < rb.end[i]; ++r)
          for (std::size_t q = cb.start[j]; q < cb.end[j]; ++q) kernels::axpy(inv, dY.row(i * s + j), dX.row(r * w + q));
      }
    }
  });
}

namespace {

// cols[(y*w + x), ci*9 + ky*3 + kx] = grid[(y+ky-1)*w + (x+kx-1), ci], zero outside.
Tensor im2col3x3(const Tensor& X, std::size_t h, std::size_t w) {
  const std::size_t c = X.cols();
  Tensor cols = Tensor::matrix(h * w, c * 9);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* dst = cols.row(y * w + x).data();
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const long sy = static_cast<long>(y + ky) - 1;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long sx = static_cast<long>(x + kx) - 1;
          if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
          const double* src = X.row(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)).data();
          for (std::size_t ci = 0; ci < c; ++ci) dst[ci * 9 + ky * 3 + kx] = src[ci];
        }
      }
    }
  }
  return cols;
}

void col2im3x3(const Tensor& dcols, std::size_t h, std::size_t w, Tensor& dX) {
  const std::size_t c = dX.cols();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double* src = dcols.row(y * w + x).data();
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const long sy = static_cast<long>(y + ky) - 1;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long sx = static_cast<long>(x + kx) - 1;
          if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
          double* dst = dX.row(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)).data();
          for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += src[ci * 9 + ky * 3 + kx];
        }
      }
    }
  }
}

}  // namespace

Var conv3x3(Var grid, std::size_t h, std::size_t w, Var weight, Var bias) {
  require_same_tape({grid, weight, bias});
  const Tensor& X = grid.value();
  const Tensor& Wt = weight.value();
  if (X.rows() != h * w) throw ShapeError("conv3x3: grid rows != h*w");
  const std::size_t cin = X.cols();
  if (Wt.rank() != 4 || Wt.dim(1) != cin || Wt.dim(2) != 3 || Wt.dim(3) != 3) {
    throw ShapeError("conv3x3: weight " + shape_string(Wt.shape()) + " incompatible with " +
                     std::to_string(cin) + " input channels");
  }
  const std::size_t cout = Wt.dim(0);
  if (bias && bias.value().size() != cout) throw ShapeError("conv3x3: bias length mismatch");
  Tensor cols = im2col3x3(X, h, w);
  Tensor Y = Tensor::matrix(h * w, cout);
  matmul_nt_into(h * w, cout, cin * 9, cols.span(), Wt.span(), Y.span());
  if (bias) {
    for (std::size_t i = 0; i < h * w; ++i) kernels::axpy(1.0, bias.value().span(), Y.row(i));
  }
  const Var in[] = {grid, weight, bias};
  return grid.tape->make(
      std::move(Y), in,
      [gi = grid.id, wi = weight.id, bi = id_or_none(bias), cols = std::move(cols), h, w, cin, cout](Tape& t, std::size_t self) {
        const Tensor& dY = t.grad_buffer(self);
        const std::size_t n = h * w;
        if (t.requires_grad(wi)) {
          const Tensor dYt = transpose(dY);
          kernels::gemm(cout, cin * 9, n, dYt.span(), cols.span(), t.grad_buffer(wi).span(), true);
        }
        if (bi != kNone && t.requires_grad(bi)) {
          Tensor& db = t.grad_buffer(bi);
          for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, dY.row(i), db.span());
        }
        if (t.requires_grad(gi)) {
          Tensor dcols = Tensor::matrix(n, cin * 9);
          kernels::gemm(n, cin * 9, cout, dY.span(), t.value(wi).span(), dcols.span(), false);
          col2im3x3(dcols, h, w, t.grad_buffer(gi));
        }
      });
}

Var lora_weight(Var w, Var a, Var b, double scale) {
  require_same_tape({w, a, b});
  const Tensor& W = w.value();
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != W.cols() || B.rows() != W.rows() || B.cols() != A.rows()) {
    throw ShapeError("lora: W" + shape_string(W.shape()) + " A" + shape_string(A.shape()) + " B" +
                     shape_string(B.shape()));
  }
  Tensor Y = W;
  const Tensor ba = matmul(B, A);
  kernels::axpy(scale, ba.span(), Y.span());
  const Var in[] = {w, a, b};
  return w.tape->make(std::move(Y), in, [wi = w.id, ai = a.id, bi = b.id, scale](Tape& t, std::size_t self) {
    const Tensor& dY = t.grad_buffer(self);
    if (t.requires_grad(wi)) kernels::axpy(1.0, dY.span(), t.grad_buffer(wi).span());
    if (t.requires_grad(bi)) {
      const Tensor g = matmul_nt(dY, t.value(ai));
      kernels::axpy(scale, g.span(), t.grad_buffer(bi).span());
    }
    if (t.requires_grad(ai)) {
      const Tensor g = matmul_tn(t.value(bi), dY);
      kernels::axpy(scale, g.span(), t.grad_buffer(ai).span());
    }
  });
}

Var sum_squares(Var x) {
  const Tensor& X = x.value();
  double s = 0.0;
  for (double v : X.values()) s += v * v;
  const Var in[] = {x};
  return x.tape->make(Tensor({1}, s), in, [xi = x.id](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    kernels::axpy(2.0 * g, t.value(xi).span(), t.grad_buffer(xi).span());
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& L = logits.value();
  const std::size_t m = L.rows(), vocab = L.cols();
  if (targets.size() != m) throw ShapeError("cross_entropy: targets length mismatch");
  if (m == 0) throw DataError("cross_entropy: empty target set, loss undefined");
  Tensor probs = Tensor::matrix(m, vocab);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= vocab) throw ShapeError("cross_entropy: target id out of range");
    const auto row = L.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[targets[i]];
    for (std::size_t j = 0; j < vocab; ++j) probs.at(i, j) = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(m);
  const Var in[] = {logits};
  return logits.tape->make(
      Tensor({1}, loss), in,
      [li = logits.id, probs = std::move(probs), tgt = std::vector<std::size_t>(targets.begin(), targets.end())](
          Tape& t, std::size_t self) {
        const double g = t.grad_buffer(self)[0] / static_cast<double>(tgt.size());
        Tensor& dL = t.grad_buffer(li);
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          auto drow = dL.row(i);
          const auto prow = probs.row(i);
          for (std::size_t j = 0; j < drow.size(); ++j) drow[j] += g * prow[j];
          drow[tgt[i]] -= g;
        }
      });
}

}  // namespace colongpt::ag
