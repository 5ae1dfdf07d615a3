#include "wf/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace wf {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw std::invalid_argument("op applied to invalid Var");
  return *v.tape;
}

void require_same_tape(const Var& a, const Var& b) {
  tape_of(a);
  tape_of(b);
  if (a.tape != b.tape) throw std::invalid_argument("op applied to Vars from different tapes");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch, lhs " + shape_str(a.shape()) +
                                " vs rhs " + shape_str(b.shape()));
}

Index last_dim(const char* op, const Tensor& x) {
  if (x.ndim() < 1)
    throw std::invalid_argument(std::string(op) + ": requires rank >= 1, got shape " + shape_str(x.shape()));
  return x.shape().back();
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  require_same_shape("add", a.value(), b.value());
  Tensor out(a.value().shape(), a.value().array() + b.value().array());
  int pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Eigen::ArrayXd& g = tp.grad(self).array();
    tp.grad(pa).array() += g;
    tp.grad(pb).array() += g;
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  require_same_shape("sub", a.value(), b.value());
  Tensor out(a.value().shape(), a.value().array() - b.value().array());
  int pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Eigen::ArrayXd& g = tp.grad(self).array();
    tp.grad(pa).array() += g;
    tp.grad(pb).array() -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  require_same_shape("mul", a.value(), b.value());
  Tensor out(a.value().shape(), a.value().array() * b.value().array());
  int pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Eigen::ArrayXd g = tp.grad(self).array();
    tp.grad(pa).array() += g * tp.value(pb).array();
    tp.grad(pb).array() += g * tp.value(pa).array();
  });
}

Var affine(Var x, double scale, double shift) {
  Tape& t = tape_of(x);
  Tensor out(x.value().shape(), x.value().array() * scale + shift);
  int px = x.id;
  return t.emit(std::move(out), {px}, [px, scale](Tape& tp, int self) {
    tp.grad(px).array() += tp.grad(self).array() * scale;
  });
}

Var reciprocal(Var x) {
  Tape& t = tape_of(x);
  Tensor out(x.value().shape(), x.value().array().inverse());
  int px = x.id;
  return t.emit(std::move(out), {px}, [px](Tape& tp, int self) {
    const Eigen::ArrayXd& y = tp.value(self).array();
    tp.grad(px).array() -= tp.grad(self).array() * y * y;
  });
}

Var sigmoid(Var x) {
  Tape& t = tape_of(x);
  // 0.5*(1+tanh(x/2)) is the overflow-safe logistic.
  Tensor out(x.value().shape(), 0.5 * (1.0 + (0.5 * x.value().array()).tanh()));
  int px = x.id;
  return t.emit(std::move(out), {px}, [px](Tape& tp, int self) {
    const Eigen::ArrayXd& y = tp.value(self).array();
    tp.grad(px).array() += tp.grad(self).array() * y * (1.0 - y);
  });
}

Var relu(Var x) {
  Tape& t = tape_of(x);
  Tensor out(x.value().shape(), x.value().array().max(0.0));
  int px = x.id;
  return t.emit(std::move(out), {px}, [px](Tape& tp, int self) {
    const Eigen::ArrayXd& xv = tp.value(px).array();
    tp.grad(px).array() += tp.grad(self).array() * (xv > 0.0).cast<double>();
  });
}

Var gelu(Var x) {
  Tape& t = tape_of(x);
  // Exact form x * Phi(x) with the Gaussian CDF, not the tanh approximation.
  Eigen::ArrayXd phi = x.value().array().unaryExpr([](double v) { return 0.5 * std::erfc(-v * kInvSqrt2); });
  Tensor out(x.value().shape(), x.value().array() * phi);
  int px = x.id;
  return t.emit(std::move(out), {px}, [px](Tape& tp, int self) {
    const Eigen::ArrayXd& xv = tp.value(px).array();
    Eigen::ArrayXd cdf = xv.unaryExpr([](double v) { return 0.5 * std::erfc(-v * kInvSqrt2); });
    Eigen::ArrayXd pdf = (-0.5 * xv.square()).exp() * kInvSqrt2Pi;
    tp.grad(px).array() += tp.grad(self).array() * (cdf + xv * pdf);
  });
}

Var sum_all(Var x) {
  Tape& t = tape_of(x);
  Tensor out = Tensor::scalar(x.value().array().sum());
  int px = x.id;
  return t.emit(std::move(out), {px}, [px](Tape& tp, int self) {
    tp.grad(px).array() += tp.grad(self)[0];
  });
}

Var mean_all(Var x) {
  Tape& t = tape_of(x);
  Index n = x.value().numel();
  if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
  Tensor out = Tensor::scalar(x.value().array().sum() / static_cast<double>(n));
  int px = x.id;
  return t.emit(std::move(out), {px}, [px, n](Tape& tp, int self) {
    tp.grad(px).array() += tp.grad(self)[0] / static_cast<double>(n);
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x);
  Tensor out = x.value().reshaped(shape);
  int px = x.id;
  return t.emit(std::move(out), {px}, [px](Tape& tp, int self) {
    tp.grad(px).array() += tp.grad(self).array();
  });
}

Var select_row(Var x, Index row) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 2)
    throw std::invalid_argument("select_row: requires rank-2 tensor, got shape " + shape_str(xv.shape()));
  Index rows = xv.dim(0), cols = xv.dim(1);
  if (row < 0 || row >= rows)
    throw std::invalid_argument("select_row: row " + std::to_string(row) + " out of range [0," +
                                std::to_string(rows) + ")");
  Tensor out({cols});
  out.array() = xv.array().segment(row * cols, cols);
  int px = x.id;
  return t.emit(std::move(out), {px}, [px, row, cols](Tape& tp, int self) {
    tp.grad(px).array().segment(row * cols, cols) += tp.grad(self).array();
  });
}

Var slice_cols(Var x, Index start, Index count) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 2)
    throw std::invalid_argument("slice_cols: requires rank-2 tensor, got shape " + shape_str(xv.shape()));
  Index rows = xv.dim(0), cols = xv.dim(1);
  if (start < 0 || count < 1 || start + count > cols)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") out of " + std::to_string(cols) + " columns");
  Tensor out({rows, count});
  out.mat() = xv.mat().middleCols(start, count);
  int px = x.id;
  return t.emit(std::move(out), {px}, [px, start, count, rows, cols](Tape& tp, int self) {
    tp.grad(px).as_matrix(rows, cols).middleCols(start, count) += tp.grad(self).as_matrix(rows, count);
  });
}

Var gather(Var x, Shape out_shape, std::shared_ptr<const std::vector<Index>> map) {
  Tape& t = tape_of(x);
  if (!map) throw std::invalid_argument("gather: null index map");
  Index n_out = shape_numel(out_shape);
  if (static_cast<Index>(map->size()) != n_out)
    throw std::invalid_argument("gather: map size " + std::to_string(map->size()) +
                                " does not match output shape " + shape_str(out_shape));
  Index n_in = x.value().numel();
  Tensor out(std::move(out_shape));
  const double* src = x.value().data();
  for (Index i = 0; i < n_out; ++i) {
    Index j = (*map)[static_cast<size_t>(i)];
    if (j < 0 || j >= n_in)
      throw std::invalid_argument("gather: map entry " + std::to_string(j) + " out of range [0," +
                                  std::to_string(n_in) + ")");
    out[i] = src[j];
  }
  int px = x.id;
  return t.emit(std::move(out), {px}, [px, map, n_out](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(px);
    for (Index i = 0; i < n_out; ++i) gx[(*map)[static_cast<size_t>(i)]] += g[i];
  });
}

Var scale_axis0(Var x, Var s) {
  require_same_tape(x, s);
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (xv.ndim() < 1)
    throw std::invalid_argument("scale_axis0: requires rank >= 1, got shape " + shape_str(xv.shape()));
  if (sv.ndim() != 1 || sv.dim(0) != xv.dim(0))
    throw std::invalid_argument("scale_axis0: scale shape " + shape_str(sv.shape()) +
                                " does not match leading dimension " + std::to_string(xv.dim(0)));
  Index d0 = xv.dim(0);
  Index rest = xv.numel() / std::max<Index>(d0, 1);
  Tensor out(xv.shape());
  out.as_matrix(d0, rest) = (xv.as_matrix(d0, rest).array().colwise() * sv.array()).matrix();
  int px = x.id, ps = s.id;
  return t.emit(std::move(out), {px, ps}, [px, ps, d0, rest](Tape& tp, int self) {
    auto g = tp.grad(self).as_matrix(d0, rest);
    auto xm = tp.value(px).as_matrix(d0, rest);
    const Eigen::ArrayXd& sa = tp.value(ps).array();
    tp.grad(px).as_matrix(d0, rest) += (g.array().colwise() * sa).matrix();
    tp.grad(ps).array() += (g.array() * xm.array()).rowwise().sum();
  });
}

Var scale_last(Var x, Var s) {
  require_same_tape(x, s);
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  Index dk = last_dim("scale_last", xv);
  if (sv.ndim() != 1 || sv.dim(0) != dk)
    throw std::invalid_argument("scale_last: scale shape " + shape_str(sv.shape()) +
                                " does not match trailing dimension " + std::to_string(dk));
  Index rows = xv.numel() / std::max<Index>(dk, 1);
  Tensor out(xv.shape());
  out.as_matrix(rows, dk) = (xv.as_matrix(rows, dk).array().rowwise() * sv.array().transpose()).matrix();
  int px = x.id, ps = s.id;
  return t.emit(std::move(out), {px, ps}, [px, ps, rows, dk](Tape& tp, int self) {
    auto g = tp.grad(self).as_matrix(rows, dk);
    auto xm = tp.value(px).as_matrix(rows, dk);
    const Eigen::ArrayXd& sa = tp.value(ps).array();
    tp.grad(px).as_matrix(rows, dk) += (g.array().rowwise() * sa.transpose()).matrix();
    tp.grad(ps).array() += (g.array() * xm.array()).colwise().sum().transpose();
  });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2)
    throw std::invalid_argument("matmul: requires rank-2 tensors, got " + shape_str(av.shape()) + " and " +
                                shape_str(bv.shape()));
  if (av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: inner dimensions " + std::to_string(av.dim(1)) + " and " +
                                std::to_string(bv.dim(0)) + " do not match");
  Index m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  out.mat().noalias() = av.mat() * bv.mat();
  int pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb}, [pa, pb, m, k, n](Tape& tp, int self) {
    auto g = tp.grad(self).as_matrix(m, n);
    tp.grad(pa).as_matrix(m, k).noalias() += g * tp.value(pb).as_matrix(k, n).transpose();
    tp.grad(pb).as_matrix(k, n).noalias() += tp.value(pa).as_matrix(m, k).transpose() * g;
  });
}

Var linear(Var x, Var w, Var b) {
  require_same_tape(x, w);
  require_same_tape(x, b);
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.ndim() != 2 || wv.ndim() != 2)
    throw std::invalid_argument("linear: input and weight must be rank-2, got " + shape_str(xv.shape()) +
                                " and " + shape_str(wv.shape()));
  if (xv.dim(1) != wv.dim(0))
    throw std::invalid_argument("linear: input features " + std::to_string(xv.dim(1)) +
                                " != weight rows " + std::to_string(wv.dim(0)));
  if (bv.ndim() != 1 || bv.dim(0) != wv.dim(1))
    throw std::invalid_argument("linear: bias shape " + shape_str(bv.shape()) + " does not match " +
                                std::to_string(wv.dim(1)) + " output features");
  Index batch = xv.dim(0), fin = xv.dim(1), fout = wv.dim(1);
  Tensor out({batch, fout});
  out.mat().noalias() = xv.mat() * wv.mat();
  out.mat().rowwise() += bv.array().matrix().transpose();
  int px = x.id, pw = w.id, pb = b.id;
  return t.emit(std::move(out), {px, pw, pb}, [px, pw, pb, batch, fin, fout](Tape& tp, int self) {
    auto g = tp.grad(self).as_matrix(batch, fout);
    tp.grad(px).as_matrix(batch, fin).noalias() += g * tp.value(pw).as_matrix(fin, fout).transpose();
    tp.grad(pw).as_matrix(fin, fout).noalias() += tp.value(px).as_matrix(batch, fin).transpose() * g;
    tp.grad(pb).array() += g.colwise().sum().transpose().array();
  });
}

namespace {

struct Conv2dPlan {
  Index batch, cin, h, w, cout, kh, kw, oh, ow, patch;
  std::vector<Index> map;  // flat source index per cols entry, -1 for padding
  MatrixRM cols;           // [batch*oh*ow, patch]
};

}  // namespace

Var conv2d(Var x, Var k, Var b, int stride, int pad) {
  require_same_tape(x, k);
  require_same_tape(x, b);
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& kv = k.value();
  const Tensor& bv = b.value();
  if (xv.ndim() != 4)
    throw std::invalid_argument("conv2d: input must be [batch,channels,height,width], got " +
                                shape_str(xv.shape()));
  if (kv.ndim() != 4)
    throw std::invalid_argument("conv2d: kernel must be [out,in,kh,kw], got " + shape_str(kv.shape()));
  if (xv.dim(1) != kv.dim(1))
    throw std::invalid_argument("conv2d: input channels " + std::to_string(xv.dim(1)) +
                                " != kernel channels " + std::to_string(kv.dim(1)));
  if (bv.ndim() != 1 || bv.dim(0) != kv.dim(0))
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bv.shape()) + " does not match " +
                                std::to_string(kv.dim(0)) + " output channels");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0, got " + std::to_string(pad));

  auto plan = std::make_shared<Conv2dPlan>();
  plan->batch = xv.dim(0);
  plan->cin = xv.dim(1);
  plan->h = xv.dim(2);
  plan->w = xv.dim(3);
  plan->cout = kv.dim(0);
  plan->kh = kv.dim(2);
  plan->kw = kv.dim(3);
  plan->oh = (plan->h + 2 * pad - plan->kh) / stride + 1;
  plan->ow = (plan->w + 2 * pad - plan->kw) / stride + 1;
  if (plan->h + 2 * pad < plan->kh || plan->w + 2 * pad < plan->kw)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(plan->kh) + "x" + std::to_string(plan->kw) +
                                " larger than padded input " + std::to_string(plan->h + 2 * pad) + "x" +
                                std::to_string(plan->w + 2 * pad));
  plan->patch = plan->cin * plan->kh * plan->kw;

  const Index rows = plan->batch * plan->oh * plan->ow;
  plan->map.resize(static_cast<size_t>(rows * plan->patch));
  plan->cols.resize(rows, plan->patch);
  const double* src = xv.data();
  Index r = 0;
  for (Index bi = 0; bi < plan->batch; ++bi) {
    const Index base_b = bi * plan->cin * plan->h * plan->w;
    for (Index oy = 0; oy < plan->oh; ++oy) {
      for (Index ox = 0; ox < plan->ow; ++ox, ++r) {
        Index c = 0;
        for (Index ci = 0; ci < plan->cin; ++ci) {
          const Index base_c = base_b + ci * plan->h * plan->w;
          for (Index ky = 0; ky < plan->kh; ++ky) {
            const Index iy = oy * stride - pad + ky;
            for (Index kx = 0; kx < plan->kw; ++kx, ++c) {
              const Index ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= plan->h || ix < 0 || ix >= plan->w) {
                plan->map[static_cast<size_t>(r * plan->patch + c)] = -1;
                plan->cols(r, c) = 0.0;
              } else {
                const Index flat = base_c + iy * plan->w + ix;
                plan->map[static_cast<size_t>(r * plan->patch + c)] = flat;
                plan->cols(r, c) = src[flat];
              }
            }
          }
        }
      }
    }
  }

  MatrixRM out_mat(rows, plan->cout);
  out_mat.noalias() = plan->cols * kv.as_matrix(plan->cout, plan->patch).transpose();
  out_mat.rowwise() += bv.array().matrix().transpose();

  Tensor out({plan->batch, plan->cout, plan->oh, plan->ow});
  {
    double* dst = out.data();
    const Index ohw = plan->oh * plan->ow;
    for (Index bi = 0; bi < plan->batch; ++bi)
      for (Index co = 0; co < plan->cout; ++co)
        for (Index p = 0; p < ohw; ++p) dst[(bi * plan->cout + co) * ohw + p] = out_mat(bi * ohw + p, co);
  }

  int px = x.id, pk = k.id, pb = b.id;
  return t.emit(std::move(out), {px, pk, pb}, [px, pk, pb, plan](Tape& tp, int self) {
    const Index rows = plan->batch * plan->oh * plan->ow;
    const Index ohw = plan->oh * plan->ow;
    const Tensor& g = tp.grad(self);
    MatrixRM gmat(rows, plan->cout);
    const double* gsrc = g.data();
    for (Index bi = 0; bi < plan->batch; ++bi)
      for (Index co = 0; co < plan->cout; ++co)
        for (Index p = 0; p < ohw; ++p) gmat(bi * ohw + p, co) = gsrc[(bi * plan->cout + co) * ohw + p];

    tp.grad(pb).array() += gmat.colwise().sum().transpose().array();
    tp.grad(pk).as_matrix(plan->cout, plan->patch).noalias() += gmat.transpose() * plan->cols;

    MatrixRM gcols(rows, plan->patch);
    gcols.noalias() = gmat * tp.value(pk).as_matrix(plan->cout, plan->patch);
    Tensor& gx = tp.grad(px);
    double* gxd = gx.data();
    const Index total = rows * plan->patch;
    const double* gc = gcols.data();
    for (Index i = 0; i < total; ++i) {
      Index j = plan->map[static_cast<size_t>(i)];
      if (j >= 0) gxd[j] += gc[i];
    }
  });
}

Var maxpool2d(Var x, int window) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 4)
    throw std::invalid_argument("maxpool2d: input must be [batch,channels,height,width], got " +
                                shape_str(xv.shape()));
  if (window < 1) throw std::invalid_argument("maxpool2d: window must be >= 1, got " + std::to_string(window));
  Index batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Index oh = h / window, ow = w / window;
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("maxpool2d: window " + std::to_string(window) + " larger than input " +
                                std::to_string(h) + "x" + std::to_string(w));
  Tensor out({batch, ch, oh, ow});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<size_t>(out.numel()));
  const double* src = xv.data();
  double* dst = out.data();
  Index o = 0;
  for (Index bc = 0; bc < batch * ch; ++bc) {
    const Index base = bc * h * w;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++o) {
        Index best = base + (oy * window) * w + ox * window;
        double best_v = src[best];
        for (Index dy = 0; dy < window; ++dy)
          for (Index dx = 0; dx < window; ++dx) {
            Index idx = base + (oy * window + dy) * w + (ox * window + dx);
            if (src[idx] > best_v) {
              best_v = src[idx];
              best = idx;
            }
          }
        dst[o] = best_v;
        (*argmax)[static_cast<size_t>(o)] = best;
      }
    }
  }
  int px = x.id;
  Index n_out = out.numel();
  return t.emit(std::move(out), {px}, [px, argmax, n_out](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(px);
    for (Index i = 0; i < n_out; ++i) gx[(*argmax)[static_cast<size_t>(i)]] += g[i];
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Index d = last_dim("layer_norm", xv);
  if (gamma.value().ndim() != 1 || gamma.value().dim(0) != d)
    throw std::invalid_argument("layer_norm: gamma shape " + shape_str(gamma.value().shape()) +
                                " does not match normalized dimension " + std::to_string(d));
  if (beta.value().ndim() != 1 || beta.value().dim(0) != d)
    throw std::invalid_argument("layer_norm: beta shape " + shape_str(beta.value().shape()) +
                                " does not match normalized dimension " + std::to_string(d));
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  Index rows = xv.numel() / d;

  auto xhat = std::make_shared<MatrixRM>(rows, d);
  auto inv_std = std::make_shared<Eigen::ArrayXd>(rows);
  auto xm = xv.as_matrix(rows, d);
  for (Index r = 0; r < rows; ++r) {
    double mu = xm.row(r).mean();
    Eigen::ArrayXd centered = xm.row(r).array() - mu;
    double var = centered.square().mean();
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    xhat->row(r) = (centered * inv).matrix().transpose();
  }
  Tensor out(xv.shape());
  out.as_matrix(rows, d) =
      ((xhat->array().rowwise() * gamma.value().array().transpose()).rowwise() +
       beta.value().array().transpose())
          .matrix();

  int px = x.id, pg = gamma.id, pb = beta.id;
  return t.emit(std::move(out), {px, pg, pb}, [px, pg, pb, rows, d, xhat, inv_std](Tape& tp, int self) {
    auto g = tp.grad(self).as_matrix(rows, d);
    const Eigen::ArrayXd& ga = tp.value(pg).array();
    tp.grad(pg).array() += (g.array() * xhat->array()).colwise().sum().transpose();
    tp.grad(pb).array() += g.array().colwise().sum().transpose();
    auto gx = tp.grad(px).as_matrix(rows, d);
    const double dn = static_cast<double>(d);
    for (Index r = 0; r < rows; ++r) {
      Eigen::ArrayXd dxhat = g.row(r).array().transpose() * ga;
      Eigen::ArrayXd xh = xhat->row(r).array().transpose();
      double s1 = dxhat.sum();
      double s2 = (dxhat * xh).sum();
      gx.row(r).array() += (((dxhat * dn) - s1 - xh * s2) * ((*inv_std)[r] / dn)).transpose();
    }
  });
}

Var softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Index d = last_dim("softmax_lastdim", xv);
  Index rows = xv.numel() / d;
  Tensor out(xv.shape());
  auto xm = xv.as_matrix(rows, d);
  auto om = out.as_matrix(rows, d);
  for (Index r = 0; r < rows; ++r) {
    Eigen::ArrayXd e = (xm.row(r).array() - xm.row(r).maxCoeff()).exp();
    om.row(r) = (e / e.sum()).matrix().transpose();
  }
  int px = x.id;
  return t.emit(std::move(out), {px}, [px, rows, d](Tape& tp, int self) {
    auto p = tp.value(self).as_matrix(rows, d);
    auto g = tp.grad(self).as_matrix(rows, d);
    auto gx = tp.grad(px).as_matrix(rows, d);
    for (Index r = 0; r < rows; ++r) {
      double dot = (g.row(r).array() * p.row(r).array()).sum();
      gx.row(r).array() += p.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
  Tape& t = tape_of(logits);
  const Tensor& lv = logits.value();
  if (lv.ndim() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be [batch,classes], got " +
                                shape_str(lv.shape()));
  Index batch = lv.dim(0), classes = lv.dim(1);
  if (static_cast<Index>(labels.size()) != batch)
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," +
                                  std::to_string(classes) + ")");
  auto probs = std::make_shared<MatrixRM>(batch, classes);
  auto lm = lv.as_matrix(batch, classes);
  double loss = 0.0;
  for (Index r = 0; r < batch; ++r) {
    double mx = lm.row(r).maxCoeff();
    Eigen::ArrayXd e = (lm.row(r).array() - mx).exp();
    double z = e.sum();
    probs->row(r) = (e / z).matrix().transpose();
    loss += std::log(z) + mx - lm(r, labels[static_cast<size_t>(r)]);
  }
  loss /= static_cast<double>(batch);
  int px = logits.id;
  auto labels_ptr = std::make_shared<std::vector<int>>(std::move(labels));
  return t.emit(Tensor::scalar(loss), {px}, [px, probs, labels_ptr, batch, classes](Tape& tp, int self) {
    double gs = tp.grad(self)[0] / static_cast<double>(batch);
    auto gx = tp.grad(px).as_matrix(batch, classes);
    gx += (*probs) * gs;
    for (Index r = 0; r < batch; ++r) gx(r, (*labels_ptr)[static_cast<size_t>(r)]) -= gs;
  });
}

Var bmm(Var a, Var b, bool transpose_b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 3 || bv.ndim() != 3)
    throw std::invalid_argument("bmm: requires rank-3 tensors, got " + shape_str(av.shape()) + " and " +
                                shape_str(bv.shape()));
  if (av.dim(0) != bv.dim(0))
    throw std::invalid_argument("bmm: group counts " + std::to_string(av.dim(0)) + " and " +
                                std::to_string(bv.dim(0)) + " do not match");
  Index groups = av.dim(0), m = av.dim(1), k = av.dim(2);
  Index bk = transpose_b ? bv.dim(2) : bv.dim(1);
  Index n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k)
    throw std::invalid_argument("bmm: inner dimensions " + std::to_string(k) + " and " + std::to_string(bk) +
                                " do not match");
  Tensor out({groups, m, n});
  for (Index gi = 0; gi < groups; ++gi) {
    ConstMapRM am(av.data() + gi * m * k, m, k);
    auto om = MapRM(out.data() + gi * m * n, m, n);
    if (transpose_b) {
      ConstMapRM bm(bv.data() + gi * n * k, n, k);
      om.noalias() = am * bm.transpose();
    } else {
      ConstMapRM bm(bv.data() + gi * k * n, k, n);
      om.noalias() = am * bm;
    }
  }
  int pa = a.id, pb = b.id;
  return t.emit(std::move(out), {pa, pb}, [pa, pb, groups, m, k, n, transpose_b](Tape& tp, int self) {
    const Tensor& gv = tp.grad(self);
    const Tensor& av = tp.value(pa);
    const Tensor& bv = tp.value(pb);
    Tensor& gat = tp.grad(pa);
    Tensor& gbt = tp.grad(pb);
    for (Index gi = 0; gi < groups; ++gi) {
      ConstMapRM g(gv.data() + gi * m * n, m, n);
      ConstMapRM am(av.data() + gi * m * k, m, k);
      MapRM ga(gat.data() + gi * m * k, m, k);
      if (transpose_b) {
        ConstMapRM bm(bv.data() + gi * n * k, n, k);
        MapRM gb(gbt.data() + gi * n * k, n, k);
        ga.noalias() += g * bm;
        gb.noalias() += g.transpose() * am;
      } else {
        ConstMapRM bm(bv.data() + gi * k * n, k, n);
        MapRM gb(gbt.data() + gi * k * n, k, n);
        ga.noalias() += g * bm.transpose();
        gb.noalias() += am.transpose() * g;
      }
    }
  });
}

Var patchify(Var x, int patch) {
  tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 4)
    throw std::invalid_argument("patchify: input must be [batch,channels,height,width], got " +
                                shape_str(xv.shape()));
  if (patch < 1) throw std::invalid_argument("patchify: patch must be >= 1, got " + std::to_string(patch));
  Index batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % patch != 0 || w % patch != 0)
    throw std::invalid_argument("patchify: patch " + std::to_string(patch) + " does not divide input " +
                                std::to_string(h) + "x" + std::to_string(w));
  Index gh = h / patch, gw = w / patch, tokens = gh * gw;
  Index dim = ch * patch * patch;
  auto map = std::make_shared<std::vector<Index>>(static_cast<size_t>(batch * tokens * dim));
  size_t i = 0;
  for (Index bi = 0; bi < batch; ++bi)
    for (Index py = 0; py < gh; ++py)
      for (Index px_ = 0; px_ < gw; ++px_)
        for (Index ci = 0; ci < ch; ++ci)
          for (Index dy = 0; dy < patch; ++dy)
            for (Index dx = 0; dx < patch; ++dx, ++i)
              (*map)[i] = ((bi * ch + ci) * h + (py * patch + dy)) * w + (px_ * patch + dx);
  return gather(x, {batch * tokens, dim}, std::move(map));
}

Var prepend_cls(Var x, Var cls, Index tokens) {
  require_same_tape(x, cls);
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& cv = cls.value();
  if (xv.ndim() != 2 || cv.ndim() != 2 || cv.dim(0) != 1)
    throw std::invalid_argument("prepend_cls: expects tokens [rows,dim] and cls [1,dim], got " +
                                shape_str(xv.shape()) + " and " + shape_str(cv.shape()));
  if (cv.dim(1) != xv.dim(1))
    throw std::invalid_argument("prepend_cls: cls dim " + std::to_string(cv.dim(1)) +
                                " != token dim " + std::to_string(xv.dim(1)));
  if (tokens < 1 || xv.dim(0) % tokens != 0)
    throw std::invalid_argument("prepend_cls: token rows " + std::to_string(xv.dim(0)) +
                                " not divisible by tokens " + std::to_string(tokens));
  Index batch = xv.dim(0) / tokens, d = xv.dim(1);
  Tensor out({batch * (tokens + 1), d});
  auto om = out.mat();
  auto xm = xv.mat();
  auto cm = cv.mat();
  for (Index bi = 0; bi < batch; ++bi) {
    om.row(bi * (tokens + 1)) = cm.row(0);
    om.middleRows(bi * (tokens + 1) + 1, tokens) = xm.middleRows(bi * tokens, tokens);
  }
  int px = x.id, pc = cls.id;
  return t.emit(std::move(out), {px, pc}, [px, pc, batch, tokens, d](Tape& tp, int self) {
    auto g = tp.grad(self).as_matrix(batch * (tokens + 1), d);
    auto gx = tp.grad(px).as_matrix(batch * tokens, d);
    auto gc = tp.grad(pc).as_matrix(1, d);
    for (Index bi = 0; bi < batch; ++bi) {
      gc.row(0) += g.row(bi * (tokens + 1));
      gx.middleRows(bi * tokens, tokens) += g.middleRows(bi * (tokens + 1) + 1, tokens);
    }
  });
}

Var add_pos(Var x, Var pos, Index tokens) {
  require_same_tape(x, pos);
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& pv = pos.value();
  if (xv.ndim() != 2 || pv.ndim() != 2)
    throw std::invalid_argument("add_pos: expects rank-2 tensors, got " + shape_str(xv.shape()) + " and " +
                                shape_str(pv.shape()));
  if (pv.dim(0) != tokens || pv.dim(1) != xv.dim(1))
    throw std::invalid_argument("add_pos: positional shape " + shape_str(pv.shape()) + " does not match [" +
                                std::to_string(tokens) + "," + std::to_string(xv.dim(1)) + "]");
  if (tokens < 1 || xv.dim(0) % tokens != 0)
    throw std::invalid_argument("add_pos: token rows " + std::to_string(xv.dim(0)) +
                                " not divisible by tokens " + std::to_string(tokens));
  Index batch = xv.dim(0) / tokens, d = xv.dim(1);
  Tensor out(xv.shape());
  auto om = out.mat();
  auto xm = xv.mat();
  auto pm = pv.mat();
  for (Index bi = 0; bi < batch; ++bi) om.middleRows(bi * tokens, tokens) = xm.middleRows(bi * tokens, tokens) + pm;
  int px = x.id, pp = pos.id;
  return t.emit(std::move(out), {px, pp}, [px, pp, batch, tokens, d](Tape& tp, int self) {
    auto g = tp.grad(self).as_matrix(batch * tokens, d);
    tp.grad(px).as_matrix(batch * tokens, d) += g;
    auto gp = tp.grad(pp).as_matrix(tokens, d);
    for (Index bi = 0; bi < batch; ++bi) gp += g.middleRows(bi * tokens, tokens);
  });
}

Var split_heads(Var x, int heads, Index tokens) {
  tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 2)
    throw std::invalid_argument("split_heads: expects [rows,dim], got " + shape_str(xv.shape()));
  Index rows = xv.dim(0), dim = xv.dim(1);
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("split_heads: dim " + std::to_string(dim) + " not divisible by heads " +
                                std::to_string(heads));
  if (tokens < 1 || rows % tokens != 0)
    throw std::invalid_argument("split_heads: rows " + std::to_string(rows) + " not divisible by tokens " +
                                std::to_string(tokens));
  Index batch = rows / tokens, dh = dim / heads;
  auto map = std::make_shared<std::vector<Index>>(static_cast<size_t>(rows * dim));
  size_t i = 0;
  for (Index bi = 0; bi < batch; ++bi)
    for (Index hh = 0; hh < heads; ++hh)
      for (Index tt = 0; tt < tokens; ++tt)
        for (Index j = 0; j < dh; ++j, ++i) (*map)[i] = (bi * tokens + tt) * dim + hh * dh + j;
  return gather(x, {batch * heads, tokens, dh}, std::move(map));
}

Var merge_heads(Var x, int heads, Index tokens) {
  tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 3)
    throw std::invalid_argument("merge_heads: expects [groups,tokens,dh], got " + shape_str(xv.shape()));
  Index groups = xv.dim(0), tok = xv.dim(1), dh = xv.dim(2);
  if (tok != tokens)
    throw std::invalid_argument("merge_heads: token dimension " + std::to_string(tok) + " != " +
                                std::to_string(tokens));
  if (heads < 1 || groups % heads != 0)
    throw std::invalid_argument("merge_heads: groups " + std::to_string(groups) + " not divisible by heads " +
                                std::to_string(heads));
  Index batch = groups / heads, dim = dh * heads;
  auto map = std::make_shared<std::vector<Index>>(static_cast<size_t>(groups * tok * dh));
  size_t i = 0;
  for (Index bi = 0; bi < batch; ++bi)
    for (Index tt = 0; tt < tokens; ++tt)
      for (Index hh = 0; hh < heads; ++hh)
        for (Index j = 0; j < dh; ++j, ++i) (*map)[i] = ((bi * heads + hh) * tokens + tt) * dh + j;
  return gather(x, {batch * tokens, dim}, std::move(map));
}

Var take_cls(Var x, Index tokens) {
  tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 2)
    throw std::invalid_argument("take_cls: expects [rows,dim], got " + shape_str(xv.shape()));
  Index rows = xv.dim(0), dim = xv.dim(1);
  if (tokens < 1 || rows % tokens != 0)
    throw std::invalid_argument("take_cls: rows " + std::to_string(rows) + " not divisible by tokens " +
                                std::to_string(tokens));
  Index batch = rows / tokens;
  auto map = std::make_shared<std::vector<Index>>(static_cast<size_t>(batch * dim));
  size_t i = 0;
  for (Index bi = 0; bi < batch; ++bi)
    for (Index j = 0; j < dim; ++j, ++i) (*map)[i] = bi * tokens * dim + j;
  return gather(x, {batch, dim}, std::move(map));
}

Var attention(Var qkv, int heads, Index tokens) {
  const Tensor& qv = qkv.value();
  if (qv.ndim() != 2)
    throw std::invalid_argument("attention: expects fused [rows,3*dim] QKV, got " + shape_str(qv.shape()));
  Index fused = qv.dim(1);
  if (fused % 3 != 0)
    throw std::invalid_argument("attention: fused dimension " + std::to_string(fused) + " not divisible by 3");
  Index dim = fused / 3;
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                                std::to_string(heads));
  Var q = slice_cols(qkv, 0, dim);
  Var k = slice_cols(qkv, dim, dim);
  Var v = slice_cols(qkv, 2 * dim, dim);
  Var qh = split_heads(q, heads, tokens);
  Var kh = split_heads(k, heads, tokens);
  Var vh = split_heads(v, heads, tokens);
  double scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
  Var scores = affine(bmm(qh, kh, true), scale, 0.0);
  Var p = softmax_lastdim(scores);
  Var o = bmm(p, vh, false);
  return merge_heads(o, heads, tokens);
}

}  // namespace wf
