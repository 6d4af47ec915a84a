#include "ac/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ac/gemm.hpp"

namespace ac {

namespace {

int64_t leading_product(const std::vector<int64_t>& shape, size_t keep_last) {
  int64_t p = 1;
  for (size_t i = 0; i + keep_last < shape.size(); ++i) p *= shape[i];
  return p;
}

void check_finite(const Tensor& t, const char* who) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (std::isnan(t[i])) fail(ErrorKind::Numeric, std::string(who) + ": NaN in input");
}

// cols: P × (C*kh*kw) with P = oh*ow, q = (c*kh + dy)*kw + dx
void im2col(const float* in, float* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw) {
  const int64_t oh = H - kh + 1, ow = W - kw + 1, Q = C * kh * kw;
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox) {
      float* row = cols + (oy * ow + ox) * Q;
      int64_t q = 0;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < kh; ++dy) {
          const float* src = in + (c * H + oy + dy) * W + ox;
          for (int64_t dx = 0; dx < kw; ++dx) row[q++] = src[dx];
        }
    }
}

void col2im_add(const float* cols, float* din, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw) {
  const int64_t oh = H - kh + 1, ow = W - kw + 1, Q = C * kh * kw;
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox) {
      const float* row = cols + (oy * ow + ox) * Q;
      int64_t q = 0;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < kh; ++dy) {
          float* dst = din + (c * H + oy + dy) * W + ox;
          for (int64_t dx = 0; dx < kw; ++dx) dst[dx] += row[q++];
        }
    }
}

}  // namespace

Var Tape::push(Tensor value, std::function<void(Tape&)> back) {
  Node n;
  n.grad = Tensor(value.shape());
  n.value = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{int32_t(nodes_.size() - 1)};
}

void Tape::check_var(Var v, const char* who) const {
  if (!v.valid() || size_t(v.id) >= nodes_.size())
    fail(ErrorKind::Dimension, std::string(who) + ": invalid tape handle");
}

Var Tape::leaf(Tensor value) { return push(std::move(value), nullptr); }
Var Tape::constant(Tensor value) { return push(std::move(value), nullptr); }

const Tensor& Tape::value(Var v) const {
  check_var(v, "value");
  return nodes_[size_t(v.id)].value;
}

const Tensor& Tape::grad(Var v) const {
  check_var(v, "grad");
  return nodes_[size_t(v.id)].grad;
}

Var Tape::matmul(Var a, Var b) {
  check_var(a, "matmul");
  check_var(b, "matmul");
  const Tensor& A = vref(a);
  const Tensor& B = vref(b);
  if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
    fail(ErrorKind::Dimension, "matmul: incompatible shapes " + A.shape_string() + " and " + B.shape_string());
  const int64_t p = A.dim(0), q = A.dim(1), r = B.dim(1);
  Tensor C({p, r});
  gemm_nn(A.data(), B.data(), C.data(), p, q, r);
  Var out = push(std::move(C), nullptr);
  nodes_.back().back = [a, b, out, p, q, r](Tape& t) {
    const Tensor& A = t.vref(a);
    const Tensor& B = t.vref(b);
    const Tensor& gC = t.gref(out);
    gemm_nt(gC.data(), B.data(), t.gref(a).data(), p, r, q, true);
    gemm_tn(A.data(), gC.data(), t.gref(b).data(), q, p, r, true);
  };
  return out;
}

Var Tape::bmm(Var a, Var b) {
  check_var(a, "bmm");
  check_var(b, "bmm");
  const Tensor& A = vref(a);
  const Tensor& B = vref(b);
  const bool a3 = A.ndim() == 3, b3 = B.ndim() == 3;
  if ((!a3 && A.ndim() != 2) || (!b3 && B.ndim() != 2) || (!a3 && !b3))
    fail(ErrorKind::Dimension, "bmm: need a 3-D operand, got " + A.shape_string() + " and " + B.shape_string());
  const int64_t batch = a3 ? A.dim(0) : B.dim(0);
  if (a3 && b3 && A.dim(0) != B.dim(0))
    fail(ErrorKind::Dimension, "bmm: batch mismatch " + A.shape_string() + " vs " + B.shape_string());
  const int64_t p = A.dim(a3 ? 1 : 0), q = A.dim(a3 ? 2 : 1);
  const int64_t qb = B.dim(b3 ? 1 : 0), r = B.dim(b3 ? 2 : 1);
  if (q != qb)
    fail(ErrorKind::Dimension, "bmm: inner dims disagree " + A.shape_string() + " vs " + B.shape_string());

  Tensor C({batch, p, r});
  for (int64_t i = 0; i < batch; ++i)
    gemm_nn(A.data() + (a3 ? i * p * q : 0), B.data() + (b3 ? i * q * r : 0), C.data() + i * p * r, p, q, r);

  Var out = push(std::move(C), nullptr);
  nodes_.back().back = [a, b, out, a3, b3, batch, p, q, r](Tape& t) {
    const Tensor& A = t.vref(a);
    const Tensor& B = t.vref(b);
    const Tensor& gC = t.gref(out);
    Tensor& gA = t.gref(a);
    Tensor& gB = t.gref(b);
    for (int64_t i = 0; i < batch; ++i) {
      const float* gc = gC.data() + i * p * r;
      // dA += dC * B^T, dB += A^T * dC; shared operands accumulate in batch order
      gemm_nt(gc, B.data() + (b3 ? i * q * r : 0), gA.data() + (a3 ? i * p * q : 0), p, r, q, true);
      gemm_tn(A.data() + (a3 ? i * p * q : 0), gc, gB.data() + (b3 ? i * q * r : 0), q, p, r, true);
    }
  };
  return out;
}

Var Tape::conv2d(Var input, Var kernels, Var bias) {
  check_var(input, "conv2d");
  check_var(kernels, "conv2d");
  check_var(bias, "conv2d");
  const Tensor& X = vref(input);
  const Tensor& Kn = vref(kernels);
  const Tensor& Bv = vref(bias);
  const bool batched = X.ndim() == 4;
  if (X.ndim() != 3 && X.ndim() != 4)
    fail(ErrorKind::Dimension, "conv2d: input must be C×H×W or B×C×H×W, got " + X.shape_string());
  if (Kn.ndim() != 4) fail(ErrorKind::Dimension, "conv2d: kernels must be K×C×kh×kw, got " + Kn.shape_string());
  const int64_t B = batched ? X.dim(0) : 1;
  const int64_t C = X.dim(batched ? 1 : 0), H = X.dim(batched ? 2 : 1), W = X.dim(batched ? 3 : 2);
  const int64_t K = Kn.dim(0), kh = Kn.dim(2), kw = Kn.dim(3);
  if (Kn.dim(1) != C)
    fail(ErrorKind::Dimension, "conv2d: kernel channels " + Kn.shape_string() + " do not match input " + X.shape_string());
  if (H < kh || W < kw)
    fail(ErrorKind::Dimension, "conv2d: spatial dims " + X.shape_string() + " smaller than kernel " + Kn.shape_string());
  if (Bv.ndim() != 1 || Bv.dim(0) != K)
    fail(ErrorKind::Dimension, "conv2d: bias " + Bv.shape_string() + " must have one entry per filter (" +
                                   std::to_string(K) + ")");

  const int64_t oh = H - kh + 1, ow = W - kw + 1, P = oh * ow, Q = C * kh * kw;
  std::vector<int64_t> oshape = batched ? std::vector<int64_t>{B, K, oh, ow} : std::vector<int64_t>{K, oh, ow};
  Tensor Y(oshape);
  std::vector<float> cols(size_t(P * Q));
  for (int64_t i = 0; i < B; ++i) {
    im2col(X.data() + i * C * H * W, cols.data(), C, H, W, kh, kw);
    float* y = Y.data() + i * K * P;
    gemm_nt(Kn.data(), cols.data(), y, K, Q, P);
    for (int64_t k = 0; k < K; ++k) {
      const float bv = Bv[k];
      float* yk = y + k * P;
      for (int64_t pp = 0; pp < P; ++pp) yk[pp] += bv;
    }
  }

  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [input, kernels, bias, out, B, C, H, W, K, kh, kw, P, Q](Tape& t) {
    const Tensor& X = t.vref(input);
    const Tensor& Kn = t.vref(kernels);
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(input);
    Tensor& gK = t.gref(kernels);
    Tensor& gB = t.gref(bias);
    std::vector<float> cols(size_t(P * Q)), dcols(size_t(P * Q));
    for (int64_t i = 0; i < B; ++i) {
      const float* gy = gY.data() + i * K * P;
      im2col(X.data() + i * C * H * W, cols.data(), C, H, W, kh, kw);
      gemm_nn(gy, cols.data(), gK.data(), K, P, Q, true);
      for (int64_t k = 0; k < K; ++k) {
        double s = 0.0;
        const float* gyk = gy + k * P;
        for (int64_t pp = 0; pp < P; ++pp) s += gyk[pp];
        gB[k] += float(s);
      }
      gemm_tn(gy, Kn.data(), dcols.data(), P, K, Q);
      col2im_add(dcols.data(), gX.data() + i * C * H * W, C, H, W, kh, kw);
    }
  };
  return out;
}

Var Tape::maxpool2(Var input) {
  check_var(input, "maxpool2");
  const Tensor& X = vref(input);
  const bool batched = X.ndim() == 4;
  if (X.ndim() != 3 && X.ndim() != 4)
    fail(ErrorKind::Dimension, "maxpool2: input must be C×H×W or B×C×H×W, got " + X.shape_string());
  const int64_t H = X.dim(X.ndim() - 2), W = X.dim(X.ndim() - 1);
  if (H % 2 != 0 || W % 2 != 0)
    fail(ErrorKind::Dimension, "maxpool2: spatial dims must be even, got " + X.shape_string());
  const int64_t planes = leading_product(X.shape(), 2);
  const int64_t oh = H / 2, ow = W / 2;

  std::vector<int64_t> oshape = X.shape();
  oshape[oshape.size() - 2] = oh;
  oshape[oshape.size() - 1] = ow;
  Tensor Y(oshape);
  std::vector<int64_t> argmax(size_t(planes * oh * ow));
  for (int64_t pl = 0; pl < planes; ++pl) {
    const float* xp = X.data() + pl * H * W;
    float* yp = Y.data() + pl * oh * ow;
    int64_t* am = argmax.data() + pl * oh * ow;
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        // row-major scan with strict > keeps the first index on ties
        int64_t best = (2 * y) * W + 2 * x;
        float bv = xp[best];
        const int64_t cand[3] = {(2 * y) * W + 2 * x + 1, (2 * y + 1) * W + 2 * x, (2 * y + 1) * W + 2 * x + 1};
        for (int64_t c : cand)
          if (xp[c] > bv) {
            bv = xp[c];
            best = c;
          }
        yp[y * ow + x] = bv;
        am[y * ow + x] = best;
      }
  }
  (void)batched;

  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [input, out, planes, H, W, oh, ow, argmax = std::move(argmax)](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(input);
    for (int64_t pl = 0; pl < planes; ++pl) {
      const float* gyp = gY.data() + pl * oh * ow;
      float* gxp = gX.data() + pl * H * W;
      const int64_t* am = argmax.data() + pl * oh * ow;
      for (int64_t i = 0; i < oh * ow; ++i) gxp[am[i]] += gyp[i];
    }
  };
  return out;
}

Var Tape::relu(Var x) {
  check_var(x, "relu");
  const Tensor& X = vref(x);
  Tensor Y(X.shape());
  for (int64_t i = 0; i < X.numel(); ++i) Y[i] = X[i] > 0.0f ? X[i] : 0.0f;
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out](Tape& t) {
    const Tensor& X = t.vref(x);
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    for (int64_t i = 0; i < X.numel(); ++i)
      if (X[i] > 0.0f) gX[i] += gY[i];
  };
  return out;
}

Var Tape::tanh(Var x) {
  check_var(x, "tanh");
  const Tensor& X = vref(x);
  Tensor Y(X.shape());
  for (int64_t i = 0; i < X.numel(); ++i) Y[i] = std::tanh(X[i]);
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out](Tape& t) {
    const Tensor& Y = t.vref(out);
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    for (int64_t i = 0; i < Y.numel(); ++i) gX[i] += (1.0f - Y[i] * Y[i]) * gY[i];
  };
  return out;
}

Var Tape::softmax(Var x) {
  check_var(x, "softmax");
  const Tensor& X = vref(x);
  if (X.ndim() < 1) fail(ErrorKind::Dimension, "softmax: scalar input");
  check_finite(X, "softmax");
  const int64_t D = X.dim(X.ndim() - 1);
  const int64_t rows = leading_product(X.shape(), 1);
  Tensor Y(X.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = X.data() + r * D;
    float* yr = Y.data() + r * D;
    float m = xr[0];
    for (int64_t j = 1; j < D; ++j) m = std::max(m, xr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < D; ++j) {
      const double e = std::exp(double(xr[j]) - double(m));
      yr[j] = float(e);
      sum += e;
    }
    const float inv = float(1.0 / sum);
    for (int64_t j = 0; j < D; ++j) yr[j] *= inv;
  }
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out, rows, D](Tape& t) {
    const Tensor& Y = t.vref(out);
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    for (int64_t r = 0; r < rows; ++r) {
      const float* yr = Y.data() + r * D;
      const float* gr = gY.data() + r * D;
      float* gx = gX.data() + r * D;
      double dot = 0.0;
      for (int64_t j = 0; j < D; ++j) dot += double(gr[j]) * double(yr[j]);
      for (int64_t j = 0; j < D; ++j) gx[j] += yr[j] * (gr[j] - float(dot));
    }
  };
  return out;
}

Var Tape::l2normalize(Var x, float scale) {
  check_var(x, "l2normalize");
  const Tensor& X = vref(x);
  if (X.ndim() < 1) fail(ErrorKind::Dimension, "l2normalize: scalar input");
  const int64_t D = X.dim(X.ndim() - 1);
  const int64_t rows = leading_product(X.shape(), 1);
  Tensor Y(X.shape());
  std::vector<float> norms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = X.data() + r * D;
    double ss = 0.0;
    for (int64_t j = 0; j < D; ++j) ss += double(xr[j]) * double(xr[j]);
    const double n = std::sqrt(ss);
    // NaN is a numeric failure upstream, not a degenerate-but-valid vector
    if (std::isnan(n)) fail(ErrorKind::Numeric, "l2normalize: NaN norm");
    if (!(n > kDegenerateNorm))
      fail(ErrorKind::Degenerate, "l2normalize: vector norm " + std::to_string(n) + " at or below " +
                                      std::to_string(kDegenerateNorm));
    norms[size_t(r)] = float(n);
    const float s = float(double(scale) / n);
    float* yr = Y.data() + r * D;
    for (int64_t j = 0; j < D; ++j) yr[j] = xr[j] * s;
  }
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out, rows, D, scale, norms = std::move(norms)](Tape& t) {
    const Tensor& Y = t.vref(out);
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    for (int64_t r = 0; r < rows; ++r) {
      const float* yr = Y.data() + r * D;
      const float* gr = gY.data() + r * D;
      float* gx = gX.data() + r * D;
      const float n = norms[size_t(r)];
      double dot = 0.0;  // Σ gY·y = scale · (gY · x̂)
      for (int64_t j = 0; j < D; ++j) dot += double(gr[j]) * double(yr[j]);
      const float c = float(dot / double(scale));
      for (int64_t j = 0; j < D; ++j) gx[j] += (scale * gr[j] - c * yr[j]) / n;
    }
  };
  return out;
}

Var Tape::dropout(Var x, float p, bool train, Rng& rng) {
  check_var(x, "dropout");
  if (!(p >= 0.0f && p < 1.0f))
    fail(ErrorKind::Config, "dropout: probability must be in [0,1), got " + std::to_string(p));
  const Tensor& X = vref(x);
  if (!train) {
    Tensor Y = X;
    Var out = push(std::move(Y), nullptr);
    nodes_.back().back = [x, out](Tape& t) {
      const Tensor& gY = t.gref(out);
      Tensor& gX = t.gref(x);
      for (int64_t i = 0; i < gY.numel(); ++i) gX[i] += gY[i];
    };
    return out;
  }
  const float keep = 1.0f - p;
  const float inv_keep = 1.0f / keep;
  std::vector<uint8_t> mask(size_t(X.numel()));
  Tensor Y(X.shape());
  for (int64_t i = 0; i < X.numel(); ++i) {
    mask[size_t(i)] = rng.bernoulli(keep) ? 1 : 0;
    Y[i] = mask[size_t(i)] ? X[i] * inv_keep : 0.0f;
  }
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out, inv_keep, mask = std::move(mask)](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    for (int64_t i = 0; i < gY.numel(); ++i)
      if (mask[size_t(i)]) gX[i] += gY[i] * inv_keep;
  };
  return out;
}

Var Tape::concat(const std::vector<Var>& xs) {
  if (xs.empty()) fail(ErrorKind::Config, "concat: empty input list");
  for (Var v : xs) check_var(v, "concat");
  const Tensor& first = vref(xs[0]);
  const int64_t rows = leading_product(first.shape(), 1);
  int64_t total = 0;
  std::vector<int64_t> widths;
  for (Var v : xs) {
    const Tensor& X = vref(v);
    if (X.ndim() != first.ndim() || leading_product(X.shape(), 1) != rows ||
        !std::equal(X.shape().begin(), X.shape().end() - 1, first.shape().begin()))
      fail(ErrorKind::Dimension,
           "concat: leading dims disagree, " + first.shape_string() + " vs " + X.shape_string());
    widths.push_back(X.dim(X.ndim() - 1));
    total += widths.back();
  }
  std::vector<int64_t> oshape = first.shape();
  oshape.back() = total;
  Tensor Y(oshape);
  int64_t off = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const Tensor& X = vref(xs[i]);
    const int64_t w = widths[i];
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(Y.data() + r * total + off, X.data() + r * w, sizeof(float) * size_t(w));
    off += w;
  }
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [inputs = xs, out, rows, total, widths](Tape& t) {
    const Tensor& gY = t.gref(out);
    int64_t off = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
      Tensor& gX = t.gref(inputs[i]);
      const int64_t w = widths[i];
      for (int64_t r = 0; r < rows; ++r) {
        const float* src = gY.data() + r * total + off;
        float* dst = gX.data() + r * w;
        for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
      }
      off += w;
    }
  };
  return out;
}

Var Tape::add(Var a, Var b) {
  check_var(a, "add");
  check_var(b, "add");
  const Tensor& A = vref(a);
  const Tensor& B = vref(b);
  if (!A.same_shape(B))
    fail(ErrorKind::Dimension, "add: shapes disagree " + A.shape_string() + " vs " + B.shape_string());
  Tensor Y(A.shape());
  for (int64_t i = 0; i < A.numel(); ++i) Y[i] = A[i] + B[i];
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [a, b, out](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gA = t.gref(a);
    Tensor& gB = t.gref(b);
    for (int64_t i = 0; i < gY.numel(); ++i) {
      gA[i] += gY[i];
      gB[i] += gY[i];
    }
  };
  return out;
}

Var Tape::add_bias(Var x, Var bias) {
  check_var(x, "add_bias");
  check_var(bias, "add_bias");
  const Tensor& X = vref(x);
  const Tensor& Bv = vref(bias);
  const int64_t D = X.dim(X.ndim() - 1);
  if (Bv.ndim() != 1 || Bv.dim(0) != D)
    fail(ErrorKind::Dimension, "add_bias: bias " + Bv.shape_string() + " vs last axis of " + X.shape_string());
  const int64_t rows = leading_product(X.shape(), 1);
  Tensor Y(X.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = X.data() + r * D;
    float* yr = Y.data() + r * D;
    for (int64_t j = 0; j < D; ++j) yr[j] = xr[j] + Bv[j];
  }
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, bias, out, rows, D](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    Tensor& gB = t.gref(bias);
    for (int64_t r = 0; r < rows; ++r) {
      const float* gr = gY.data() + r * D;
      float* gx = gX.data() + r * D;
      for (int64_t j = 0; j < D; ++j) {
        gx[j] += gr[j];
        gB[j] += gr[j];
      }
    }
  };
  return out;
}

Var Tape::unit_affine(Var v, Var alpha, Var beta) {
  check_var(v, "unit_affine");
  check_var(alpha, "unit_affine");
  check_var(beta, "unit_affine");
  const Tensor& V = vref(v);
  const Tensor& A = vref(alpha);
  const Tensor& B = vref(beta);
  if (V.ndim() != 3) fail(ErrorKind::Dimension, "unit_affine: expected B×N×M, got " + V.shape_string());
  const int64_t batch = V.dim(0), N = V.dim(1), M = V.dim(2);
  if (A.ndim() != 1 || A.dim(0) != N || B.ndim() != 1 || B.dim(0) != N)
    fail(ErrorKind::Dimension, "unit_affine: alpha/beta " + A.shape_string() + "/" + B.shape_string() +
                                   " must be [" + std::to_string(N) + "]");
  Tensor Y(V.shape());
  for (int64_t i = 0; i < batch; ++i)
    for (int64_t n = 0; n < N; ++n) {
      const float al = A[n], be = B[n];
      const float* vr = V.data() + (i * N + n) * M;
      float* yr = Y.data() + (i * N + n) * M;
      for (int64_t m = 0; m < M; ++m) yr[m] = al * vr[m] + be;
    }
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [v, alpha, beta, out, batch, N, M](Tape& t) {
    const Tensor& V = t.vref(v);
    const Tensor& A = t.vref(alpha);
    const Tensor& gY = t.gref(out);
    Tensor& gV = t.gref(v);
    Tensor& gA = t.gref(alpha);
    Tensor& gB = t.gref(beta);
    for (int64_t n = 0; n < N; ++n) {
      const float al = A[n];
      double da = 0.0, db = 0.0;
      for (int64_t i = 0; i < batch; ++i) {
        const float* vr = V.data() + (i * N + n) * M;
        const float* gr = gY.data() + (i * N + n) * M;
        float* gv = gV.data() + (i * N + n) * M;
        for (int64_t m = 0; m < M; ++m) {
          gv[m] += al * gr[m];
          da += double(gr[m]) * double(vr[m]);
          db += double(gr[m]);
        }
      }
      gA[n] += float(da);
      gB[n] += float(db);
    }
  };
  return out;
}

Var Tape::swap_last2(Var x) {
  check_var(x, "swap_last2");
  const Tensor& X = vref(x);
  if (X.ndim() < 2) fail(ErrorKind::Dimension, "swap_last2: need at least 2 dims, got " + X.shape_string());
  const int64_t p = X.dim(X.ndim() - 2), q = X.dim(X.ndim() - 1);
  const int64_t slabs = leading_product(X.shape(), 2);
  std::vector<int64_t> oshape = X.shape();
  std::swap(oshape[oshape.size() - 2], oshape[oshape.size() - 1]);
  Tensor Y(oshape);
  for (int64_t s = 0; s < slabs; ++s) transpose_rm(X.data() + s * p * q, Y.data() + s * p * q, p, q);
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out, slabs, p, q](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    std::vector<float> tmp(size_t(p * q));
    for (int64_t s = 0; s < slabs; ++s) {
      transpose_rm(gY.data() + s * p * q, tmp.data(), q, p);
      float* gx = gX.data() + s * p * q;
      for (int64_t i = 0; i < p * q; ++i) gx[i] += tmp[size_t(i)];
    }
  };
  return out;
}

Var Tape::slice_dim0(Var x, int64_t index) {
  check_var(x, "slice_dim0");
  const Tensor& X = vref(x);
  if (X.ndim() < 1) fail(ErrorKind::Dimension, "slice_dim0: scalar input " + X.shape_string());
  if (index < 0 || index >= X.dim(0))
    fail(ErrorKind::Dimension, "slice_dim0: index " + std::to_string(index) + " out of range for " +
                                   X.shape_string());
  std::vector<int64_t> oshape(X.shape().begin() + 1, X.shape().end());
  if (oshape.empty()) oshape = {1};
  const int64_t block = X.numel() / X.dim(0);
  Tensor Y(oshape);
  std::memcpy(Y.data(), X.data() + index * block, sizeof(float) * size_t(block));
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out, index, block](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    float* dst = gX.data() + index * block;
    for (int64_t i = 0; i < block; ++i) dst[i] += gY[i];
  };
  return out;
}

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
  check_var(x, "reshape");
  Tensor Y = vref(x).reshaped(std::move(shape));
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    for (int64_t i = 0; i < gY.numel(); ++i) gX[i] += gY[i];
  };
  return out;
}

Var Tape::scale(Var x, float c) {
  check_var(x, "scale");
  const Tensor& X = vref(x);
  Tensor Y(X.shape());
  for (int64_t i = 0; i < X.numel(); ++i) Y[i] = c * X[i];
  Var out = push(std::move(Y), nullptr);
  nodes_.back().back = [x, out, c](Tape& t) {
    const Tensor& gY = t.gref(out);
    Tensor& gX = t.gref(x);
    for (int64_t i = 0; i < gY.numel(); ++i) gX[i] += c * gY[i];
  };
  return out;
}

Var Tape::cross_entropy(Var logits, const std::vector<uint16_t>& labels) {
  check_var(logits, "cross_entropy");
  const Tensor& X = vref(logits);
  if (X.ndim() != 2) fail(ErrorKind::Dimension, "cross_entropy: logits must be B×C, got " + X.shape_string());
  const int64_t B = X.dim(0), C = X.dim(1);
  if (int64_t(labels.size()) != B)
    fail(ErrorKind::Consistency, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                     std::to_string(B));
  check_finite(X, "cross_entropy");
  Tensor probs({B, C});
  double loss = 0.0;
  for (int64_t i = 0; i < B; ++i) {
    if (labels[size_t(i)] >= C)
      fail(ErrorKind::Data, "cross_entropy: label " + std::to_string(labels[size_t(i)]) + " out of range [0," +
                                std::to_string(C) + ")");
    const float* xr = X.data() + i * C;
    float m = xr[0];
    for (int64_t j = 1; j < C; ++j) m = std::max(m, xr[j]);
    double sum = 0.0;
    float* pr = probs.data() + i * C;
    for (int64_t j = 0; j < C; ++j) {
      const double e = std::exp(double(xr[j]) - double(m));
      pr[j] = float(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < C; ++j) pr[j] = float(double(pr[j]) * inv);
    loss -= double(xr[labels[size_t(i)]]) - double(m) - std::log(sum);
  }
  loss /= double(B);
  Var out = push(Tensor::scalar(float(loss)), nullptr);
  nodes_.back().back = [logits, out, B, C, labels, probs = std::move(probs)](Tape& t) {
    const float g = t.gref(out)[0] / float(B);
    Tensor& gX = t.gref(logits);
    for (int64_t i = 0; i < B; ++i) {
      const float* pr = probs.data() + i * C;
      float* gx = gX.data() + i * C;
      for (int64_t j = 0; j < C; ++j) gx[j] += g * pr[j];
      gx[labels[size_t(i)]] -= g;
    }
  };
  return out;
}

void Tape::backward(Var root) {
  check_var(root, "backward");
  if (vref(root).numel() != 1)
    fail(ErrorKind::Dimension, "backward: root must be scalar, got " + vref(root).shape_string());
  for (auto& n : nodes_) std::fill(n.grad.vec().begin(), n.grad.vec().end(), 0.0f);
  gref(root)[0] = 1.0f;
  for (int32_t i = root.id; i >= 0; --i)
    if (nodes_[size_t(i)].back) nodes_[size_t(i)].back(*this);
}

}  // namespace ac
