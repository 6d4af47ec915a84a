#pragma once

// Randomized gradient sweep: every differentiable op (and a few composite
// chains that mirror the real models) is checked against the 64-bit
// central-difference oracle in fd_oracle.hpp. The suite returns per-family
// reports so both the unit tests and the acceptance harness can run it.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ac/rng.hpp"
#include "ac/tape.hpp"
#include "ac/tensor.hpp"
#include "fd_oracle.hpp"

namespace gradcheck {

struct OpReport {
  std::string op;
  int instances = 0;
  double max_rel = 0.0;      // worst aggregate gradient error across instances/inputs
  double max_forward = 0.0;  // worst |f32 loss − f64 loss| / max(1,|loss|)
};

struct Case {
  std::vector<ac::Tensor> inputs;
  std::function<ac::Var(ac::Tape&, const std::vector<ac::Var>&)> build;  // must yield a scalar
  oracle::LossFn loss;
};

// ---- helpers shared by the case builders ----

inline std::vector<float> rand_vec(ac::Rng& g, int64_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = float(lo + (hi - lo) * g.uniform());
  return v;
}

inline ac::Tensor rand_tensor(ac::Rng& g, std::vector<int64_t> shape, double lo = -1.0,
                              double hi = 1.0) {
  auto n = ac::Tensor::numel_of(shape);
  return ac::Tensor(std::move(shape), rand_vec(g, n, lo, hi));
}

inline oracle::vecd to64(const ac::Tensor& t) {
  oracle::vecd v(size_t(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) v[size_t(i)] = double(t[i]);
  return v;
}

inline oracle::vecd to64(const std::vector<float>& t) {
  oracle::vecd v(t.size());
  for (size_t i = 0; i < t.size(); ++i) v[i] = double(t[i]);
  return v;
}

// Flatten the op output into a scalar with fixed pseudo-random weights so the
// upstream gradient is non-trivial.
inline ac::Var ws(ac::Tape& t, ac::Var y, const std::vector<float>& w) {
  const int64_t n = t.value(y).numel();
  ac::Var flat = t.reshape(y, {1, n});
  ac::Var wv = t.constant(ac::Tensor({n, 1}, w));
  return t.matmul(flat, wv);
}

struct CaseResult {
  double rel = 0.0;
  double forward = 0.0;
};

inline CaseResult run_case(const Case& c, double h = 1e-3) {
  ac::Tape tape;
  std::vector<ac::Var> vars;
  vars.reserve(c.inputs.size());
  for (const auto& in : c.inputs) vars.push_back(tape.leaf(in));
  ac::Var root = c.build(tape, vars);
  tape.backward(root);

  std::vector<oracle::vecd> x64;
  x64.reserve(c.inputs.size());
  for (const auto& in : c.inputs) x64.push_back(to64(in));

  CaseResult res;
  const double f64v = c.loss(x64);
  const double f32v = double(tape.value(root)[0]);
  res.forward = std::abs(f32v - f64v) / std::max(1.0, std::abs(f64v));

  const auto numeric = oracle::fd_grads(c.loss, x64, h);
  for (size_t i = 0; i < vars.size(); ++i) {
    const double rel = oracle::rel_error(to64(tape.grad(vars[i])), numeric[i]);
    res.rel = std::max(res.rel, rel);
  }
  return res;
}

// ---- case builders, one family per differentiable op ----

inline std::vector<Case> cases_matmul(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t p = 1 + int64_t(g.uniform_int(6)), q = 1 + int64_t(g.uniform_int(6)),
                  r = 1 + int64_t(g.uniform_int(6));
    auto w = rand_vec(g, p * r);
    Case c;
    c.inputs = {rand_tensor(g, {p, q}), rand_tensor(g, {q, r})};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) {
      return ws(t, t.matmul(v[0], v[1]), w);
    };
    c.loss = [w, p, q, r](const std::vector<oracle::vecd>& x) {
      return oracle::weighted_sum(oracle::matmul(x[0], x[1], p, q, r), w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_bmm(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int mode = i % 3;  // 0: 3D×3D, 1: 3D×2D, 2: 2D×3D
    const int64_t B = 1 + int64_t(g.uniform_int(3)), p = 1 + int64_t(g.uniform_int(5)),
                  q = 1 + int64_t(g.uniform_int(5)), r = 1 + int64_t(g.uniform_int(5));
    auto w = rand_vec(g, B * p * r);
    Case c;
    if (mode == 0)
      c.inputs = {rand_tensor(g, {B, p, q}), rand_tensor(g, {B, q, r})};
    else if (mode == 1)
      c.inputs = {rand_tensor(g, {B, p, q}), rand_tensor(g, {q, r})};
    else
      c.inputs = {rand_tensor(g, {p, q}), rand_tensor(g, {B, q, r})};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) {
      return ws(t, t.bmm(v[0], v[1]), w);
    };
    c.loss = [w, mode, B, p, q, r](const std::vector<oracle::vecd>& x) {
      oracle::vecd y(size_t(B * p * r));
      for (int64_t b = 0; b < B; ++b) {
        oracle::vecd a(x[0].begin() + (mode == 2 ? 0 : b * p * q),
                       x[0].begin() + (mode == 2 ? p * q : (b + 1) * p * q));
        oracle::vecd bb(x[1].begin() + (mode == 1 ? 0 : b * q * r),
                        x[1].begin() + (mode == 1 ? q * r : (b + 1) * q * r));
        auto prod = oracle::matmul(a, bb, p, q, r);
        std::copy(prod.begin(), prod.end(), y.begin() + b * p * r);
      }
      return oracle::weighted_sum(y, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_conv2d(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const bool batched = i % 2 == 0;
    const int64_t B = batched ? 1 + int64_t(g.uniform_int(2)) : 1;
    const int64_t C = 1 + int64_t(g.uniform_int(2)), K = 1 + int64_t(g.uniform_int(3));
    const int64_t kh = 1 + int64_t(g.uniform_int(3)), kw = 1 + int64_t(g.uniform_int(3));
    const int64_t H = kh + int64_t(g.uniform_int(4)), W = kw + int64_t(g.uniform_int(4));
    const int64_t oh = H - kh + 1, ow = W - kw + 1;
    auto w = rand_vec(g, B * K * oh * ow);
    Case c;
    std::vector<int64_t> xshape =
        batched ? std::vector<int64_t>{B, C, H, W} : std::vector<int64_t>{C, H, W};
    c.inputs = {rand_tensor(g, xshape), rand_tensor(g, {K, C, kh, kw}), rand_tensor(g, {K})};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) {
      return ws(t, t.conv2d(v[0], v[1], v[2]), w);
    };
    c.loss = [w, B, C, H, W, K, kh, kw](const std::vector<oracle::vecd>& x) {
      return oracle::weighted_sum(oracle::conv2d(x[0], x[1], x[2], B, C, H, W, K, kh, kw), w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_maxpool2(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const bool batched = i % 2 == 0;
    const int64_t B = batched ? 1 + int64_t(g.uniform_int(2)) : 1;
    const int64_t C = 1 + int64_t(g.uniform_int(3));
    const int64_t H = 2 * (1 + int64_t(g.uniform_int(3))), W = 2 * (1 + int64_t(g.uniform_int(3)));
    std::vector<int64_t> shape =
        batched ? std::vector<int64_t>{B, C, H, W} : std::vector<int64_t>{C, H, W};
    ac::Tensor x = rand_tensor(g, shape);
    // Finite differences flip the argmax when two window entries are within
    // 2h of each other; spread each window so the max is isolated.
    const int64_t planes = B * C, oh = H / 2, ow = W / 2;
    for (int64_t p = 0; p < planes; ++p)
      for (int64_t yy = 0; yy < oh; ++yy)
        for (int64_t xx = 0; xx < ow; ++xx) {
          float* base = x.data() + p * H * W;
          float* cell[4] = {base + 2 * yy * W + 2 * xx, base + 2 * yy * W + 2 * xx + 1,
                            base + (2 * yy + 1) * W + 2 * xx, base + (2 * yy + 1) * W + 2 * xx + 1};
          int best = 0;
          for (int k = 1; k < 4; ++k)
            if (*cell[k] > *cell[best]) best = k;
          *cell[best] += 0.25f;  // gap of at least 0.25 ≫ 2h
        }
    auto w = rand_vec(g, planes * oh * ow);
    Case c;
    c.inputs = {std::move(x)};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) {
      return ws(t, t.maxpool2(v[0]), w);
    };
    c.loss = [w, planes, H, W](const std::vector<oracle::vecd>& x) {
      return oracle::weighted_sum(oracle::maxpool2(x[0], planes, H, W), w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_relu(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t a = 1 + int64_t(g.uniform_int(4)), b = 1 + int64_t(g.uniform_int(6));
    ac::Tensor x = rand_tensor(g, {a, b});
    // keep values away from the kink at 0 so FD sees a smooth function
    for (int64_t j = 0; j < x.numel(); ++j) x[j] += x[j] >= 0.0f ? 0.05f : -0.05f;
    auto w = rand_vec(g, a * b);
    Case c;
    c.inputs = {std::move(x)};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) { return ws(t, t.relu(v[0]), w); };
    c.loss = [w](const std::vector<oracle::vecd>& x) {
      return oracle::weighted_sum(oracle::relu(x[0]), w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_tanh(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t a = 1 + int64_t(g.uniform_int(4)), b = 1 + int64_t(g.uniform_int(6));
    auto w = rand_vec(g, a * b);
    Case c;
    c.inputs = {rand_tensor(g, {a, b}, -2.0, 2.0)};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) { return ws(t, t.tanh(v[0]), w); };
    c.loss = [w](const std::vector<oracle::vecd>& x) {
      return oracle::weighted_sum(oracle::tanh_all(x[0]), w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_softmax(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t R = 1 + int64_t(g.uniform_int(4)), D = 1 + int64_t(g.uniform_int(6));
    auto w = rand_vec(g, R * D);
    Case c;
    c.inputs = {rand_tensor(g, {R, D}, -2.0, 2.0)};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) { return ws(t, t.softmax(v[0]), w); };
    c.loss = [w, R, D](const std::vector<oracle::vecd>& x) {
      return oracle::weighted_sum(oracle::softmax_rows(x[0], R, D), w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_l2normalize(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t R = 1 + int64_t(g.uniform_int(3)), D = 2 + int64_t(g.uniform_int(5));
    const float scale = i % 2 == 0 ? 1.0f : 0.5f;
    ac::Tensor x = rand_tensor(g, {R, D});
    for (int64_t r = 0; r < R; ++r) {
      // keep each slice's norm well above the FD step
      double ss = 0.0;
      for (int64_t j = 0; j < D; ++j) ss += double(x[r * D + j]) * double(x[r * D + j]);
      if (ss < 0.25) x[r * D] += 1.0f;
    }
    auto w = rand_vec(g, R * D);
    Case c;
    c.inputs = {std::move(x)};
    c.build = [w, scale](ac::Tape& t, const std::vector<ac::Var>& v) {
      return ws(t, t.l2normalize(v[0], scale), w);
    };
    c.loss = [w, R, D, scale](const std::vector<oracle::vecd>& x) {
      return oracle::weighted_sum(oracle::l2normalize_rows(x[0], R, D, double(scale)), w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_dropout(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t m = 4 + int64_t(g.uniform_int(9));
    const float p = i % 3 == 0 ? 0.0f : (i % 3 == 1 ? 0.3f : 0.5f);
    const uint64_t mask_seed = g.next_u64();
    // The mask is a deterministic function of the rng seed (one bernoulli
    // draw per element, index order), so the oracle can reproduce it.
    std::vector<uint8_t> mask(static_cast<size_t>(m));
    {
      ac::Rng mg(mask_seed);
      for (auto& b : mask) b = mg.bernoulli(1.0 - double(p)) ? 1 : 0;
    }
    auto w = rand_vec(g, m);
    Case c;
    c.inputs = {rand_tensor(g, {m}, 0.5, 1.5)};
    c.build = [w, p, mask_seed](ac::Tape& t, const std::vector<ac::Var>& v) {
      ac::Rng rng(mask_seed);
      return ws(t, t.dropout(v[0], p, true, rng), w);
    };
    c.loss = [w, p, mask](const std::vector<oracle::vecd>& x) {
      oracle::vecd y(x[0].size());
      const double inv = 1.0 / (1.0 - double(p));
      for (size_t j = 0; j < y.size(); ++j) y[j] = mask[j] ? x[0][j] * inv : 0.0;
      return oracle::weighted_sum(y, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_concat(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t R = 1 + int64_t(g.uniform_int(3));
    const int parts = 2 + i % 2;
    std::vector<int64_t> widths;
    int64_t total = 0;
    std::vector<ac::Tensor> inputs;
    for (int k = 0; k < parts; ++k) {
      widths.push_back(1 + int64_t(g.uniform_int(4)));
      total += widths.back();
      inputs.push_back(rand_tensor(g, {R, widths.back()}));
    }
    auto w = rand_vec(g, R * total);
    Case c;
    c.inputs = std::move(inputs);
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) { return ws(t, t.concat(v), w); };
    c.loss = [w, R, widths, total](const std::vector<oracle::vecd>& x) {
      oracle::vecd y(size_t(R * total));
      int64_t off = 0;
      for (size_t k = 0; k < widths.size(); ++k) {
        for (int64_t r = 0; r < R; ++r)
          for (int64_t j = 0; j < widths[k]; ++j) y[size_t(r * total + off + j)] = x[k][size_t(r * widths[k] + j)];
        off += widths[k];
      }
      return oracle::weighted_sum(y, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_add_bias(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t R = 1 + int64_t(g.uniform_int(4)), D = 1 + int64_t(g.uniform_int(5));
    auto w = rand_vec(g, R * D);
    Case c;
    c.inputs = {rand_tensor(g, {R, D}), rand_tensor(g, {D})};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) {
      return ws(t, t.add_bias(v[0], v[1]), w);
    };
    c.loss = [w, R, D](const std::vector<oracle::vecd>& x) {
      oracle::vecd y(size_t(R * D));
      for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < D; ++j) y[size_t(r * D + j)] = x[0][size_t(r * D + j)] + x[1][size_t(j)];
      return oracle::weighted_sum(y, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_unit_affine(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t B = 1 + int64_t(g.uniform_int(3)), N = 1 + int64_t(g.uniform_int(3)),
                  M = 1 + int64_t(g.uniform_int(4));
    auto w = rand_vec(g, B * N * M);
    Case c;
    c.inputs = {rand_tensor(g, {B, N, M}), rand_tensor(g, {N}), rand_tensor(g, {N})};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) {
      return ws(t, t.unit_affine(v[0], v[1], v[2]), w);
    };
    c.loss = [w, B, N, M](const std::vector<oracle::vecd>& x) {
      oracle::vecd y(size_t(B * N * M));
      for (int64_t b = 0; b < B; ++b)
        for (int64_t u = 0; u < N; ++u)
          for (int64_t m = 0; m < M; ++m)
            y[size_t((b * N + u) * M + m)] = x[1][size_t(u)] * x[0][size_t((b * N + u) * M + m)] + x[2][size_t(u)];
      return oracle::weighted_sum(y, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_misc(ac::Rng& g, int n) {
  // add, swap_last2, reshape+scale bundled: cheap plumbing ops
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t p = 1 + int64_t(g.uniform_int(4)), q = 1 + int64_t(g.uniform_int(4));
    auto w = rand_vec(g, p * q);
    const float sc = float(0.5 + g.uniform());
    Case c;
    c.inputs = {rand_tensor(g, {p, q}), rand_tensor(g, {p, q})};
    c.build = [w, sc, p, q](ac::Tape& t, const std::vector<ac::Var>& v) {
      ac::Var s = t.add(v[0], v[1]);
      s = t.swap_last2(s);                  // q×p
      s = t.scale(s, sc);
      s = t.reshape(s, {p * q});
      return ws(t, s, w);
    };
    c.loss = [w, sc, p, q](const std::vector<oracle::vecd>& x) {
      oracle::vecd y(size_t(p * q));
      for (int64_t a = 0; a < p; ++a)
        for (int64_t b = 0; b < q; ++b)
          y[size_t(b * p + a)] = double(sc) * (x[0][size_t(a * q + b)] + x[1][size_t(a * q + b)]);
      return oracle::weighted_sum(y, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

inline std::vector<Case> cases_cross_entropy(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t B = 1 + int64_t(g.uniform_int(4)), C = 2 + int64_t(g.uniform_int(5));
    std::vector<uint16_t> labels(static_cast<size_t>(B));
    for (auto& l : labels) l = uint16_t(g.uniform_int(uint64_t(C)));
    Case c;
    c.inputs = {rand_tensor(g, {B, C}, -2.0, 2.0)};
    c.build = [labels](ac::Tape& t, const std::vector<ac::Var>& v) {
      return t.cross_entropy(v[0], labels);
    };
    c.loss = [labels, B, C](const std::vector<oracle::vecd>& x) {
      return oracle::cross_entropy(x[0], labels, B, C);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

// Small end-to-end chain shaped like the frame CNN: conv → relu → pool →
// flatten → linear → cross-entropy.
inline std::vector<Case> cases_chain_cnn(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t B = 1 + int64_t(g.uniform_int(2));
    const int64_t C = 1, H = 6, W = 6, K = 2, kh = 3, kw = 3;
    const int64_t oh = H - kh + 1, ow = W - kw + 1;          // 4×4
    const int64_t flat = K * (oh / 2) * (ow / 2);            // 2·2·2 = 8
    const int64_t classes = 3;
    std::vector<uint16_t> labels(static_cast<size_t>(B));
    for (auto& l : labels) l = uint16_t(g.uniform_int(classes));
    Case c;
    // Redraw while any conv pre-activation sits near the relu kink or a pool
    // window has two near-tied positive entries. A 1e-3 step through conv
    // moves each pre-activation by at most ~1e-3, so a 1e-2 margin keeps the
    // finite differences on one smooth piece; the analytic gradient needs no
    // such care.
    for (bool smooth = false; !smooth;) {
      c.inputs = {rand_tensor(g, {B, C, H, W}), rand_tensor(g, {K, C, kh, kw}),
                  rand_tensor(g, {K}), rand_tensor(g, {flat, classes})};
      const auto pre = oracle::conv2d(to64(c.inputs[0]), to64(c.inputs[1]), to64(c.inputs[2]), B,
                                      C, H, W, K, kh, kw);
      smooth = true;
      for (const double p : pre)
        if (std::abs(p) < 1e-2) smooth = false;
      const auto act = oracle::relu(pre);
      for (int64_t plane = 0; plane < B * K && smooth; ++plane)
        for (int64_t yy = 0; yy < oh / 2 && smooth; ++yy)
          for (int64_t xx = 0; xx < ow / 2 && smooth; ++xx) {
            const double* base = act.data() + plane * oh * ow;
            double top = -1e30, second = -1e30;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const double v = base[(2 * yy + dy) * ow + 2 * xx + dx];
                if (v > top) {
                  second = top;
                  top = v;
                } else if (v > second) {
                  second = v;
                }
              }
            if (top > 0.0 && top - second < 1e-2) smooth = false;
          }
    }
    c.build = [labels, B, flat](ac::Tape& t, const std::vector<ac::Var>& v) {
      ac::Var h = t.conv2d(v[0], v[1], v[2]);
      h = t.relu(h);
      h = t.maxpool2(h);
      h = t.reshape(h, {B, flat});
      h = t.matmul(h, v[3]);
      return t.cross_entropy(h, labels);
    };
    c.loss = [labels, B, C, H, W, K, kh, kw, flat, classes](const std::vector<oracle::vecd>& x) {
      auto h = oracle::relu(oracle::conv2d(x[0], x[1], x[2], B, C, H, W, K, kh, kw));
      auto p = oracle::maxpool2(h, B * K, H - kh + 1, W - kw + 1);
      auto logits = oracle::matmul(p, x[3], B, flat, classes);
      return oracle::cross_entropy(logits, labels, B, classes);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

// End-to-end chain shaped like one attention cluster with projection
// weighting and shifting: scores → softmax over frames → weighted sum →
// per-unit affine → l2-normalize → flatten → weighted sum.
inline std::vector<Case> cases_chain_cluster(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t B = 1 + int64_t(g.uniform_int(2)), L = 2 + int64_t(g.uniform_int(3)),
                  M = 2 + int64_t(g.uniform_int(3)), N = 1 + int64_t(g.uniform_int(3));
    const float scale = float(1.0 / std::sqrt(double(N)));
    auto w = rand_vec(g, B * N * M);
    Case c;
    // Redraw while any unit's shifted vector has a small norm: the normalize
    // step is exact there but its curvature grows like 1/‖v‖³, and at norms
    // below ~0.5 the h² truncation of the central difference itself crosses
    // the comparison tolerance.
    double min_norm = 0.0;
    do {
      c.inputs = {rand_tensor(g, {B, L, M}), rand_tensor(g, {M, N}), rand_tensor(g, {N}),
                  rand_tensor(g, {N}, 0.5, 1.5), rand_tensor(g, {N})};
      min_norm = 1e30;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t u = 0; u < N; ++u) {
          oracle::vecd s(static_cast<size_t>(L));
          for (int64_t l = 0; l < L; ++l) {
            double acc = double(c.inputs[2][u]);
            for (int64_t m = 0; m < M; ++m)
              acc += double(c.inputs[0][(b * L + l) * M + m]) * double(c.inputs[1][m * N + u]);
            s[size_t(l)] = acc;
          }
          auto a = oracle::softmax_rows(s, 1, L);
          double ss = 0.0;
          for (int64_t m = 0; m < M; ++m) {
            double vm = 0.0;
            for (int64_t l = 0; l < L; ++l) vm += a[size_t(l)] * double(c.inputs[0][(b * L + l) * M + m]);
            vm = double(c.inputs[3][u]) * vm + double(c.inputs[4][u]);
            ss += vm * vm;
          }
          min_norm = std::min(min_norm, std::sqrt(ss));
        }
    } while (min_norm < 0.5);
    c.build = [w, B, N, M, scale](ac::Tape& t, const std::vector<ac::Var>& v) {
      ac::Var scores = t.add_bias(t.bmm(v[0], v[1]), v[2]);  // B×L×N
      ac::Var a = t.softmax(t.swap_last2(scores));           // B×N×L
      ac::Var vv = t.bmm(a, v[0]);                           // B×N×M
      vv = t.unit_affine(vv, v[3], v[4]);
      vv = t.l2normalize(vv, scale);
      return ws(t, t.reshape(vv, {B, N * M}), w);
    };
    c.loss = [w, B, L, M, N, scale](const std::vector<oracle::vecd>& x) {
      oracle::vecd out(size_t(B * N * M));
      for (int64_t b = 0; b < B; ++b)
        for (int64_t u = 0; u < N; ++u) {
          oracle::vecd s(static_cast<size_t>(L));
          for (int64_t l = 0; l < L; ++l) {
            double acc = x[2][size_t(u)];
            for (int64_t m = 0; m < M; ++m) acc += x[0][size_t((b * L + l) * M + m)] * x[1][size_t(m * N + u)];
            s[size_t(l)] = acc;
          }
          auto a = oracle::softmax_rows(s, 1, L);
          oracle::vecd v(size_t(M), 0.0);
          for (int64_t m = 0; m < M; ++m)
            for (int64_t l = 0; l < L; ++l) v[size_t(m)] += a[size_t(l)] * x[0][size_t((b * L + l) * M + m)];
          for (int64_t m = 0; m < M; ++m) v[size_t(m)] = x[3][size_t(u)] * v[size_t(m)] + x[4][size_t(u)];
          auto nv = oracle::l2normalize_rows(v, 1, M, double(scale));
          for (int64_t m = 0; m < M; ++m) out[size_t((b * N + u) * M + m)] = nv[size_t(m)];
        }
      return oracle::weighted_sum(out, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

// Chain shaped like the second weighting form: X → tanh(X·W1ᵀ+b1) → ·w2+b2
// per unit, concatenated, softmax over frames.
inline std::vector<Case> cases_chain_fc2(ac::Rng& g, int n) {
  std::vector<Case> cs;
  for (int i = 0; i < n; ++i) {
    const int64_t B = 1 + int64_t(g.uniform_int(2)), L = 2 + int64_t(g.uniform_int(3)),
                  M = 2 + int64_t(g.uniform_int(3)), H = 2 + int64_t(g.uniform_int(3));
    const int64_t N = 2;
    auto w = rand_vec(g, B * N * L);
    Case c;
    c.inputs = {rand_tensor(g, {B, L, M}), rand_tensor(g, {H, M}), rand_tensor(g, {H}),
                rand_tensor(g, {H, 1}),    rand_tensor(g, {1}),    rand_tensor(g, {H, M}),
                rand_tensor(g, {H}),       rand_tensor(g, {H, 1}), rand_tensor(g, {1})};
    c.build = [w](ac::Tape& t, const std::vector<ac::Var>& v) {
      std::vector<ac::Var> unit_scores;
      for (int u = 0; u < 2; ++u) {
        ac::Var h = t.tanh(t.add_bias(t.bmm(v[0], t.swap_last2(v[size_t(1 + 4 * u)])), v[size_t(2 + 4 * u)]));
        unit_scores.push_back(t.add_bias(t.bmm(h, v[size_t(3 + 4 * u)]), v[size_t(4 + 4 * u)]));  // B×L×1
      }
      ac::Var a = t.softmax(t.swap_last2(t.concat(unit_scores)));  // B×N×L
      return ws(t, a, w);
    };
    c.loss = [w, B, L, M, H](const std::vector<oracle::vecd>& x) {
      oracle::vecd scores(size_t(B * 2 * L));
      for (int64_t b = 0; b < B; ++b)
        for (int64_t u = 0; u < 2; ++u)
          for (int64_t l = 0; l < L; ++l) {
            double sc = x[size_t(4 + 4 * u)][0];
            for (int64_t hh = 0; hh < H; ++hh) {
              double acc = x[size_t(2 + 4 * u)][size_t(hh)];
              for (int64_t m = 0; m < M; ++m)
                acc += x[0][size_t((b * L + l) * M + m)] * x[size_t(1 + 4 * u)][size_t(hh * M + m)];
              sc += std::tanh(acc) * x[size_t(3 + 4 * u)][size_t(hh)];
            }
            scores[size_t((b * 2 + u) * L + l)] = sc;
          }
      auto a = oracle::softmax_rows(scores, B * 2, L);
      return oracle::weighted_sum(a, w);
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

struct SuiteConfig {
  uint64_t seed = 20260825;
  double h = 1e-3;
  double tol = 1e-4;
  int instances = 0;  // > 0 forces this many cases per family (acceptance gate)
};

inline std::vector<OpReport> run_suite(const SuiteConfig& cfg = {}) {
  ac::Rng g(cfg.seed);
  const auto n = [&cfg](int def) { return cfg.instances > 0 ? cfg.instances : def; };
  std::vector<std::pair<std::string, std::vector<Case>>> families;
  families.emplace_back("matmul", cases_matmul(g, n(12)));
  families.emplace_back("bmm", cases_bmm(g, n(12)));
  families.emplace_back("conv2d", cases_conv2d(g, n(12)));
  families.emplace_back("maxpool2", cases_maxpool2(g, n(10)));
  families.emplace_back("relu", cases_relu(g, n(6)));
  families.emplace_back("tanh", cases_tanh(g, n(6)));
  families.emplace_back("softmax", cases_softmax(g, n(10)));
  families.emplace_back("l2normalize", cases_l2normalize(g, n(10)));
  families.emplace_back("dropout", cases_dropout(g, n(6)));
  families.emplace_back("concat", cases_concat(g, n(6)));
  families.emplace_back("add_bias", cases_add_bias(g, n(6)));
  families.emplace_back("unit_affine", cases_unit_affine(g, n(6)));
  families.emplace_back("add/swap/reshape/scale", cases_misc(g, n(6)));
  families.emplace_back("cross_entropy", cases_cross_entropy(g, n(8)));
  families.emplace_back("chain: cnn", cases_chain_cnn(g, n(4)));
  families.emplace_back("chain: cluster+shift", cases_chain_cluster(g, n(6)));
  families.emplace_back("chain: projection scores", cases_chain_fc2(g, n(4)));

  std::vector<OpReport> reports;
  for (auto& [name, cases] : families) {
    OpReport rep;
    rep.op = name;
    for (const auto& c : cases) {
      const CaseResult r = run_case(c, cfg.h);
      rep.instances++;
      rep.max_rel = std::max(rep.max_rel, r.rel);
      rep.max_forward = std::max(rep.max_forward, r.forward);
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace gradcheck
