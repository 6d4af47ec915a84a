#include "ac/clusters.hpp"

#include <cmath>
#include <cstring>

namespace ac {

namespace {

constexpr double kDegenerate = 1e-12;

void check_cfg(const ClusterConfig& cfg) {
  if (cfg.N < 1) fail(ErrorKind::Config, "cluster size must be >= 1, got " + std::to_string(cfg.N));
  if (cfg.M < 1) fail(ErrorKind::Config, "feature dim must be >= 1, got " + std::to_string(cfg.M));
  if (cfg.kind == Weighting::Fc2 && cfg.H < 1)
    fail(ErrorKind::Config, "FC2 hidden width must be >= 1, got " + std::to_string(cfg.H));
}

void check_matrix(const Tensor& X, const char* who) {
  if (X.ndim() != 2)
    fail(ErrorKind::Dimension, std::string(who) + ": feature set must be L×M, got " + X.shape_string());
  for (int64_t i = 0; i < X.numel(); ++i)
    if (!std::isfinite(X[i])) fail(ErrorKind::Numeric, std::string(who) + ": non-finite input");
}

void fill_normal(Tensor& t, Rng& rng, double mean, double stddev) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.normal(mean, stddev));
}

// softmax of double scores → f32 simplex vector
Tensor softmax_scores(const std::vector<double>& s) {
  const size_t L = s.size();
  double mx = s[0];
  for (double v : s) mx = std::max(mx, v);
  double sum = 0.0;
  std::vector<double> e(L);
  for (size_t i = 0; i < L; ++i) {
    e[i] = std::exp(s[i] - mx);
    sum += e[i];
  }
  Tensor a({int64_t(L)});
  for (size_t i = 0; i < L; ++i) a[int64_t(i)] = float(e[i] / sum);
  return a;
}

}  // namespace

const char* weighting_name(Weighting k) {
  switch (k) {
    case Weighting::Average: return "average";
    case Weighting::Fc1: return "fc1";
    case Weighting::Fc2: return "fc2";
  }
  return "unknown";
}

Weighting parse_weighting(const std::string& name) {
  if (name == "average") return Weighting::Average;
  if (name == "fc1") return Weighting::Fc1;
  if (name == "fc2") return Weighting::Fc2;
  fail(ErrorKind::Config, "unknown weighting '" + name + "' (average|fc1|fc2)");
}

ClusterParams ClusterParams::init(const ClusterConfig& cfg, Rng& rng) {
  check_cfg(cfg);
  ClusterParams p;
  p.cfg = cfg;
  const int64_t N = cfg.N, M = cfg.M, H = cfg.H;
  if (cfg.kind == Weighting::Fc1) {
    p.w = Tensor({N, M});
    p.b = Tensor({N});
    fill_normal(p.w, rng, 0.0, 0.1);
  } else if (cfg.kind == Weighting::Fc2) {
    p.w1 = Tensor({N, H, M});
    p.b1 = Tensor({N, H});
    p.w2 = Tensor({N, H});
    p.b2 = Tensor({N});
    fill_normal(p.w1, rng, 0.0, 0.1);
    fill_normal(p.w2, rng, 0.0, 0.1);
  }
  if (cfg.shifting) {
    p.alpha = Tensor({N});
    p.beta = Tensor({N});
    // start near the identity shift; the perturbation lets units diverge
    fill_normal(p.alpha, rng, 1.0, 0.01);
    fill_normal(p.beta, rng, 0.0, 0.01);
  }
  return p;
}

std::vector<Tensor*> ClusterParams::params() {
  std::vector<Tensor*> out;
  if (cfg.kind == Weighting::Fc1) {
    out.push_back(&w);
    out.push_back(&b);
  } else if (cfg.kind == Weighting::Fc2) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }
  if (cfg.shifting) {
    out.push_back(&alpha);
    out.push_back(&beta);
  }
  return out;
}

std::vector<const Tensor*> ClusterParams::params() const {
  auto mut = const_cast<ClusterParams*>(this)->params();
  return std::vector<const Tensor*>(mut.begin(), mut.end());
}

namespace {

std::vector<std::pair<const char*, Tensor ClusterParams::*>> used_fields(const ClusterConfig& cfg) {
  std::vector<std::pair<const char*, Tensor ClusterParams::*>> f;
  if (cfg.kind == Weighting::Fc1) {
    f.emplace_back("w", &ClusterParams::w);
    f.emplace_back("b", &ClusterParams::b);
  } else if (cfg.kind == Weighting::Fc2) {
    f.emplace_back("w1", &ClusterParams::w1);
    f.emplace_back("b1", &ClusterParams::b1);
    f.emplace_back("w2", &ClusterParams::w2);
    f.emplace_back("b2", &ClusterParams::b2);
  }
  if (cfg.shifting) {
    f.emplace_back("alpha", &ClusterParams::alpha);
    f.emplace_back("beta", &ClusterParams::beta);
  }
  return f;
}

}  // namespace

void ClusterParams::add_to(Checkpoint& c, const std::string& prefix) const {
  for (const auto& [name, field] : used_fields(cfg)) c.add(prefix + name, this->*field);
}

ClusterParams ClusterParams::from_checkpoint(const Checkpoint& c, const std::string& prefix,
                                             const ClusterConfig& cfg) {
  Rng dummy(0);
  ClusterParams p = init(cfg, dummy);  // sets the expected shapes
  for (const auto& [name, field] : used_fields(cfg)) {
    const Tensor& src = c.require(prefix + name);
    Tensor& dst = p.*field;
    if (!src.same_shape(dst))
      fail(ErrorKind::Format, "checkpoint tensor " + prefix + name + " has shape " +
                                  src.shape_string() + ", want " + dst.shape_string());
    dst = src;
  }
  return p;
}

UnitParams unit_view(const ClusterParams& p, int unit) {
  if (unit < 0 || unit >= p.cfg.N)
    fail(ErrorKind::Config, "unit " + std::to_string(unit) + " out of range for cluster of " +
                                std::to_string(p.cfg.N));
  UnitParams u;
  u.kind = p.cfg.kind;
  u.shifting = p.cfg.shifting;
  const int64_t M = p.cfg.M, H = p.cfg.H;
  if (p.cfg.kind == Weighting::Fc1) {
    u.w = Tensor({M});
    std::memcpy(u.w.data(), p.w.data() + int64_t(unit) * M, sizeof(float) * size_t(M));
    u.b = p.b[unit];
  } else if (p.cfg.kind == Weighting::Fc2) {
    u.w1 = Tensor({H, M});
    u.b1 = Tensor({H});
    u.w2 = Tensor({H});
    std::memcpy(u.w1.data(), p.w1.data() + int64_t(unit) * H * M, sizeof(float) * size_t(H * M));
    std::memcpy(u.b1.data(), p.b1.data() + int64_t(unit) * H, sizeof(float) * size_t(H));
    std::memcpy(u.w2.data(), p.w2.data() + int64_t(unit) * H, sizeof(float) * size_t(H));
    u.b2 = p.b2[unit];
  }
  if (p.cfg.shifting) {
    u.alpha = p.alpha[unit];
    u.beta = p.beta[unit];
  }
  return u;
}

Tensor compute_weights(const UnitParams& p, const Tensor& X) {
  check_matrix(X, "compute_weights");
  const int64_t L = X.dim(0), M = X.dim(1);
  if (p.kind == Weighting::Average) {
    return Tensor({L}, std::vector<float>(size_t(L), float(1.0 / double(L))));
  }
  std::vector<double> s(static_cast<size_t>(L));
  if (p.kind == Weighting::Fc1) {
    if (p.w.ndim() != 1 || p.w.dim(0) != M)
      fail(ErrorKind::Dimension,
           "compute_weights: w " + p.w.shape_string() + " does not match features " + X.shape_string());
    for (int64_t l = 0; l < L; ++l) {
      double acc = double(p.b);
      const float* row = X.data() + l * M;
      for (int64_t m = 0; m < M; ++m) acc += double(p.w[m]) * double(row[m]);
      s[size_t(l)] = acc;
    }
  } else {
    const int64_t H = p.w1.ndim() == 2 ? p.w1.dim(0) : -1;
    if (H < 1 || p.w1.dim(1) != M || p.b1.ndim() != 1 || p.b1.dim(0) != H || p.w2.ndim() != 1 ||
        p.w2.dim(0) != H)
      fail(ErrorKind::Dimension,
           "compute_weights: FC2 parameters " + p.w1.shape_string() + "/" + p.b1.shape_string() +
               "/" + p.w2.shape_string() + " do not match features " + X.shape_string());
    for (int64_t l = 0; l < L; ++l) {
      const float* row = X.data() + l * M;
      double acc = double(p.b2);
      for (int64_t h = 0; h < H; ++h) {
        double u = double(p.b1[h]);
        const float* wrow = p.w1.data() + h * M;
        for (int64_t m = 0; m < M; ++m) u += double(wrow[m]) * double(row[m]);
        acc += double(p.w2[h]) * std::tanh(u);
      }
      s[size_t(l)] = acc;
    }
  }
  return softmax_scores(s);
}

Tensor attention_unit(const UnitParams& p, const Tensor& X, int N) {
  if (N < 1) fail(ErrorKind::Config, "cluster size must be >= 1, got " + std::to_string(N));
  Tensor a = compute_weights(p, X);
  const int64_t L = X.dim(0), M = X.dim(1);
  std::vector<double> v(static_cast<size_t>(M), 0.0);
  for (int64_t l = 0; l < L; ++l) {
    const double al = double(a[l]);
    const float* row = X.data() + l * M;
    for (int64_t m = 0; m < M; ++m) v[size_t(m)] += al * double(row[m]);
  }
  Tensor out({M});
  if (!p.shifting) {
    for (int64_t m = 0; m < M; ++m) out[m] = float(v[size_t(m)]);
    return out;
  }
  double norm_sq = 0.0;
  for (int64_t m = 0; m < M; ++m) {
    v[size_t(m)] = double(p.alpha) * v[size_t(m)] + double(p.beta);
    norm_sq += v[size_t(m)] * v[size_t(m)];
  }
  const double norm = std::sqrt(norm_sq);
  if (!(norm > kDegenerate))
    fail(ErrorKind::Degenerate,
         "attention unit: shifted sum has norm " + std::to_string(norm) + ", cannot normalize");
  const double inv = 1.0 / (std::sqrt(double(N)) * norm);
  for (int64_t m = 0; m < M; ++m) out[m] = float(v[size_t(m)] * inv);
  return out;
}

Tensor attention_cluster(const ClusterConfig& cfg, const std::vector<UnitParams>& units,
                         const Tensor& X) {
  check_cfg(cfg);
  if (units.size() != size_t(cfg.N))
    fail(ErrorKind::Config, "cluster of " + std::to_string(cfg.N) + " units got " +
                                std::to_string(units.size()) + " parameter sets");
  for (size_t u = 0; u < units.size(); ++u)
    if (units[u].kind != cfg.kind || units[u].shifting != cfg.shifting)
      fail(ErrorKind::Config, "unit " + std::to_string(u) + " does not match the cluster configuration");
  Tensor g({int64_t(cfg.N) * cfg.M});
  for (int u = 0; u < cfg.N; ++u) {
    Tensor v = attention_unit(units[size_t(u)], X, cfg.N);
    if (v.dim(0) != cfg.M)
      fail(ErrorKind::Dimension,
           "unit output " + v.shape_string() + " does not match configured M=" + std::to_string(cfg.M));
    std::memcpy(g.data() + int64_t(u) * cfg.M, v.data(), sizeof(float) * size_t(cfg.M));
  }
  return g;
}

Tensor multimodal_concat(const std::vector<Tensor>& per_modality) {
  if (per_modality.empty()) fail(ErrorKind::Config, "multimodal concat of zero modalities");
  int64_t total = 0;
  for (const Tensor& g : per_modality) {
    if (g.ndim() != 1)
      fail(ErrorKind::Dimension, "multimodal concat expects vectors, got " + g.shape_string());
    total += g.dim(0);
  }
  Tensor out({total});
  int64_t off = 0;
  for (const Tensor& g : per_modality) {
    std::memcpy(out.data() + off, g.data(), sizeof(float) * size_t(g.dim(0)));
    off += g.dim(0);
  }
  return out;
}

Tensor average_replicated_baseline(const Tensor& X, int N) {
  if (N < 1) fail(ErrorKind::Config, "replication count must be >= 1, got " + std::to_string(N));
  check_matrix(X, "average_replicated_baseline");
  const int64_t L = X.dim(0), M = X.dim(1);
  std::vector<double> mean(static_cast<size_t>(M), 0.0);
  for (int64_t l = 0; l < L; ++l)
    for (int64_t m = 0; m < M; ++m) mean[size_t(m)] += double(X[l * M + m]);
  Tensor g({int64_t(N) * M});
  for (int n = 0; n < N; ++n)
    for (int64_t m = 0; m < M; ++m) g[int64_t(n) * M + m] = float(mean[size_t(m)] / double(L));
  return g;
}

Tensor flatten_baseline(const Tensor& X, int64_t expected_rows) {
  if (X.ndim() != 2)
    fail(ErrorKind::Dimension, "flatten: feature set must be L×M, got " + X.shape_string());
  if (X.dim(0) != expected_rows)
    fail(ErrorKind::Dimension, "flatten: got " + X.shape_string() + ", configured for L=" +
                                   std::to_string(expected_rows));
  Tensor out({X.numel()});
  std::memcpy(out.data(), X.data(), sizeof(float) * size_t(X.numel()));
  return out;
}

std::vector<Var> ClusterVars::list() const {
  std::vector<Var> out;
  for (Var v : {w, b, w1, b1, w2, b2, alpha, beta})
    if (v.valid()) out.push_back(v);
  return out;
}

ClusterVars lift_cluster(Tape& t, const ClusterParams& p) {
  ClusterVars v;
  if (p.cfg.kind == Weighting::Fc1) {
    v.w = t.leaf(p.w);
    v.b = t.leaf(p.b);
  } else if (p.cfg.kind == Weighting::Fc2) {
    v.w1 = t.leaf(p.w1);
    v.b1 = t.leaf(p.b1);
    v.w2 = t.leaf(p.w2);
    v.b2 = t.leaf(p.b2);
  }
  if (p.cfg.shifting) {
    v.alpha = t.leaf(p.alpha);
    v.beta = t.leaf(p.beta);
  }
  return v;
}

Var cluster_forward(Tape& t, const ClusterConfig& cfg, const ClusterVars& v, Var x) {
  check_cfg(cfg);
  const Tensor& X = t.value(x);
  if (X.ndim() != 3)
    fail(ErrorKind::Dimension, "cluster_forward: input must be B×L×M, got " + X.shape_string());
  const int64_t B = X.dim(0), L = X.dim(1), M = X.dim(2);
  if (M != cfg.M)
    fail(ErrorKind::Dimension, "cluster_forward: input " + X.shape_string() +
                                   " does not match configured M=" + std::to_string(cfg.M));
  const int64_t N = cfg.N;

  Var raw;  // B×N×M weighted sums
  if (cfg.kind == Weighting::Average) {
    Var a = t.constant(Tensor::full({N, L}, float(1.0 / double(L))));
    raw = t.bmm(a, x);
  } else if (cfg.kind == Weighting::Fc1) {
    Var scores = t.add_bias(t.bmm(x, t.swap_last2(v.w)), v.b);  // B×L×N
    Var a = t.softmax(t.swap_last2(scores));                    // B×N×L
    raw = t.bmm(a, x);
  } else {
    std::vector<Var> unit_scores;
    unit_scores.reserve(size_t(N));
    for (int64_t u = 0; u < N; ++u) {
      Var w1u = t.slice_dim0(v.w1, u);                             // H×M
      Var hidden = t.tanh(t.add_bias(t.bmm(x, t.swap_last2(w1u)), t.slice_dim0(v.b1, u)));
      Var su = t.bmm(hidden, t.reshape(t.slice_dim0(v.w2, u), {cfg.H, 1}));  // B×L×1
      unit_scores.push_back(t.add_bias(su, t.slice_dim0(v.b2, u)));
    }
    Var scores = t.concat(unit_scores);       // B×L×N
    Var a = t.softmax(t.swap_last2(scores));  // B×N×L
    raw = t.bmm(a, x);
  }

  if (cfg.shifting) {
    Var shifted = t.unit_affine(raw, v.alpha, v.beta);
    raw = t.l2normalize(shifted, float(1.0 / std::sqrt(double(N))));
  }
  return t.reshape(raw, {B, N * M});
}

Var average_replicated_forward(Tape& t, Var x, int N) {
  if (N < 1) fail(ErrorKind::Config, "replication count must be >= 1, got " + std::to_string(N));
  const Tensor& X = t.value(x);
  if (X.ndim() != 3)
    fail(ErrorKind::Dimension, "average baseline: input must be B×L×M, got " + X.shape_string());
  const int64_t B = X.dim(0), L = X.dim(1), M = X.dim(2);
  Var a = t.constant(Tensor::full({1, L}, float(1.0 / double(L))));
  Var mean = t.bmm(a, x);  // B×1×M
  std::vector<Var> copies(static_cast<size_t>(N), mean);
  return t.reshape(N == 1 ? mean : t.concat(copies), {B, int64_t(N) * M});
}

Var flatten_forward(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  if (X.ndim() != 3)
    fail(ErrorKind::Dimension, "flatten baseline: input must be B×L×M, got " + X.shape_string());
  return t.reshape(x, {X.dim(0), X.dim(1) * X.dim(2)});
}

}  // namespace ac
