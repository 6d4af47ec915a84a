#include "ac/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "ac/features.hpp"
#include "ac/kv.hpp"
#include "ac/optim.hpp"
#include "ac/tape.hpp"

namespace ac {

const char* optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::RmsProp: return "rmsprop";
  }
  return "unknown";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "rmsprop") return OptimizerKind::RmsProp;
  fail(ErrorKind::Config, "unknown optimizer '" + name + "' (adam|rmsprop)");
}

FeatureData load_feature_data(const std::string& path) {
  FmftReader r(path);
  FeatureData d;
  d.count = int64_t(r.count());
  d.L = r.rows();
  d.M = r.cols();
  r.read_all(d.x, d.labels);
  return d;
}

std::vector<int64_t> sample_row_subset(int64_t L, int64_t keep, Rng& rng) {
  if (L < 1) fail(ErrorKind::Config, "row subset: empty feature set");
  if (keep < 1 || keep > L)
    fail(ErrorKind::Config, "row subset size " + std::to_string(keep) + " outside [1, " +
                                std::to_string(L) + "]");
  // Partial Fisher–Yates: after `keep` swaps the prefix is a uniform draw
  // without replacement. Sorting restores the original relative order.
  std::vector<int64_t> idx(static_cast<size_t>(L));
  std::iota(idx.begin(), idx.end(), int64_t(0));
  for (int64_t i = 0; i < keep; ++i) {
    const int64_t j = i + int64_t(rng.uniform_int(uint64_t(L - i)));
    std::swap(idx[size_t(i)], idx[size_t(j)]);
  }
  idx.resize(size_t(keep));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Tensor subsample_features(const Tensor& X, int64_t keep, Rng& rng) {
  if (X.ndim() != 2)
    fail(ErrorKind::Dimension, "subsample_features: want L×M, got " + X.shape_string());
  const int64_t M = X.dim(1);
  const std::vector<int64_t> rows = sample_row_subset(X.dim(0), keep, rng);
  Tensor out({keep, M});
  for (int64_t r = 0; r < keep; ++r)
    std::memcpy(out.data() + r * M, X.data() + rows[size_t(r)] * M, sizeof(float) * size_t(M));
  return out;
}

BalancedSampler::BalancedSampler(const std::vector<uint16_t>& labels) {
  if (labels.empty()) fail(ErrorKind::Config, "balanced sampler: no samples");
  std::vector<std::vector<int64_t>> by_label(65536);
  for (size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(int64_t(i));
  for (auto& b : by_label)
    if (!b.empty()) buckets_.push_back(std::move(b));
}

int64_t BalancedSampler::next(Rng& rng) const {
  // Uniform class, then uniform member: P(i) = 1/(K·|class(i)|) ∝ 1/|class(i)|.
  const auto& bucket = buckets_[rng.uniform_int(buckets_.size())];
  return bucket[rng.uniform_int(bucket.size())];
}

namespace {

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.normal(0.0, stddev));
}

void check_train_config(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0f) || !std::isfinite(cfg.lr))
    fail(ErrorKind::Config, "learning rate must be positive and finite");
  if (!(cfg.dropout >= 0.0f && cfg.dropout < 1.0f))
    fail(ErrorKind::Config, "dropout must be in [0,1), got " + std::to_string(cfg.dropout));
  if (cfg.epochs < 1) fail(ErrorKind::Config, "epochs must be >= 1");
  if (cfg.batch < 1) fail(ErrorKind::Config, "batch size must be >= 1");
  if (cfg.hidden < 1) fail(ErrorKind::Config, "classifier hidden width must be >= 1");
  if (cfg.subsample < 0) fail(ErrorKind::Config, "feature subset size must be >= 0");
  if (cfg.clip_norm < 0.0f) fail(ErrorKind::Config, "clip norm must be >= 0 (0 disables)");
}

void check_data(const std::vector<FeatureData>& data, const std::vector<ClusterConfig>& cfgs,
                const char* what) {
  if (data.empty()) fail(ErrorKind::Config, std::string(what) + ": no feature caches");
  if (data.size() != cfgs.size())
    fail(ErrorKind::Config, std::string(what) + ": " + std::to_string(data.size()) +
                                " caches but " + std::to_string(cfgs.size()) + " cluster configs");
  if (data[0].count < 1) fail(ErrorKind::Config, std::string(what) + ": empty feature cache");
  for (size_t k = 0; k < data.size(); ++k) {
    if (data[k].M != cfgs[k].M)
      fail(ErrorKind::Dimension, std::string(what) + ": modality " + std::to_string(k) +
                                     " has feature width " + std::to_string(data[k].M) +
                                     ", cluster config wants " + std::to_string(cfgs[k].M));
    if (data[k].count != data[0].count)
      fail(ErrorKind::Consistency, std::string(what) + ": modality " + std::to_string(k) +
                                       " holds " + std::to_string(data[k].count) +
                                       " samples, modality 0 holds " +
                                       std::to_string(data[0].count));
    if (data[k].labels != data[0].labels)
      fail(ErrorKind::Consistency,
           std::string(what) + ": modality " + std::to_string(k) + " labels differ from modality 0");
  }
}

void check_label_range(const std::vector<FeatureData>& data, int classes, const char* what) {
  for (const uint16_t y : data[0].labels)
    if (int(y) >= classes)
      fail(ErrorKind::Data, std::string(what) + ": label " + std::to_string(y) +
                                " out of range for " + std::to_string(classes) + " classes");
}

// Tape-side handles for every trainable tensor, in ClusterModel::params() order.
struct ModelVars {
  std::vector<ClusterVars> cvs;
  Var fw, fb, ow, ob;
};

ModelVars lift_model(Tape& t, const ClusterModel& m) {
  ModelVars v;
  for (const ClusterParams& c : m.clusters) v.cvs.push_back(lift_cluster(t, c));
  v.fw = t.leaf(m.fc_w);
  v.fb = t.leaf(m.fc_b);
  v.ow = t.leaf(m.out_w);
  v.ob = t.leaf(m.out_b);
  return v;
}

std::vector<Var> var_list(const ModelVars& mv) {
  std::vector<Var> out;
  for (const ClusterVars& cv : mv.cvs) {
    const std::vector<Var> l = cv.list();
    out.insert(out.end(), l.begin(), l.end());
  }
  out.push_back(mv.fw);
  out.push_back(mv.fb);
  out.push_back(mv.ow);
  out.push_back(mv.ob);
  return out;
}

Var model_logits(Tape& t, const ClusterModel& m, const ModelVars& mv,
                 const std::vector<Tensor>& batch_x, float dropout_p, bool train_mode,
                 Rng& drop_rng) {
  std::vector<Var> gs;
  for (size_t k = 0; k < batch_x.size(); ++k) {
    Var xk = t.constant(batch_x[k]);
    gs.push_back(cluster_forward(t, m.cluster_cfgs[k], mv.cvs[k], xk));
  }
  Var g = gs.size() == 1 ? gs[0] : t.concat(gs);
  Var h = t.relu(t.add_bias(t.matmul(g, t.swap_last2(mv.fw)), mv.fb));
  Var hd = t.dropout(h, dropout_p, train_mode, drop_rng);
  return t.add_bias(t.matmul(hd, t.swap_last2(mv.ow)), mv.ob);
}

// One {bsz, L', M} batch; `subsets` (when present) gives each sample's kept
// rows, shared across modalities so frames stay aligned.
Tensor gather_batch(const FeatureData& d, const int64_t* idx, int64_t bsz,
                    const std::vector<std::vector<int64_t>>* subsets) {
  const int64_t M = d.M;
  const int64_t rows = subsets ? int64_t((*subsets)[0].size()) : d.L;
  Tensor out({bsz, rows, M});
  for (int64_t i = 0; i < bsz; ++i) {
    const float* src = d.x.data() + idx[i] * d.L * M;
    float* dst = out.data() + i * rows * M;
    if (subsets) {
      const std::vector<int64_t>& sel = (*subsets)[size_t(i)];
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(dst + r * M, src + sel[size_t(r)] * M, sizeof(float) * size_t(M));
    } else {
      std::memcpy(dst, src, sizeof(float) * size_t(rows * M));
    }
  }
  return out;
}

int64_t argmax_row(const float* z, int64_t n) {
  int64_t best = 0;
  for (int64_t j = 1; j < n; ++j)
    if (z[j] > z[best]) best = j;
  return best;
}

struct OptSnapshot {
  std::vector<Tensor> m, v, s;
  int64_t steps = 0;
};

OptSnapshot snapshot_optimizer(OptimizerKind kind, Adam& adam, RmsProp& rms) {
  OptSnapshot st;
  if (kind == OptimizerKind::Adam) {
    st.m = adam.first_moments();
    st.v = adam.second_moments();
    st.steps = adam.steps();
  } else {
    st.s = rms.squared_avgs();
  }
  return st;
}

void add_optimizer_state(Checkpoint& c, OptimizerKind kind, const OptSnapshot& st) {
  if (kind == OptimizerKind::Adam) {
    for (size_t i = 0; i < st.m.size(); ++i) c.add("opt.m." + std::to_string(i), st.m[i]);
    for (size_t i = 0; i < st.v.size(); ++i) c.add("opt.v." + std::to_string(i), st.v[i]);
    c.add("opt.t", Tensor::scalar(float(st.steps)));
  } else {
    for (size_t i = 0; i < st.s.size(); ++i) c.add("opt.s." + std::to_string(i), st.s[i]);
  }
}

Checkpoint make_train_checkpoint(const ClusterModel& m, const TrainConfig& cfg, int epoch,
                                 const std::vector<EpochStats>& hist, size_t rows,
                                 const OptSnapshot& st) {
  Checkpoint c = m.to_checkpoint();
  c.seed = cfg.seed;
  c.epoch = uint32_t(epoch);
  std::ostringstream os;
  os << "optimizer=" << optimizer_name(cfg.optimizer) << "\n"
     << "lr=" << cfg.lr << "\n"
     << "clip_norm=" << cfg.clip_norm << "\n"
     << "dropout=" << cfg.dropout << "\n"
     << "epochs=" << cfg.epochs << "\n"
     << "batch=" << cfg.batch << "\n"
     << "subsample=" << cfg.subsample << "\n"
     << "balance=" << (cfg.balance_classes ? 1 : 0) << "\n";
  c.config += os.str();
  for (size_t i = 0; i < rows; ++i)
    c.metrics.push_back(
        {float(hist[i].loss), float(hist[i].train_acc), float(hist[i].test_acc), 0.0f});
  add_optimizer_state(c, cfg.optimizer, st);
  return c;
}

}  // namespace

ClusterModel ClusterModel::init(std::vector<ClusterConfig> cfgs, int hidden, int classes,
                                Rng& rng) {
  if (cfgs.empty()) fail(ErrorKind::Config, "classifier needs at least one cluster");
  if (hidden < 1) fail(ErrorKind::Config, "classifier hidden width must be >= 1");
  if (classes < 1) fail(ErrorKind::Config, "classifier needs at least one class");
  ClusterModel m;
  m.cluster_cfgs = std::move(cfgs);
  m.hidden = hidden;
  m.classes = classes;
  for (const ClusterConfig& c : m.cluster_cfgs) m.clusters.push_back(ClusterParams::init(c, rng));
  const int64_t D = m.feature_dim();
  m.fc_w = Tensor({int64_t(hidden), D});
  m.fc_b = Tensor({int64_t(hidden)});
  m.out_w = Tensor({int64_t(classes), int64_t(hidden)});
  m.out_b = Tensor({int64_t(classes)});
  fill_normal(m.fc_w, rng, std::sqrt(2.0 / double(D)));
  // small head so a fresh model predicts near-uniform and its loss sits at ln(classes)
  fill_normal(m.out_w, rng, 0.01);
  return m;
}

int64_t ClusterModel::feature_dim() const {
  int64_t d = 0;
  for (const ClusterConfig& c : cluster_cfgs) d += int64_t(c.N) * int64_t(c.M);
  return d;
}

std::vector<Tensor*> ClusterModel::params() {
  std::vector<Tensor*> out;
  for (ClusterParams& c : clusters) {
    const std::vector<Tensor*> p = c.params();
    out.insert(out.end(), p.begin(), p.end());
  }
  out.push_back(&fc_w);
  out.push_back(&fc_b);
  out.push_back(&out_w);
  out.push_back(&out_b);
  return out;
}

std::vector<const Tensor*> ClusterModel::params() const {
  auto mut = const_cast<ClusterModel*>(this)->params();
  return std::vector<const Tensor*>(mut.begin(), mut.end());
}

Checkpoint ClusterModel::to_checkpoint() const {
  Checkpoint c;
  c.model_kind = kModelCluster;
  std::ostringstream os;
  os << "model=cluster\n"
     << "modalities=" << cluster_cfgs.size() << "\n";
  for (size_t k = 0; k < cluster_cfgs.size(); ++k) {
    const ClusterConfig& cc = cluster_cfgs[k];
    const std::string p = "m" + std::to_string(k) + ".";
    os << p << "weighting=" << weighting_name(cc.kind) << "\n"
       << p << "n=" << cc.N << "\n"
       << p << "shifting=" << (cc.shifting ? 1 : 0) << "\n"
       << p << "h=" << cc.H << "\n"
       << p << "m=" << cc.M << "\n";
  }
  os << "hidden=" << hidden << "\n"
     << "classes=" << classes << "\n";
  c.config = os.str();
  for (size_t k = 0; k < clusters.size(); ++k)
    clusters[k].add_to(c, "m" + std::to_string(k) + ".");
  c.add("cls.fc_w", fc_w);
  c.add("cls.fc_b", fc_b);
  c.add("cls.out_w", out_w);
  c.add("cls.out_b", out_b);
  return c;
}

ClusterModel ClusterModel::from_checkpoint(const Checkpoint& c) {
  if (c.model_kind != kModelCluster)
    fail(ErrorKind::Format, "checkpoint holds model kind " + std::to_string(c.model_kind) +
                                ", not a cluster classifier");
  const auto kv = parse_kv_lines(c.config);
  if (require_kv(kv, "model") != "cluster")
    fail(ErrorKind::Format, "checkpoint config says model=" + require_kv(kv, "model"));
  const int64_t K = kv_int(kv, "modalities");
  if (K < 1) fail(ErrorKind::Format, "checkpoint config: modalities must be >= 1");
  ClusterModel m;
  m.hidden = int(kv_int(kv, "hidden"));
  m.classes = int(kv_int(kv, "classes"));
  if (m.hidden < 1 || m.classes < 1)
    fail(ErrorKind::Format, "checkpoint config: invalid classifier geometry");
  for (int64_t k = 0; k < K; ++k) {
    const std::string p = "m" + std::to_string(k) + ".";
    const std::string& wname = require_kv(kv, p + "weighting");
    ClusterConfig cc;
    if (wname == "average")
      cc.kind = Weighting::Average;
    else if (wname == "fc1")
      cc.kind = Weighting::Fc1;
    else if (wname == "fc2")
      cc.kind = Weighting::Fc2;
    else
      fail(ErrorKind::Format, "checkpoint config: unknown weighting '" + wname + "'");
    cc.N = int(kv_int(kv, p + "n"));
    cc.shifting = kv_bool(kv, p + "shifting");
    cc.H = int(kv_int(kv, p + "h"));
    cc.M = int(kv_int(kv, p + "m"));
    if (cc.N < 1 || cc.M < 1 || cc.H < 1)
      fail(ErrorKind::Format, "checkpoint config: invalid cluster geometry for modality " +
                                  std::to_string(k));
    m.cluster_cfgs.push_back(cc);
    m.clusters.push_back(ClusterParams::from_checkpoint(c, p, cc));
  }
  const int64_t D = m.feature_dim();
  auto take = [&](const std::string& name, std::vector<int64_t> shape) {
    const Tensor& src = c.require(name);
    if (src.shape() != shape)
      fail(ErrorKind::Format, "checkpoint tensor " + name + " has shape " + src.shape_string() +
                                  ", want " + Tensor::shape_string(shape));
    return src;
  };
  m.fc_w = take("cls.fc_w", {int64_t(m.hidden), D});
  m.fc_b = take("cls.fc_b", {int64_t(m.hidden)});
  m.out_w = take("cls.out_w", {int64_t(m.classes), int64_t(m.hidden)});
  m.out_b = take("cls.out_b", {int64_t(m.classes)});
  return m;
}

EvalReport evaluate(const ClusterModel& model, const std::vector<FeatureData>& data) {
  check_data(data, model.cluster_cfgs, "evaluate");
  check_label_range(data, model.classes, "evaluate");
  const int64_t n = data[0].count;
  const int64_t C = model.classes;
  EvalReport rep;
  rep.per_class.assign(size_t(C), 0.0);
  rep.class_counts.assign(size_t(C), 0);
  std::vector<int64_t> class_hits(size_t(C), 0);
  int64_t top1 = 0, top5 = 0;
  double loss_sum = 0.0;
  Rng no_rng(0);  // eval-mode dropout consumes nothing
  constexpr int64_t kEvalBatch = 256;
  std::vector<int64_t> idx(static_cast<size_t>(kEvalBatch));
  for (int64_t start = 0; start < n; start += kEvalBatch) {
    const int64_t bsz = std::min(kEvalBatch, n - start);
    for (int64_t i = 0; i < bsz; ++i) idx[size_t(i)] = start + i;
    Tape t;
    const ModelVars mv = lift_model(t, model);
    std::vector<Tensor> bx;
    for (const FeatureData& d : data) bx.push_back(gather_batch(d, idx.data(), bsz, nullptr));
    const Var logits = model_logits(t, model, mv, bx, 0.0f, false, no_rng);
    const Tensor& Z = t.value(logits);
    for (int64_t i = 0; i < bsz; ++i) {
      const float* z = Z.data() + i * C;
      const int64_t y = data[0].labels[size_t(start + i)];
      // per-row softmax cross-entropy in double, max-subtracted
      double mx = z[0];
      for (int64_t j = 1; j < C; ++j) mx = std::max(mx, double(z[j]));
      double sum = 0.0;
      for (int64_t j = 0; j < C; ++j) sum += std::exp(double(z[j]) - mx);
      loss_sum += -(double(z[y]) - mx - std::log(sum));
      // rank of the label under (logit desc, index asc)
      int64_t before = 0;
      for (int64_t j = 0; j < C; ++j)
        if (z[j] > z[y] || (z[j] == z[y] && j < y)) ++before;
      if (before == 0) {
        ++top1;
        ++class_hits[size_t(y)];
      }
      if (before < 5) ++top5;
      ++rep.class_counts[size_t(y)];
    }
  }
  rep.top1 = double(top1) / double(n);
  rep.top5 = double(top5) / double(n);
  rep.loss = loss_sum / double(n);
  for (int64_t cidx = 0; cidx < C; ++cidx)
    if (rep.class_counts[size_t(cidx)] > 0)
      rep.per_class[size_t(cidx)] =
          double(class_hits[size_t(cidx)]) / double(rep.class_counts[size_t(cidx)]);
  return rep;
}

TrainResult train_cluster(const std::vector<FeatureData>& train,
                          const std::vector<FeatureData>& test,
                          const std::vector<ClusterConfig>& cluster_cfgs, const TrainConfig& cfg,
                          const TrainCallback& on_epoch) {
  check_train_config(cfg);
  check_data(train, cluster_cfgs, "train");
  check_data(test, cluster_cfgs, "test");
  check_label_range(train, kNumCategories, "train");
  check_label_range(test, kNumCategories, "test");
  const int64_t n = train[0].count;
  if (cfg.subsample > 0)
    for (const FeatureData& d : train) {
      if (int64_t(cfg.subsample) > d.L)
        fail(ErrorKind::Config, "feature subset L'=" + std::to_string(cfg.subsample) +
                                    " exceeds the cache's L=" + std::to_string(d.L));
      if (d.L != train[0].L)
        fail(ErrorKind::Config, "feature subset needs equal row counts across modalities");
    }

  Rng init_rng(derive_seed(cfg.seed, 0xAC0));
  ClusterModel model = ClusterModel::init(cluster_cfgs, cfg.hidden, kNumCategories, init_rng);

  Adam adam(cfg.lr);
  RmsProp rms(cfg.lr);
  std::optional<BalancedSampler> balancer;
  if (cfg.balance_classes) balancer.emplace(train[0].labels);

  TrainResult res;
  double best_acc = -1.0;
  ClusterModel best_model;
  OptSnapshot best_opt;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, 0xAC1000 + uint64_t(epoch)));
    Rng drop_rng(derive_seed(cfg.seed, 0xAC2000 + uint64_t(epoch)));
    Rng aug_rng(derive_seed(cfg.seed, 0xAC3000 + uint64_t(epoch)));

    std::vector<int64_t> order(static_cast<size_t>(n));
    if (balancer) {
      for (int64_t i = 0; i < n; ++i) order[size_t(i)] = balancer->next(order_rng);
    } else {
      std::iota(order.begin(), order.end(), int64_t(0));
      for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = int64_t(order_rng.uniform_int(uint64_t(i + 1)));
        std::swap(order[size_t(i)], order[size_t(j)]);
      }
    }

    double loss_sum = 0.0;
    int64_t seen = 0, hits = 0;
    for (int64_t start = 0; start < n; start += cfg.batch) {
      const int64_t bsz = std::min(int64_t(cfg.batch), n - start);
      std::vector<std::vector<int64_t>> subsets;
      if (cfg.subsample > 0) {
        subsets.resize(size_t(bsz));
        for (int64_t i = 0; i < bsz; ++i)
          subsets[size_t(i)] = sample_row_subset(train[0].L, cfg.subsample, aug_rng);
      }
      std::vector<uint16_t> yb(static_cast<size_t>(bsz));
      for (int64_t i = 0; i < bsz; ++i) yb[size_t(i)] = train[0].labels[size_t(order[size_t(start + i)])];

      Tape t;
      const ModelVars mv = lift_model(t, model);
      Var logits, loss;
      try {
        std::vector<Tensor> bx;
        for (const FeatureData& d : train)
          bx.push_back(gather_batch(d, order.data() + start, bsz,
                                    subsets.empty() ? nullptr : &subsets));
        logits = model_logits(t, model, mv, bx, cfg.dropout, true, drop_rng);
        loss = t.cross_entropy(logits, yb);
      } catch (const Error& e) {
        // NaN anywhere in the forward pass is divergence once training runs.
        if (e.kind() == ErrorKind::Numeric)
          fail(ErrorKind::Training, "loss diverged to NaN in epoch " + std::to_string(epoch));
        throw;
      }
      const float lv = t.value(loss)[0];
      if (std::isnan(lv))
        fail(ErrorKind::Training, "loss diverged to NaN in epoch " + std::to_string(epoch));
      t.backward(loss);

      const Tensor& Z = t.value(logits);
      for (int64_t i = 0; i < bsz; ++i)
        if (argmax_row(Z.data() + i * model.classes, model.classes) == int64_t(yb[size_t(i)]))
          ++hits;
      loss_sum += double(lv) * double(bsz);
      seen += bsz;

      const std::vector<Tensor*> params = model.params();
      const std::vector<Var> vars = var_list(mv);
      if (params.size() != vars.size())
        fail(ErrorKind::Consistency, "trainable tensor list does not match the tape graph");
      std::vector<const Tensor*> grads(vars.size());
      std::vector<Tensor> clipped;
      if (cfg.clip_norm > 0.0f) {
        clipped.reserve(vars.size());
        std::vector<Tensor*> mut;
        for (const Var v : vars) {
          clipped.push_back(t.grad(v));
          mut.push_back(&clipped.back());
        }
        clip_global_norm(mut, cfg.clip_norm);
        for (size_t i = 0; i < clipped.size(); ++i) grads[i] = &clipped[i];
      } else {
        for (size_t i = 0; i < vars.size(); ++i) grads[i] = &t.grad(vars[i]);
      }
      try {
        if (cfg.optimizer == OptimizerKind::Adam)
          adam.step(params, grads);
        else
          rms.step(params, grads);
      } catch (const Error& e) {
        // The optimizer rejects NaN gradients but cannot know the epoch.
        if (e.kind() == ErrorKind::Training)
          fail(ErrorKind::Training, std::string(e.what()) + " in epoch " + std::to_string(epoch));
        throw;
      }
    }

    const EvalReport er = evaluate(model, test);
    EpochStats st;
    st.loss = loss_sum / double(seen);
    st.train_acc = double(hits) / double(seen);
    st.test_acc = er.top1;
    res.history.push_back(st);
    if (on_epoch) on_epoch(epoch, st);
    if (er.top1 > best_acc) {
      best_acc = er.top1;
      res.best_epoch = epoch;
      best_model = model;
      best_opt = snapshot_optimizer(cfg.optimizer, adam, rms);
    }
  }

  res.best = make_train_checkpoint(best_model, cfg, res.best_epoch, res.history,
                                   size_t(res.best_epoch) + 1, best_opt);
  res.last = make_train_checkpoint(model, cfg, cfg.epochs - 1, res.history, res.history.size(),
                                   snapshot_optimizer(cfg.optimizer, adam, rms));
  return res;
}

// ---- ablation grid ----

std::string curves_file_name(Weighting kind, int N, bool shifting) {
  std::string s = std::string("curves_") + weighting_name(kind);
  if (shifting) s += "_shift";
  s += "_n" + std::to_string(N) + ".csv";
  return s;
}

void write_curves_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Storage, "cannot open " + path + " for writing");
  f << "epoch,train_acc,test_acc,loss\n";
  char buf[128];
  for (size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", i, history[i].train_acc,
                  history[i].test_acc, history[i].loss);
    f << buf;
  }
  if (!f) fail(ErrorKind::Storage, "write failed for " + path);
}

void write_results_csv(const std::string& path, const std::vector<AblationResult>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Storage, "cannot open " + path + " for writing");
  f << "weighting,N,shifting,top1,top5,epochs,wallclock_s,seed\n";
  char buf[192];
  for (const AblationResult& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%.6f,%.6f,%d,%.3f,%llu\n", weighting_name(r.kind),
                  r.N, r.shifting ? 1 : 0, r.top1, r.top5, r.epochs, r.wallclock_s,
                  static_cast<unsigned long long>(r.seed));
    f << buf;
  }
  if (!f) fail(ErrorKind::Storage, "write failed for " + path);
}

std::vector<AblationResult> ablation_grid(
    const std::vector<FeatureData>& train, const std::vector<FeatureData>& test,
    const TrainConfig& base, const std::vector<int>& sizes, const std::string& out_dir,
    const std::function<void(const AblationResult&)>& on_run, int jobs) {
  if (sizes.empty()) fail(ErrorKind::Config, "ablation grid needs at least one cluster size");
  if (jobs < 1) fail(ErrorKind::Config, "jobs must be at least 1, got " + std::to_string(jobs));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Storage, "cannot create " + out_dir + ": " + ec.message());

  // Average once per size (replication baseline), both nets with and without
  // shifting.
  static constexpr struct {
    Weighting kind;
    bool shifting;
  } kColumns[] = {{Weighting::Average, false},
                  {Weighting::Fc1, false},
                  {Weighting::Fc1, true},
                  {Weighting::Fc2, false},
                  {Weighting::Fc2, true}};
  constexpr int kNumColumns = int(sizeof(kColumns) / sizeof(kColumns[0]));

  const int total = int(sizes.size()) * kNumColumns;
  std::vector<AblationResult> rows(static_cast<size_t>(total));

  // Each run only reads the shared caches and writes its own slot + curves
  // file, so the grid parallelizes without any cross-run coordination beyond
  // serializing the progress callback.
  std::mutex cb_mutex;
  auto run_one = [&](int slot) {
    const int N = sizes[size_t(slot / kNumColumns)];
    const auto& col = kColumns[slot % kNumColumns];
    std::vector<ClusterConfig> ccfgs;
    for (const FeatureData& d : train) {
      ClusterConfig cc;
      cc.kind = col.kind;
      cc.N = N;
      cc.shifting = col.shifting;
      cc.M = int(d.M);
      ccfgs.push_back(cc);
    }
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult tr = train_cluster(train, test, ccfgs, base);
    const EvalReport er = evaluate(ClusterModel::from_checkpoint(tr.best), test);
    const auto t1 = std::chrono::steady_clock::now();
    AblationResult r;
    r.kind = col.kind;
    r.N = N;
    r.shifting = col.shifting;
    r.top1 = er.top1;
    r.top5 = er.top5;
    r.epochs = base.epochs;
    r.wallclock_s = std::chrono::duration<double>(t1 - t0).count();
    r.seed = base.seed;
    r.history = std::move(tr.history);
    write_curves_csv(out_dir + "/" + curves_file_name(col.kind, N, col.shifting), r.history);
    if (on_run) {
      std::lock_guard<std::mutex> lock(cb_mutex);
      on_run(r);
    }
    rows[size_t(slot)] = std::move(r);
  };

  if (jobs == 1) {
    for (int slot = 0; slot < total; ++slot) run_one(slot);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex err_mutex;
    std::vector<std::thread> workers;
    const int n_workers = std::min(jobs, total);
    workers.reserve(size_t(n_workers));
    for (int w = 0; w < n_workers; ++w)
      workers.emplace_back([&] {
        for (int slot = next.fetch_add(1); slot < total; slot = next.fetch_add(1)) {
          try {
            run_one(slot);
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!first_error) first_error = std::current_exception();
            next.store(total);  // stop handing out further runs
            return;
          }
        }
      });
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  write_results_csv(out_dir + "/results.csv", rows);
  return rows;
}

// ---- attention maps ----

void export_attention_maps(const ClusterModel& model, const std::vector<FeatureData>& data,
                           FmnvReader& videos, const std::vector<int64_t>& samples,
                           const std::string& out_dir) {
  check_data(data, model.cluster_cfgs, "attention maps");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Storage, "cannot create " + out_dir + ": " + ec.message());

  for (const int64_t idx : samples) {
    if (idx < 0 || idx >= data[0].count)
      fail(ErrorKind::Data, "sample " + std::to_string(idx) + " out of range for cache of " +
                                std::to_string(data[0].count));
    if (uint64_t(idx) >= videos.count())
      fail(ErrorKind::Data, "sample " + std::to_string(idx) + " out of range for video file of " +
                                std::to_string(videos.count()));
    const VideoSample vs = videos.read(uint64_t(idx));
    if (vs.label != data[0].labels[size_t(idx)])
      fail(ErrorKind::Consistency, "video label " + std::to_string(vs.label) +
                                       " does not match cache label " +
                                       std::to_string(data[0].labels[size_t(idx)]) +
                                       " at sample " + std::to_string(idx));

    for (size_t k = 0; k < data.size(); ++k) {
      const FeatureData& d = data[k];
      const ClusterParams& cp = model.clusters[k];
      const int64_t L = d.L, M = d.M;
      Tensor X({L, M});
      std::memcpy(X.data(), d.x.data() + idx * L * M, sizeof(float) * size_t(L * M));

      std::vector<Tensor> weights;
      for (int u = 0; u < cp.cfg.N; ++u) weights.push_back(compute_weights(unit_view(cp, u), X));

      const std::string base =
          out_dir + "/sample" + std::to_string(idx) + "_m" + std::to_string(k);
      std::ofstream csv(base + "_weights.csv", std::ios::binary);
      if (!csv) fail(ErrorKind::Storage, "cannot open " + base + "_weights.csv for writing");
      char buf[40];
      for (const Tensor& a : weights) {
        for (int64_t l = 0; l < L; ++l) {
          std::snprintf(buf, sizeof buf, "%.9g", double(a[l]));
          csv << (l ? "," : "") << buf;
        }
        csv << "\n";
      }
      if (!csv) fail(ErrorKind::Storage, "write failed for " + base + "_weights.csv");

      if (L != kVideoFrames)
        fail(ErrorKind::Dimension, "cannot render frames: cache holds " + std::to_string(L) +
                                       " rows per sample, videos hold " +
                                       std::to_string(kVideoFrames) + " frames");
      for (int u = 0; u < cp.cfg.N; ++u) {
        const Tensor& a = weights[size_t(u)];
        float amax = a[0];
        for (int64_t l = 1; l < L; ++l) amax = std::max(amax, a[l]);
        // one strip: frames side by side, each scaled so the most-attended
        // frame keeps full brightness
        const int w = 28 * int(L), h = 28;
        std::vector<uint8_t> strip(size_t(w) * size_t(h));
        for (int64_t l = 0; l < L; ++l) {
          const double s = double(a[l]) / double(amax);
          const uint8_t* frame = vs.frames.data() + l * 784;
          for (int y = 0; y < 28; ++y)
            for (int x = 0; x < 28; ++x)
              strip[size_t(y) * size_t(w) + size_t(l * 28 + x)] =
                  uint8_t(std::lround(double(frame[y * 28 + x]) * s));
        }
        const std::string path = base + "_unit" + std::to_string(u) + ".pgm";
        std::ofstream pgm(path, std::ios::binary);
        if (!pgm) fail(ErrorKind::Storage, "cannot open " + path + " for writing");
        pgm << "P5\n" << w << " " << h << "\n255\n";
        pgm.write(reinterpret_cast<const char*>(strip.data()), std::streamsize(strip.size()));
        if (!pgm) fail(ErrorKind::Storage, "write failed for " + path);
      }
    }
  }
}

}  // namespace ac
