// Single entry point for the whole pipeline: dataset synthesis, extractor
// pretraining, feature extraction, cluster training, evaluation, the ablation
// grid, attention-map export, and a fast self-check suite. Every subcommand
// reads a flat key=value config file (--config) that individual --key flags
// override, and writes the fully resolved settings next to its outputs.
// Progress goes to stderr; stdout carries only machine-readable results.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "ac/checkpoint.hpp"
#include "ac/clusters.hpp"
#include "ac/errors.hpp"
#include "ac/extractor.hpp"
#include "ac/features.hpp"
#include "ac/flashmnist.hpp"
#include "ac/mnist.hpp"
#include "ac/rng.hpp"
#include "ac/runconfig.hpp"
#include "ac/tape.hpp"
#include "ac/tensor.hpp"
#include "ac/train.hpp"

namespace {

using namespace ac;

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage:
    case ErrorKind::Config: return 2;
    case ErrorKind::Training: return 4;
    default: return 3;
  }
}

std::string default_data_dir() {
  const char* env = std::getenv("AC_DATA_DIR");
  return env ? env : "data/mnist";
}

std::vector<MnistImage> load_split(const std::string& dir, const std::string& split) {
  if (split == "train")
    return load_mnist(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
  return load_mnist(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string item = kv_trim(s.substr(pos, comma - pos));
    if (!item.empty()) out.push_back(item);
    pos = comma + 1;
  }
  return out;
}

int64_t parse_list_int(const std::string& what, const std::string& s) {
  try {
    size_t used = 0;
    const int64_t v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::Config, what + ": \"" + s + "\" is not an integer");
  }
}

std::vector<FeatureData> load_caches(const std::vector<std::string>& paths) {
  if (paths.empty()) fail(ErrorKind::Config, "no feature cache paths given");
  std::vector<FeatureData> data;
  for (const auto& p : paths) data.push_back(load_feature_data(p));
  return data;
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Storage, "cannot create " + dir + ": " + ec.message());
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// TrainConfig keys shared by `train` and `ablate`.
TrainConfig read_train_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.optimizer = parse_optimizer(cfg.get_str("optimizer", "adam"));
  tc.lr = float(cfg.get_double("lr", 1e-3));
  tc.clip_norm = float(cfg.get_double("clip_l2", 0.0));
  tc.dropout = float(cfg.get_double("dropout", 0.5));
  tc.epochs = int(cfg.get_int("epochs", 100));
  tc.batch = int(cfg.get_int("batch", 128));
  tc.seed = uint64_t(cfg.get_int("seed", 0));
  tc.subsample = int(cfg.get_int("subsample", 0));
  tc.balance_classes = cfg.get_bool("balance", false);
  tc.hidden = int(cfg.get_int("hidden", 1024));
  return tc;
}

// ---- subcommands ----

void run_generate(const RunConfig& cfg) {
  const std::string out = cfg.require_str("out");
  const std::string split = cfg.get_str("split", "train");
  const int64_t count = cfg.require_int("count");
  const uint64_t seed = uint64_t(cfg.get_int("seed", 0));
  const bool stratified = cfg.get_bool("stratified", false);
  const std::string data_dir = cfg.get_str("data_dir", default_data_dir());
  if (split != "train" && split != "test")
    fail(ErrorKind::Config, "split must be train or test, got \"" + split + "\"");
  if (count < 0) fail(ErrorKind::Config, "count must be non-negative");
  cfg.finish();

  std::cerr << "loading MNIST from " << data_dir << "\n";
  // The noise distribution is a property of the dataset, always estimated
  // from the MNIST training split; only the digit pool follows `split`.
  const auto train_images = load_split(data_dir, "train");
  const NoiseDistribution dist = NoiseDistribution::from_images(train_images);
  std::vector<MnistImage> pool_images;
  const auto& images = split == "train" ? train_images : (pool_images = load_split(data_dir, "test"));
  const DigitPool pool = DigitPool::build(images);

  DatasetSpec spec;
  spec.split = split;
  spec.count = count;
  spec.seed = seed;
  spec.stratified = stratified;
  const DatasetManifest m = generate_dataset(spec, images, pool, dist, out);
  cfg.write_resolved(out + ".cfg");
  std::cerr << "wrote " << m.count << " videos to " << out << "\n";
}

void run_pretrain(const RunConfig& cfg) {
  const std::string out = cfg.require_str("out");
  const std::string data_dir = cfg.get_str("data_dir", default_data_dir());
  const uint64_t seed = uint64_t(cfg.get_int("seed", 0));
  const int variants = int(cfg.get_int("variants", 5));
  const int64_t noise_frames = cfg.get_int("noise_frames", 30000);
  PretrainConfig pc;
  pc.epochs = int(cfg.get_int("epochs", 10));
  pc.lr = float(cfg.get_double("lr", 1e-3));
  pc.batch = int(cfg.get_int("batch", 128));
  pc.seed = seed;
  cfg.finish();

  std::cerr << "loading MNIST from " << data_dir << "\n";
  const auto train_images = load_split(data_dir, "train");
  const NoiseDistribution dist = NoiseDistribution::from_images(train_images);
  const PretrainCorpus corpus =
      build_pretrain_corpus(train_images, dist, seed, variants, noise_frames);
  std::cerr << "pretraining on " << corpus.size() << " frames\n";

  PretrainResult res = pretrain(corpus, pc, [](int epoch, const PretrainEpoch& e) {
    std::cerr << "epoch " << epoch << ": loss " << fmt("%.4f", e.loss) << " acc "
              << fmt("%.4f", e.accuracy) << "\n";
  });

  Checkpoint c = res.model.to_checkpoint();
  c.seed = seed;
  c.epoch = uint32_t(pc.epochs);
  for (const auto& e : res.history)
    c.metrics.push_back({float(e.loss), float(e.accuracy), 0.0f, 0.0f});
  save_checkpoint(c, out);
  cfg.write_resolved(out + ".cfg");
  std::cout << "frame_accuracy=" << fmt("%.6f", res.final_accuracy) << "\n";
}

void run_extract(const RunConfig& cfg) {
  const std::string ckpt = cfg.require_str("ckpt");
  const std::string videos = cfg.require_str("videos");
  const std::string out = cfg.require_str("out");
  cfg.finish();

  const ExtractorModel model = ExtractorModel::from_checkpoint(load_checkpoint(ckpt));
  FmnvReader reader(videos);
  const uint64_t step = std::max<uint64_t>(1, reader.count() / 20);
  extract_features(model, reader, out, [step](uint64_t done, uint64_t total) {
    if (done == total || done % step == 0)
      std::cerr << "extracted " << done << "/" << total << "\n";
  });
  cfg.write_resolved(out + ".cfg");
}

void run_train(const RunConfig& cfg) {
  const auto train_paths = split_list(cfg.require_str("train_features"));
  const auto test_paths = split_list(cfg.require_str("test_features"));
  const std::string out_dir = cfg.require_str("out_dir");
  ClusterConfig cc;
  cc.kind = parse_weighting(cfg.get_str("weighting", "fc1"));
  cc.N = int(cfg.get_int("n", 1));
  cc.shifting = cfg.get_bool("shifting", true);
  cc.H = int(cfg.get_int("fc2_hidden", 10));
  const TrainConfig tc = read_train_config(cfg);
  cfg.finish();

  const auto train_data = load_caches(train_paths);
  const auto test_data = load_caches(test_paths);
  std::vector<ClusterConfig> ccfgs;
  for (const FeatureData& d : train_data) {
    ClusterConfig c = cc;
    c.M = int(d.M);
    ccfgs.push_back(c);
  }
  make_dir(out_dir);

  TrainResult tr =
      train_cluster(train_data, test_data, ccfgs, tc, [](int epoch, const EpochStats& s) {
        std::cerr << "epoch " << epoch << ": loss " << fmt("%.4f", s.loss) << " train "
                  << fmt("%.4f", s.train_acc) << " test " << fmt("%.4f", s.test_acc) << "\n";
      });

  save_checkpoint(tr.best, out_dir + "/best.ackp");
  save_checkpoint(tr.last, out_dir + "/last.ackp");
  write_curves_csv(out_dir + "/curves.csv", tr.history);
  cfg.write_resolved(out_dir + "/resolved.cfg");

  const EvalReport er = evaluate(ClusterModel::from_checkpoint(tr.best), test_data);
  std::cout << "best_epoch=" << tr.best_epoch << "\n";
  std::cout << "best_top1=" << fmt("%.6f", er.top1) << "\n";
  std::cout << "best_top5=" << fmt("%.6f", er.top5) << "\n";
  std::cout << "final_top1=" << fmt("%.6f", tr.history.back().test_acc) << "\n";
}

void run_eval(const RunConfig& cfg) {
  const std::string ckpt = cfg.require_str("ckpt");
  const auto test_paths = split_list(cfg.require_str("test_features"));
  const std::string out = cfg.get_str("out", "");
  cfg.finish();

  const ClusterModel model = ClusterModel::from_checkpoint(load_checkpoint(ckpt));
  const auto test_data = load_caches(test_paths);
  const EvalReport er = evaluate(model, test_data);
  std::cout << "top1=" << fmt("%.6f", er.top1) << "\n";
  std::cout << "top5=" << fmt("%.6f", er.top5) << "\n";
  std::cout << "loss=" << fmt("%.6f", er.loss) << "\n";
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    if (!f) fail(ErrorKind::Storage, "cannot open " + out + " for writing");
    f << "class,count,accuracy\n";
    for (size_t c = 0; c < er.per_class.size(); ++c)
      f << c << "," << er.class_counts[c] << "," << fmt("%.6f", er.per_class[c]) << "\n";
    f.flush();
    if (!f) fail(ErrorKind::Storage, "write failed for " + out);
    cfg.write_resolved(out + ".cfg");
  }
}

void run_ablate(const RunConfig& cfg) {
  const auto train_paths = split_list(cfg.require_str("train_features"));
  const auto test_paths = split_list(cfg.require_str("test_features"));
  const std::string out_dir = cfg.require_str("out_dir");
  std::vector<int> sizes;
  for (const auto& s : split_list(cfg.require_str("sizes")))
    sizes.push_back(int(parse_list_int("sizes", s)));
  const int jobs = int(cfg.get_int("jobs", 1));
  const TrainConfig tc = read_train_config(cfg);
  cfg.finish();

  const auto train_data = load_caches(train_paths);
  const auto test_data = load_caches(test_paths);
  make_dir(out_dir);
  cfg.write_resolved(out_dir + "/resolved.cfg");
  ablation_grid(
      train_data, test_data, tc, sizes, out_dir,
      [](const AblationResult& r) {
        std::cerr << "done " << weighting_name(r.kind) << " n=" << r.N
                  << (r.shifting ? " shift" : "") << ": top1 " << fmt("%.4f", r.top1) << " ("
                  << fmt("%.1f", r.wallclock_s) << "s)\n";
      },
      jobs);
  std::cout << "wrote " << out_dir << "/results.csv\n";
}

void run_visualize(const RunConfig& cfg) {
  const std::string ckpt = cfg.require_str("ckpt");
  const auto feature_paths = split_list(cfg.require_str("features"));
  const std::string videos = cfg.require_str("videos");
  std::vector<int64_t> samples;
  for (const auto& s : split_list(cfg.require_str("samples")))
    samples.push_back(parse_list_int("samples", s));
  const std::string out_dir = cfg.require_str("out_dir");
  cfg.finish();

  const ClusterModel model = ClusterModel::from_checkpoint(load_checkpoint(ckpt));
  const auto data = load_caches(feature_paths);
  FmnvReader reader(videos);
  export_attention_maps(model, data, reader, samples, out_dir);
  cfg.write_resolved(out_dir + "/resolved.cfg");
  std::cerr << "wrote attention maps for " << samples.size() << " samples to " << out_dir << "\n";
}

// ---- verify: fast self-check suite ----

// Central differences against the tape's own forward pass: rebuilds the graph
// with each leaf coordinate nudged ±1e-3 and compares the quotient to the
// backward pass. float32 forwards put the agreement floor around 1e-4, and a
// wrong backward rule shows up orders of magnitude above the 5e-3 gate.
constexpr double kFdStep = 1e-3;
constexpr double kGradTol = 5e-3;

double grad_gap(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double dn = 0.0, na = 0.0, nn = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    dn += d * d;
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  dn = std::sqrt(dn);
  if (dn < 1e-3) return 0.0;  // both sides at the rounding floor
  return dn / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

Tensor rand_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(lo + (hi - lo) * rng.uniform());
  return t;
}

// One gradient check: `targets` are the tensors the closure reads, `forward`
// rebuilds the graph from scratch, `analytic` holds the tape's gradients in
// the same order. `fault` injects a deliberate error so the check can prove
// it would catch a broken backward rule.
bool fd_check(const std::vector<Tensor*>& targets, const std::function<double()>& forward,
              std::vector<std::vector<double>> analytic, bool fault, std::string& detail) {
  if (fault && !analytic.empty() && !analytic[0].empty()) analytic[0][0] += 0.05;
  for (size_t k = 0; k < targets.size(); ++k) {
    Tensor& t = *targets[k];
    std::vector<double> numeric(size_t(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) {
      const float orig = t[i];
      t[i] = float(double(orig) + kFdStep);
      const double fp = forward();
      t[i] = float(double(orig) - kFdStep);
      const double fm = forward();
      t[i] = orig;
      numeric[size_t(i)] = (fp - fm) / (2.0 * kFdStep);
    }
    const double gap = grad_gap(analytic[k], numeric);
    if (gap > kGradTol) {
      detail = "parameter " + std::to_string(k) + ": gradient gap " + fmt("%.3g", gap);
      return false;
    }
  }
  return true;
}

std::vector<double> grad_of(const Tape& t, Var v) {
  const Tensor& g = t.grad(v);
  std::vector<double> out(size_t(g.numel()));
  for (int64_t i = 0; i < g.numel(); ++i) out[size_t(i)] = double(g[i]);
  return out;
}

bool check_grad_mlp(bool fault, std::string& detail) {
  Rng rng(11);
  Tensor x = rand_tensor(rng, {3, 4});
  Tensor w = rand_tensor(rng, {4, 5});
  Tensor b = rand_tensor(rng, {5});
  const std::vector<uint16_t> labels = {0, 3, 2};
  auto forward = [&] {
    Tape t;
    Var logits = t.add_bias(t.matmul(t.leaf(x), t.leaf(w)), t.leaf(b));
    return double(t.value(t.cross_entropy(t.relu(logits), labels))[0]);
  };
  Tape t;
  Var xv = t.leaf(x), wv = t.leaf(w), bv = t.leaf(b);
  t.backward(t.cross_entropy(t.relu(t.add_bias(t.matmul(xv, wv), bv)), labels));
  return fd_check({&x, &w, &b}, forward,
                  {grad_of(t, xv), grad_of(t, wv), grad_of(t, bv)}, fault, detail);
}

bool check_grad_conv(bool fault, std::string& detail) {
  Rng rng(22);
  Tensor x = rand_tensor(rng, {1, 1, 6, 6});
  Tensor k = rand_tensor(rng, {2, 1, 3, 3});
  Tensor kb = rand_tensor(rng, {2});
  const std::vector<uint16_t> labels = {1};
  auto forward = [&] {
    Tape t;
    Var y = t.maxpool2(t.relu(t.conv2d(t.leaf(x), t.leaf(k), t.leaf(kb))));
    return double(t.value(t.cross_entropy(t.reshape(y, {1, 8}), labels))[0]);
  };
  Tape t;
  Var xv = t.leaf(x), kv = t.leaf(k), bv = t.leaf(kb);
  Var y = t.maxpool2(t.relu(t.conv2d(xv, kv, bv)));
  t.backward(t.cross_entropy(t.reshape(y, {1, 8}), labels));
  return fd_check({&x, &k, &kb}, forward, {grad_of(t, xv), grad_of(t, kv), grad_of(t, bv)},
                  fault, detail);
}

bool check_grad_cluster(bool fault, std::string& detail) {
  ClusterConfig cc;
  cc.kind = Weighting::Fc2;
  cc.N = 2;
  cc.shifting = true;
  cc.H = 3;
  cc.M = 4;
  Rng rng(33);
  ClusterParams p = ClusterParams::init(cc, rng);
  Tensor x = rand_tensor(rng, {2, 3, 4});
  Tensor readout = rand_tensor(rng, {8, 5});
  const std::vector<uint16_t> labels = {1, 3};
  auto forward = [&] {
    Tape t;
    ClusterVars cv = lift_cluster(t, p);
    Var g = cluster_forward(t, cc, cv, t.leaf(x));
    return double(t.value(t.cross_entropy(t.matmul(g, t.constant(readout)), labels))[0]);
  };
  Tape t;
  ClusterVars cv = lift_cluster(t, p);
  Var xv = t.leaf(x);
  Var g = cluster_forward(t, cc, cv, xv);
  t.backward(t.cross_entropy(t.matmul(g, t.constant(readout)), labels));

  std::vector<Tensor*> targets = p.params();
  targets.push_back(&x);
  std::vector<std::vector<double>> analytic;
  for (Var v : cv.list()) analytic.push_back(grad_of(t, v));
  analytic.push_back(grad_of(t, xv));
  return fd_check(targets, forward, std::move(analytic), fault, detail);
}

bool check_simplex(bool, std::string& detail) {
  Rng rng(44);
  const Tensor X = rand_tensor(rng, {6, 5});
  for (Weighting kind : {Weighting::Average, Weighting::Fc1, Weighting::Fc2}) {
    ClusterConfig cc;
    cc.kind = kind;
    cc.N = 3;
    cc.H = 4;
    cc.M = 5;
    ClusterParams p = ClusterParams::init(cc, rng);
    for (int u = 0; u < cc.N; ++u) {
      const Tensor a = compute_weights(unit_view(p, u), X);
      double sum = 0.0;
      for (int64_t i = 0; i < a.numel(); ++i) {
        if (a[i] < 0.0f) {
          detail = std::string(weighting_name(kind)) + ": negative weight";
          return false;
        }
        sum += double(a[i]);
      }
      if (std::abs(sum - 1.0) > 1e-5) {
        detail = std::string(weighting_name(kind)) + ": weights sum to " + fmt("%.8f", sum);
        return false;
      }
    }
  }
  return true;
}

bool check_unit_norms(bool, std::string& detail) {
  Rng rng(55);
  const Tensor X = rand_tensor(rng, {7, 6});
  ClusterConfig cc;
  cc.kind = Weighting::Fc1;
  cc.N = 4;
  cc.shifting = true;
  cc.M = 6;
  ClusterParams p = ClusterParams::init(cc, rng);

  const Tensor v = attention_unit(unit_view(p, 0), X, cc.N);
  double nv = 0.0;
  for (int64_t i = 0; i < v.numel(); ++i) nv += double(v[i]) * double(v[i]);
  nv = std::sqrt(nv);
  if (std::abs(nv - 0.5) > 1e-5) {  // 1/sqrt(4)
    detail = "unit norm " + fmt("%.8f", nv) + ", want 0.5";
    return false;
  }

  std::vector<UnitParams> units;
  for (int u = 0; u < cc.N; ++u) units.push_back(unit_view(p, u));
  const Tensor g = attention_cluster(cc, units, X);
  double ng = 0.0;
  for (int64_t i = 0; i < g.numel(); ++i) ng += double(g[i]) * double(g[i]);
  ng = std::sqrt(ng);
  if (std::abs(ng - 1.0) > 1e-5) {
    detail = "cluster norm " + fmt("%.8f", ng) + ", want 1";
    return false;
  }

  const Tensor multi = multimodal_concat({g, g});
  double nm = 0.0;
  for (int64_t i = 0; i < multi.numel(); ++i) nm += double(multi[i]) * double(multi[i]);
  nm = std::sqrt(nm);
  if (std::abs(nm - std::sqrt(2.0)) > 1e-5) {
    detail = "multimodal norm " + fmt("%.8f", nm) + ", want sqrt(2)";
    return false;
  }
  return true;
}

bool check_permutation(bool, std::string& detail) {
  Rng rng(66);
  ClusterConfig cc;
  cc.kind = Weighting::Fc2;
  cc.N = 2;
  cc.shifting = true;
  cc.H = 3;
  cc.M = 4;
  ClusterParams p = ClusterParams::init(cc, rng);
  std::vector<UnitParams> units;
  for (int u = 0; u < cc.N; ++u) units.push_back(unit_view(p, u));

  const int64_t L = 5;
  const Tensor X = rand_tensor(rng, {L, 4});
  Tensor Xp({L, 4});
  const int64_t perm[] = {3, 0, 4, 1, 2};
  for (int64_t l = 0; l < L; ++l)
    for (int64_t m = 0; m < 4; ++m) Xp[perm[l] * 4 + m] = X[l * 4 + m];

  const Tensor g = attention_cluster(cc, units, X);
  const Tensor gp = attention_cluster(cc, units, Xp);
  for (int64_t i = 0; i < g.numel(); ++i)
    if (std::abs(double(g[i]) - double(gp[i])) > 1e-5) {
      detail = "output moved by " + fmt("%.3g", std::abs(double(g[i]) - double(gp[i]))) +
               " under row permutation";
      return false;
    }
  return true;
}

bool check_variable_length(bool, std::string& detail) {
  Rng rng(77);
  ClusterConfig cc;
  cc.kind = Weighting::Fc1;
  cc.N = 2;
  cc.shifting = true;
  cc.M = 4;
  ClusterParams p = ClusterParams::init(cc, rng);
  std::vector<UnitParams> units;
  for (int u = 0; u < cc.N; ++u) units.push_back(unit_view(p, u));
  for (int64_t L : {int64_t(7), int64_t(25)}) {
    const Tensor X = rand_tensor(rng, {L, 4});
    const Tensor g = attention_cluster(cc, units, X);
    if (g.numel() != cc.N * cc.M) {
      detail = "L=" + std::to_string(L) + " produced " + std::to_string(g.numel()) + " values";
      return false;
    }
  }
  return true;
}

// Expects `fn` to raise an error of `want`; returns "" when it does.
template <typename Fn>
std::string expect_kind(ErrorKind want, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    if (e.kind() == want) return "";
    return std::string("raised ") + error_kind_name(e.kind()) + " instead: " + e.what();
  }
  return "no error raised";
}

void corrupt_byte(const std::string& path, uint64_t offset) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(std::streamoff(offset));
  char c = 0;
  f.read(&c, 1);
  c = char(c ^ 0xFF);
  f.seekp(std::streamoff(offset));
  f.write(&c, 1);
}

bool check_fmnv_roundtrip(const std::string& dir, bool, std::string& detail) {
  const std::string path = dir + "/verify.fmnv";
  std::vector<VideoSample> samples(3);
  for (size_t s = 0; s < samples.size(); ++s) {
    samples[s].label = uint16_t(100 * s + 7);
    samples[s].frames.resize(size_t(kVideoFrames) * kDigitPixels);
    for (size_t i = 0; i < samples[s].frames.size(); ++i)
      samples[s].frames[i] = uint8_t((i * 31 + s * 17) % 251);
  }
  {
    FmnvWriter w(path, samples.size(), 42);
    for (const auto& s : samples) w.append(s);
    w.finish();
  }
  FmnvReader r(path);
  if (r.count() != samples.size() || r.seed() != 42) {
    detail = "header mismatch after round-trip";
    return false;
  }
  for (size_t s = 0; s < samples.size(); ++s) {
    const VideoSample got = r.read(s);
    if (got.label != samples[s].label || got.frames != samples[s].frames) {
      detail = "sample " + std::to_string(s) + " not byte-identical";
      return false;
    }
  }
  corrupt_byte(path, 0);  // break the magic
  detail = expect_kind(ErrorKind::Format, [&] { FmnvReader bad(path); });
  if (!detail.empty()) {
    detail = "corrupted header: " + detail;
    return false;
  }
  return true;
}

bool check_fmft_roundtrip(const std::string& dir, bool, std::string& detail) {
  const std::string path = dir + "/verify.fmft";
  const uint32_t L = 3, M = 4;
  std::vector<float> values(L * M);
  {
    FmftWriter w(path, 2, L, M);
    for (uint16_t s = 0; s < 2; ++s) {
      for (size_t i = 0; i < values.size(); ++i) values[i] = float(s) + float(i) * 0.25f;
      w.append(uint16_t(500 + s), values.data());
    }
    w.finish();
  }
  FmftReader r(path);
  const FeatureSet f1 = r.read(1);
  for (size_t i = 0; i < values.size(); ++i)
    if (f1.values[i] != 1.0f + float(i) * 0.25f) {
      detail = "payload changed in round-trip";
      return false;
    }
  if (f1.label != 501) {
    detail = "label changed in round-trip";
    return false;
  }
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  std::filesystem::resize_file(path, size - 8, ec);
  detail = expect_kind(ErrorKind::Format, [&] {
    FmftReader bad(path);
    bad.read(1);
  });
  if (!detail.empty()) {
    detail = "truncated cache: " + detail;
    return false;
  }
  return true;
}

bool check_checkpoint_roundtrip(const std::string& dir, bool, std::string& detail) {
  const std::string path = dir + "/verify.ackp";
  ClusterConfig cc;
  cc.kind = Weighting::Fc1;
  cc.N = 2;
  cc.shifting = true;
  cc.M = 4;
  Rng rng(88);
  ClusterModel model = ClusterModel::init({cc}, 8, 6, rng);
  save_checkpoint(model.to_checkpoint(), path);
  const ClusterModel back = ClusterModel::from_checkpoint(load_checkpoint(path));
  const auto orig = model.params();
  const auto copy = back.params();
  for (size_t k = 0; k < orig.size(); ++k)
    for (int64_t i = 0; i < orig[k]->numel(); ++i)
      if ((*orig[k])[i] != (*copy[k])[i]) {
        detail = "parameter " + std::to_string(k) + " not bit-identical";
        return false;
      }
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  std::filesystem::resize_file(path, size - 8, ec);
  detail = expect_kind(ErrorKind::Format, [&] { load_checkpoint(path); });
  if (!detail.empty()) {
    detail = "truncated checkpoint: " + detail;
    return false;
  }
  return true;
}

bool check_rng_determinism(bool, std::string& detail) {
  Rng a(123), b(123);
  for (int i = 0; i < 64; ++i)
    if (a.next_u64() != b.next_u64()) {
      detail = "same seed diverged at draw " + std::to_string(i);
      return false;
    }
  for (uint64_t i = 0; i < 16; ++i)
    if (derive_seed(9, i) != derive_seed(9, i)) {
      detail = "derive_seed unstable";
      return false;
    }
  return true;
}

int run_verify(const std::string& fault) {
  if (!fault.empty() && fault != "broken-backward")
    fail(ErrorKind::Config, "unknown fault \"" + fault + "\" (supported: broken-backward)");
  const bool broken = fault == "broken-backward";

  const std::string dir =
      (std::filesystem::temp_directory_path() / ("ac_verify_" + std::to_string(::getpid())))
          .string();
  make_dir(dir);

  struct Property {
    const char* name;
    std::function<bool(bool, std::string&)> check;
  };
  const Property props[] = {
      {"gradient-mlp", check_grad_mlp},
      {"gradient-conv", check_grad_conv},
      {"gradient-cluster", check_grad_cluster},
      {"weight-simplex", check_simplex},
      {"unit-norms", check_unit_norms},
      {"permutation-invariance", check_permutation},
      {"variable-length", check_variable_length},
      {"fmnv-roundtrip", [&dir](bool f, std::string& d) { return check_fmnv_roundtrip(dir, f, d); }},
      {"fmft-roundtrip", [&dir](bool f, std::string& d) { return check_fmft_roundtrip(dir, f, d); }},
      {"checkpoint-roundtrip",
       [&dir](bool f, std::string& d) { return check_checkpoint_roundtrip(dir, f, d); }},
      {"rng-determinism", check_rng_determinism},
  };

  int failures = 0;
  for (const auto& prop : props) {
    std::string detail;
    bool ok = false;
    // The fault only targets the first gradient property, proving the finite
    // difference comparison has teeth without spamming every check.
    const bool inject = broken && std::string(prop.name) == "gradient-mlp";
    try {
      ok = prop.check(inject, detail);
    } catch (const Error& e) {
      detail = std::string(error_kind_name(e.kind())) + ": " + e.what();
    }
    if (ok) {
      std::cout << "PASS " << prop.name << "\n";
    } else {
      std::cout << "FAIL " << prop.name << (detail.empty() ? "" : ": " + detail) << "\n";
      ++failures;
    }
  }

  std::error_code ec;
  std::filesystem::remove_all(dir, ec);
  std::cerr << (sizeof(props) / sizeof(props[0]) - size_t(failures)) << "/"
            << sizeof(props) / sizeof(props[0]) << " properties passed\n";
  return failures == 0 ? 0 : 1;
}

// ---- wiring ----

// Flag overrides are collected during parsing and applied over the file in
// the subcommand callback, so a flag always wins regardless of flag order.
struct CmdCtx {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
};

RunConfig make_config(const CmdCtx& ctx) {
  RunConfig cfg;
  if (!ctx.config_file.empty()) cfg.load_file(ctx.config_file);
  for (const auto& [key, value] : ctx.overrides) cfg.set(key, value);
  return cfg;
}

std::shared_ptr<CmdCtx> add_command(CLI::App& app, const std::string& name,
                                    const std::string& blurb,
                                    const std::vector<std::pair<const char*, const char*>>& keys,
                                    const std::function<void(const RunConfig&)>& run) {
  CLI::App* cmd = app.add_subcommand(name, blurb);
  auto ctx = std::make_shared<CmdCtx>();
  cmd->add_option("--config", ctx->config_file, "key=value config file; flags override it");
  for (const auto& [key, desc] : keys) {
    const std::string key_s = key;
    cmd->add_option_function<std::string>(
        "--" + key_s, [ctx, key_s](const std::string& v) { ctx->overrides.emplace_back(key_s, v); },
        desc);
  }
  cmd->callback([ctx, run] { run(make_config(*ctx)); });
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flash-MNIST attention-cluster pipeline"};
  app.require_subcommand(1);

  add_command(app, "generate", "synthesize a Flash-MNIST video dataset",
              {{"out", "output .fmnv path (writes out.manifest and out.cfg too)"},
               {"split", "MNIST digit pool: train or test (default train)"},
               {"count", "number of videos to generate"},
               {"seed", "generation seed (default 0)"},
               {"stratified", "0/1: category = index mod 1024 instead of a uniform draw"},
               {"data_dir", "MNIST directory (default $AC_DATA_DIR or data/mnist)"}},
              run_generate);

  add_command(app, "pretrain", "train the frame CNN on noisy digits",
              {{"out", "output .ackp checkpoint path"},
               {"data_dir", "MNIST directory (default $AC_DATA_DIR or data/mnist)"},
               {"seed", "corpus + init seed (default 0)"},
               {"epochs", "training epochs (default 10)"},
               {"lr", "Adam learning rate (default 0.001)"},
               {"batch", "batch size (default 128)"},
               {"variants", "noisy copies per MNIST image (default 5)"},
               {"noise_frames", "pure-noise frames appended to the corpus (default 30000)"}},
              run_pretrain);

  add_command(app, "extract", "run the pretrained CNN over a video file",
              {{"ckpt", "extractor .ackp checkpoint"},
               {"videos", "input .fmnv file"},
               {"out", "output .fmft feature cache path"}},
              run_extract);

  add_command(app, "train", "train an attention-cluster classifier",
              {{"train_features", "comma-separated .fmft caches, one per modality"},
               {"test_features", "comma-separated .fmft caches, one per modality"},
               {"out_dir", "output directory (best.ackp, last.ackp, curves.csv)"},
               {"weighting", "average, fc1 or fc2 (default fc1)"},
               {"n", "cluster size (default 1)"},
               {"shifting", "0/1: shifting operation (default 1)"},
               {"fc2_hidden", "FC2 hidden width (default 10)"},
               {"optimizer", "adam or rmsprop (default adam)"},
               {"lr", "learning rate (default 0.001)"},
               {"clip_l2", "global gradient-norm ceiling; 0 disables (default 0)"},
               {"dropout", "drop probability before the classifier (default 0.5)"},
               {"epochs", "training epochs (default 100)"},
               {"batch", "batch size (default 128)"},
               {"seed", "init/order/dropout seed (default 0)"},
               {"subsample", "feature rows kept per sample while training; 0 = all"},
               {"balance", "0/1: draw training samples class-balanced (default 0)"},
               {"hidden", "classifier hidden width (default 1024)"}},
              run_train);

  add_command(app, "eval", "evaluate a classifier checkpoint",
              {{"ckpt", "classifier .ackp checkpoint"},
               {"test_features", "comma-separated .fmft caches, one per modality"},
               {"out", "optional per-class accuracy CSV path"}},
              run_eval);

  add_command(app, "ablate", "run the weighting × cluster-size × shifting grid",
              {{"train_features", "comma-separated .fmft caches, one per modality"},
               {"test_features", "comma-separated .fmft caches, one per modality"},
               {"out_dir", "output directory (results.csv + per-run curves)"},
               {"sizes", "comma-separated cluster sizes, e.g. 1,8,32"},
               {"jobs", "concurrent training runs (default 1)"},
               {"optimizer", "adam or rmsprop (default adam)"},
               {"lr", "learning rate (default 0.001)"},
               {"clip_l2", "global gradient-norm ceiling; 0 disables (default 0)"},
               {"dropout", "drop probability before the classifier (default 0.5)"},
               {"epochs", "training epochs per run (default 100)"},
               {"batch", "batch size (default 128)"},
               {"seed", "shared seed for every run (default 0)"},
               {"subsample", "feature rows kept per sample while training; 0 = all"},
               {"balance", "0/1: draw training samples class-balanced (default 0)"},
               {"hidden", "classifier hidden width (default 1024)"}},
              run_ablate);

  add_command(app, "visualize", "export attention weights and frame strips",
              {{"ckpt", "classifier .ackp checkpoint"},
               {"features", "comma-separated .fmft caches, one per modality"},
               {"videos", "the .fmnv file the features came from"},
               {"samples", "comma-separated sample indices"},
               {"out_dir", "output directory for CSV + PGM files"}},
              run_visualize);

  CLI::App* verify = app.add_subcommand("verify", "run the fast invariant suite");
  auto fault = std::make_shared<std::string>();
  verify->add_option("--fault", *fault,
                     "inject a deliberate defect (broken-backward) to prove the checks fire");
  auto verify_rc = std::make_shared<int>(0);
  verify->callback([fault, verify_rc] { *verify_rc = run_verify(*fault); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << error_kind_name(e.kind()) << ": " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 3;
  }
  return *verify_rc;
}
