#include "ac/extractor.hpp"

#include <algorithm>
#include <cmath>

#include "ac/features.hpp"
#include "ac/optim.hpp"

namespace ac {

namespace {

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.normal(0.0, stddev));
}

// frames (u8) → B×1×28×28 float tensor scaled to [0,1]
Tensor frames_to_batch(const uint8_t* frames, int64_t n) {
  Tensor x({n, 1, kDigitH, kDigitW});
  for (int64_t i = 0; i < n * kDigitPixels; ++i) x[i] = float(frames[i]) / 255.0f;
  return x;
}

int argmax_row(const float* row, int64_t n) {
  int best = 0;
  for (int64_t j = 1; j < n; ++j)
    if (row[j] > row[best]) best = int(j);
  return best;
}

}  // namespace

ExtractorModel ExtractorModel::init(Rng& rng) {
  ExtractorModel m;
  // He-style scaling for the relu layers, fan-in based; biases start at zero.
  // The head gets a small stddev so freshly initialized logits are near zero
  // and the initial loss sits at ln(11) (uniform softmax).
  fill_normal(m.conv1_k, rng, std::sqrt(2.0 / (1 * 5 * 5)));
  fill_normal(m.conv2_k, rng, std::sqrt(2.0 / (10 * 5 * 5)));
  fill_normal(m.fc1_w, rng, std::sqrt(2.0 / kFlatDim));
  fill_normal(m.head_w, rng, 0.01);
  return m;
}

std::vector<Tensor*> ExtractorModel::params(bool with_head) {
  std::vector<Tensor*> p = {&conv1_k, &conv1_b, &conv2_k, &conv2_b, &fc1_w, &fc1_b};
  if (with_head) {
    p.push_back(&head_w);
    p.push_back(&head_b);
  }
  return p;
}

std::vector<const Tensor*> ExtractorModel::params(bool with_head) const {
  auto mut = const_cast<ExtractorModel*>(this)->params(with_head);
  return std::vector<const Tensor*>(mut.begin(), mut.end());
}

Checkpoint ExtractorModel::to_checkpoint() const {
  Checkpoint c;
  c.model_kind = kModelExtractor;
  c.add("conv1_k", conv1_k);
  c.add("conv1_b", conv1_b);
  c.add("conv2_k", conv2_k);
  c.add("conv2_b", conv2_b);
  c.add("fc1_w", fc1_w);
  c.add("fc1_b", fc1_b);
  c.add("head_w", head_w);
  c.add("head_b", head_b);
  return c;
}

ExtractorModel ExtractorModel::from_checkpoint(const Checkpoint& c) {
  if (c.model_kind != kModelExtractor)
    fail(ErrorKind::Format, "checkpoint holds model kind " + std::to_string(c.model_kind) +
                                ", not a frame extractor");
  ExtractorModel m;
  auto take = [&](const char* name, Tensor& dst) {
    const Tensor& src = c.require(name);
    if (!src.same_shape(dst))
      fail(ErrorKind::Format, std::string("checkpoint tensor ") + name + " has shape " +
                                  src.shape_string() + ", want " + dst.shape_string());
    dst = src;
  };
  take("conv1_k", m.conv1_k);
  take("conv1_b", m.conv1_b);
  take("conv2_k", m.conv2_k);
  take("conv2_b", m.conv2_b);
  take("fc1_w", m.fc1_w);
  take("fc1_b", m.fc1_b);
  take("head_w", m.head_w);
  take("head_b", m.head_b);
  return m;
}

std::vector<Var> ExtractorVars::list(bool with_head) const {
  std::vector<Var> v = {c1k, c1b, c2k, c2b, f1w, f1b};
  if (with_head) {
    v.push_back(hw);
    v.push_back(hb);
  }
  return v;
}

ExtractorVars lift_extractor(Tape& t, const ExtractorModel& m, bool with_head) {
  ExtractorVars v;
  v.c1k = t.leaf(m.conv1_k);
  v.c1b = t.leaf(m.conv1_b);
  v.c2k = t.leaf(m.conv2_k);
  v.c2b = t.leaf(m.conv2_b);
  v.f1w = t.leaf(m.fc1_w);
  v.f1b = t.leaf(m.fc1_b);
  if (with_head) {
    v.hw = t.leaf(m.head_w);
    v.hb = t.leaf(m.head_b);
  }
  return v;
}

Var extractor_features(Tape& t, const ExtractorVars& v, Var x, ExtractorTrace* trace) {
  const int64_t B = t.value(x).dim(0);
  Var c1 = t.relu(t.conv2d(x, v.c1k, v.c1b));  // B×10×24×24
  Var p1 = t.maxpool2(c1);                     // B×10×12×12
  Var c2 = t.relu(t.conv2d(p1, v.c2k, v.c2b)); // B×20×8×8
  Var p2 = t.maxpool2(c2);                     // B×20×4×4
  Var flat = t.reshape(p2, {B, kFlatDim});
  Var f = t.relu(t.add_bias(t.matmul(flat, t.swap_last2(v.f1w)), v.f1b));  // B×50
  if (trace) *trace = {c1, p1, c2, p2, flat, f};
  return f;
}

Var extractor_logits(Tape& t, const ExtractorVars& v, Var features) {
  return t.add_bias(t.matmul(features, t.swap_last2(v.hw)), v.hb);
}

PretrainCorpus build_pretrain_corpus(const std::vector<MnistImage>& mnist_train,
                                     const NoiseDistribution& dist, uint64_t seed, int variants,
                                     int64_t noise_frames) {
  if (mnist_train.empty()) fail(ErrorKind::Config, "pretrain corpus needs MNIST images");
  if (variants < 0 || noise_frames < 0) fail(ErrorKind::Config, "negative corpus sizes");
  const int64_t digit_frames = int64_t(mnist_train.size()) * variants;
  const int64_t total = digit_frames + noise_frames;
  PretrainCorpus c;
  c.frames.resize(size_t(total) * kDigitPixels);
  c.labels.resize(size_t(total));
  for (int64_t i = 0; i < total; ++i) {
    Rng rng(derive_seed(seed, uint64_t(i)));
    uint8_t* frame = c.frames.data() + size_t(i) * kDigitPixels;
    for (int p = 0; p < kDigitPixels; ++p) frame[p] = dist.sample(rng);
    if (i < digit_frames) {
      const MnistImage& img = mnist_train[size_t(i / variants)];
      for (int p = 0; p < kDigitPixels; ++p) frame[p] = std::max(frame[p], img.pixels[size_t(p)]);
      c.labels[size_t(i)] = img.digit;
    } else {
      c.labels[size_t(i)] = 10;
    }
  }
  return c;
}

namespace {

// forward + loss + accuracy for one batch of corpus indices
struct BatchGraph {
  Var loss;
  Var logits;
};

BatchGraph pretrain_batch_graph(Tape& tape, const ExtractorVars& v, const PretrainCorpus& corpus,
                                const int64_t* idx, int64_t n) {
  Tensor x({n, 1, kDigitH, kDigitW});
  std::vector<uint16_t> labels(static_cast<size_t>(n));
  for (int64_t b = 0; b < n; ++b) {
    const uint8_t* src = corpus.frames.data() + size_t(idx[b]) * kDigitPixels;
    for (int p = 0; p < kDigitPixels; ++p) x[b * kDigitPixels + p] = float(src[p]) / 255.0f;
    labels[size_t(b)] = corpus.labels[size_t(idx[b])];
  }
  Var xv = tape.constant(std::move(x));
  Var logits = extractor_logits(tape, v, extractor_features(tape, v, xv));
  Var loss = tape.cross_entropy(logits, labels);
  return {loss, logits};
}

}  // namespace

PretrainResult pretrain(const PretrainCorpus& corpus, const PretrainConfig& cfg,
                        const std::function<void(int, const PretrainEpoch&)>& on_epoch) {
  if (corpus.size() == 0) fail(ErrorKind::Config, "empty pretrain corpus");
  if (cfg.batch <= 0 || cfg.epochs <= 0) fail(ErrorKind::Config, "batch and epochs must be positive");

  Rng init_rng(derive_seed(cfg.seed, 0xE0));
  PretrainResult res;
  res.model = ExtractorModel::init(init_rng);
  Adam opt(cfg.lr);

  const int64_t n = corpus.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, 0xE1000 + uint64_t(epoch)));
    // Fisher-Yates, fixed draw order
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[size_t(i)], order[size_t(erng.uniform_int(uint64_t(i + 1)))]);

    PretrainEpoch stats;
    int64_t batches = 0, correct = 0, seen = 0;
    for (int64_t start = 0; start < n; start += cfg.batch) {
      const int64_t bsz = std::min<int64_t>(cfg.batch, n - start);
      Tape tape;
      ExtractorVars v = lift_extractor(tape, res.model, true);
      BatchGraph bg;
      try {
        bg = pretrain_batch_graph(tape, v, corpus, order.data() + start, bsz);
      } catch (const Error& e) {
        // NaN anywhere in the forward pass is divergence once training runs.
        if (e.kind() == ErrorKind::Numeric)
          fail(ErrorKind::Training, "loss diverged to NaN in epoch " + std::to_string(epoch));
        throw;
      }
      const float loss = tape.value(bg.loss)[0];
      if (std::isnan(loss))
        fail(ErrorKind::Training, "loss diverged to NaN in epoch " + std::to_string(epoch));
      tape.backward(bg.loss);

      const Tensor& logits = tape.value(bg.logits);
      for (int64_t b = 0; b < bsz; ++b)
        if (argmax_row(logits.data() + b * kPretrainClasses, kPretrainClasses) ==
            int(corpus.labels[size_t(order[size_t(start + b)])]))
          ++correct;
      seen += bsz;
      stats.loss += double(loss);
      ++batches;

      auto params = res.model.params(true);
      std::vector<const Tensor*> grads;
      auto vars = v.list(true);
      grads.reserve(vars.size());
      for (Var pv : vars) grads.push_back(&tape.grad(pv));
      try {
        opt.step(params, grads);
      } catch (const Error& e) {
        // The optimizer rejects NaN gradients but cannot know the epoch.
        if (e.kind() == ErrorKind::Training)
          fail(ErrorKind::Training, std::string(e.what()) + " in epoch " + std::to_string(epoch));
        throw;
      }
    }
    stats.loss /= double(batches);
    stats.accuracy = double(correct) / double(seen);
    res.history.push_back(stats);
    if (on_epoch) on_epoch(epoch, stats);
  }
  res.final_accuracy = frame_accuracy(res.model, corpus);
  return res;
}

double frame_accuracy(const ExtractorModel& m, const PretrainCorpus& corpus, int batch) {
  const int64_t n = corpus.size();
  if (n == 0) fail(ErrorKind::Config, "empty corpus");
  int64_t correct = 0;
  for (int64_t start = 0; start < n; start += batch) {
    const int64_t bsz = std::min<int64_t>(batch, n - start);
    Tape tape;
    ExtractorVars v = lift_extractor(tape, m, true);
    Var xv = tape.constant(frames_to_batch(corpus.frames.data() + size_t(start) * kDigitPixels, bsz));
    Var logits = extractor_logits(tape, v, extractor_features(tape, v, xv));
    const Tensor& lv = tape.value(logits);
    for (int64_t b = 0; b < bsz; ++b)
      if (argmax_row(lv.data() + b * kPretrainClasses, kPretrainClasses) ==
          int(corpus.labels[size_t(start + b)]))
        ++correct;
  }
  return double(correct) / double(n);
}

void extract_features(const ExtractorModel& m, FmnvReader& data, const std::string& out_path,
                      const std::function<void(uint64_t, uint64_t)>& on_progress) {
  FmftWriter out(out_path, data.count(), kVideoFrames, kFeatureDim);
  for (uint64_t i = 0; i < data.count(); ++i) {
    VideoSample s = data.read(i);
    Tape tape;
    ExtractorVars v = lift_extractor(tape, m, false);
    Var xv = tape.constant(frames_to_batch(s.frames.data(), kVideoFrames));
    Var f = extractor_features(tape, v, xv);  // 25×50
    out.append(s.label, tape.value(f).data());
    if (on_progress && (i + 1) % 1024 == 0) on_progress(i + 1, data.count());
  }
  out.finish();
}

}  // namespace ac
