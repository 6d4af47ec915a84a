#pragma once

// Frame-level CNN: two 5×5 conv layers (10/20 filters) with relu + 2×2 max
// pooling, a 50-unit fully connected layer with relu, and an 11-way head
// used only during pretraining (digits 0-9 plus pure noise). Features are
// the 50-dim post-relu fc outputs.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ac/checkpoint.hpp"
#include "ac/flashmnist.hpp"
#include "ac/mnist.hpp"
#include "ac/rng.hpp"
#include "ac/tape.hpp"
#include "ac/tensor.hpp"

namespace ac {

constexpr int kFeatureDim = 50;
constexpr int kPretrainClasses = 11;
constexpr int kFlatDim = 20 * 4 * 4;  // 28→24→12→8→4 through the conv stack

struct ExtractorModel {
  Tensor conv1_k{{10, 1, 5, 5}}, conv1_b{{10}};
  Tensor conv2_k{{20, 10, 5, 5}}, conv2_b{{20}};
  Tensor fc1_w{{kFeatureDim, kFlatDim}}, fc1_b{{kFeatureDim}};  // stored output×input
  Tensor head_w{{kPretrainClasses, kFeatureDim}}, head_b{{kPretrainClasses}};

  static ExtractorModel init(Rng& rng);

  std::vector<Tensor*> params(bool with_head);
  std::vector<const Tensor*> params(bool with_head) const;

  Checkpoint to_checkpoint() const;
  static ExtractorModel from_checkpoint(const Checkpoint& c);
};

// Tape handles for one training/eval step.
struct ExtractorVars {
  Var c1k, c1b, c2k, c2b, f1w, f1b, hw, hb;
  std::vector<Var> list(bool with_head) const;
};

// Intermediate shapes, exposed so tests can pin the whole chain.
struct ExtractorTrace {
  Var conv1, pool1, conv2, pool2, flat, fc1;
};

ExtractorVars lift_extractor(Tape& t, const ExtractorModel& m, bool with_head);

// x: B×1×28×28, already scaled to [0,1]. Returns B×50 post-relu features.
Var extractor_features(Tape& t, const ExtractorVars& v, Var x, ExtractorTrace* trace = nullptr);
// B×50 → B×11 logits.
Var extractor_logits(Tape& t, const ExtractorVars& v, Var features);

// ---- pretraining ----

struct PretrainCorpus {
  std::vector<uint8_t> frames;  // n × 784
  std::vector<uint8_t> labels;  // digit 0-9, or 10 for pure noise
  int64_t size() const { return int64_t(labels.size()); }
};

// variants noisy-background copies of every MNIST training image, then
// noise_frames pure-noise frames. Each frame derives its rng from
// (seed, frame index).
PretrainCorpus build_pretrain_corpus(const std::vector<MnistImage>& mnist_train,
                                     const NoiseDistribution& dist, uint64_t seed,
                                     int variants = 5, int64_t noise_frames = 30000);

struct PretrainConfig {
  int epochs = 10;
  float lr = 1e-3f;
  int batch = 128;
  uint64_t seed = 0;
};

struct PretrainEpoch {
  double loss = 0.0;      // mean over batches
  double accuracy = 0.0;  // running 11-way frame accuracy
};

struct PretrainResult {
  ExtractorModel model;
  std::vector<PretrainEpoch> history;
  double final_accuracy = 0.0;  // full-corpus accuracy after the last epoch
};

// Adam on softmax cross-entropy over the 11 classes. Shuffles per epoch,
// last partial batch included. NaN loss → training error naming the epoch.
PretrainResult pretrain(const PretrainCorpus& corpus, const PretrainConfig& cfg,
                        const std::function<void(int, const PretrainEpoch&)>& on_epoch = {});

// Mean 11-way accuracy of the model over the corpus.
double frame_accuracy(const ExtractorModel& m, const PretrainCorpus& corpus, int batch = 256);

// ---- feature extraction ----

// Runs every video's 25 frames through the trained CNN (no head, no
// dropout) and streams an FMFT cache of 25×50 features per video.
void extract_features(const ExtractorModel& m, FmnvReader& data, const std::string& out_path,
                      const std::function<void(uint64_t, uint64_t)>& on_progress = {});

}  // namespace ac
