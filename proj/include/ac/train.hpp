#pragma once

// Classifier training on cached local features: per-modality attention
// clusters → concatenated global feature → hidden FC (relu) → dropout →
// softmax over the 1024 video categories. Also evaluation, the ablation
// grid driver, and attention-map export for qualitative inspection.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ac/checkpoint.hpp"
#include "ac/clusters.hpp"
#include "ac/flashmnist.hpp"
#include "ac/rng.hpp"
#include "ac/tensor.hpp"

namespace ac {

enum class OptimizerKind { Adam, RmsProp };

const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);  // unknown → config error

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  float lr = 1e-3f;
  float clip_norm = 0.0f;  // joint gradient-norm ceiling; 0 disables
  float dropout = 0.5f;    // drop probability, in [0,1)
  int epochs = 100;
  int batch = 128;
  uint64_t seed = 0;
  int subsample = 0;  // rows kept per sample during training (L'); 0 = all
  bool balance_classes = false;
  int hidden = 1024;  // classifier hidden width
};

// One modality's feature cache in memory: count × (L·M) row-major.
struct FeatureData {
  int64_t count = 0;
  int64_t L = 0, M = 0;
  std::vector<float> x;
  std::vector<uint16_t> labels;
};

FeatureData load_feature_data(const std::string& path);

// `keep` of L row indices, uniform without replacement, returned ascending.
std::vector<int64_t> sample_row_subset(int64_t L, int64_t keep, Rng& rng);

// Keeps `keep` rows of an L×M matrix, chosen uniformly without replacement,
// in their original relative order.
Tensor subsample_features(const Tensor& X, int64_t keep, Rng& rng);

// Draws sample indices with equal probability mass per class present:
// P(i) ∝ 1 / |class(labels[i])|.
class BalancedSampler {
 public:
  explicit BalancedSampler(const std::vector<uint16_t>& labels);
  int64_t next(Rng& rng) const;
  size_t class_count() const { return buckets_.size(); }

 private:
  std::vector<std::vector<int64_t>> buckets_;  // classes present, ascending
};

// The full classifier: one attention cluster per modality plus the shared
// classification head. Weight matrices are stored output×input.
struct ClusterModel {
  std::vector<ClusterConfig> cluster_cfgs;
  std::vector<ClusterParams> clusters;
  int hidden = 1024;
  int classes = kNumCategories;
  Tensor fc_w, fc_b;    // hidden × D and hidden, D = Σ N_k·M_k
  Tensor out_w, out_b;  // classes × hidden and classes

  static ClusterModel init(std::vector<ClusterConfig> cfgs, int hidden, int classes, Rng& rng);

  int64_t feature_dim() const;  // D
  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;

  // Model tensors plus a config text that from_checkpoint can rebuild from.
  Checkpoint to_checkpoint() const;
  static ClusterModel from_checkpoint(const Checkpoint& c);
};

struct EvalReport {
  double top1 = 0.0, top5 = 0.0;
  double loss = 0.0;                 // mean cross-entropy
  std::vector<double> per_class;     // accuracy per category; 0 where absent
  std::vector<int64_t> class_counts; // test samples per category
};

// Deterministic full pass: dropout off, every feature row used.
EvalReport evaluate(const ClusterModel& model, const std::vector<FeatureData>& data);

struct EpochStats {
  double loss = 0.0;       // mean train batch loss
  double train_acc = 0.0;  // running accuracy over the epoch's train batches
  double test_acc = 0.0;   // top-1 on the test cache after the epoch
};

using TrainCallback = std::function<void(int epoch, const EpochStats&)>;

struct TrainResult {
  std::vector<EpochStats> history;  // one entry per epoch
  int best_epoch = 0;               // highest test accuracy; ties keep the earliest
  Checkpoint best;                  // model + optimizer state at best_epoch
  Checkpoint last;                  // state after the final epoch
};

// Trains on `train`, evaluating on `test` after every epoch. Multimodal
// runs pass one cache and one cluster config per modality; caches must hold
// the same samples in the same order.
TrainResult train_cluster(const std::vector<FeatureData>& train,
                          const std::vector<FeatureData>& test,
                          const std::vector<ClusterConfig>& cluster_cfgs, const TrainConfig& cfg,
                          const TrainCallback& on_epoch = nullptr);

// ---- ablation grid ----

struct AblationResult {
  Weighting kind = Weighting::Average;
  int N = 1;
  bool shifting = false;
  double top1 = 0.0, top5 = 0.0;  // best-epoch test metrics
  int epochs = 0;
  double wallclock_s = 0.0;
  uint64_t seed = 0;
  std::vector<EpochStats> history;
};

// For every cluster size: the Average baseline plus both weighting nets with
// and without shifting (5 runs per size). Writes results.csv and one curves
// CSV per run into out_dir. `jobs` bounds how many runs train concurrently;
// the result rows and CSVs are identical regardless of jobs (wallclock aside).
std::vector<AblationResult> ablation_grid(
    const std::vector<FeatureData>& train, const std::vector<FeatureData>& test,
    const TrainConfig& base, const std::vector<int>& sizes, const std::string& out_dir,
    const std::function<void(const AblationResult&)>& on_run = nullptr, int jobs = 1);

void write_results_csv(const std::string& path, const std::vector<AblationResult>& rows);
void write_curves_csv(const std::string& path, const std::vector<EpochStats>& history);
std::string curves_file_name(Weighting kind, int N, bool shifting);

// ---- attention maps ----

// For each requested sample index: one CSV per modality holding the N×L
// softmax weights (rows sum to 1) and one PGM strip per unit with the
// video's frames scaled by that unit's weights. `videos` must be the FMNV
// file the feature cache was extracted from, in the same order.
void export_attention_maps(const ClusterModel& model, const std::vector<FeatureData>& data,
                           FmnvReader& videos, const std::vector<int64_t>& samples,
                           const std::string& out_dir);

}  // namespace ac
