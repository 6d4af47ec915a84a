#pragma once

// Attention clusters: softmax weighting functions over a set of local
// features, attention units with an optional shifting operation
// (per-unit affine then l2 normalization to 1/√N), and concatenation into
// a global feature. Includes the Average/Flatten baselines.
//
// Two layers of API:
//   * plain-Tensor reference ops (compute_weights, attention_unit, ...)
//     working on one sample with one unit's parameters — used by tests and
//     the attention-map visualizer;
//   * a batched tape graph (cluster_forward) over stacked unit parameters —
//     used for training.

#include <cstdint>
#include <string>
#include <vector>

#include "ac/checkpoint.hpp"
#include "ac/rng.hpp"
#include "ac/tape.hpp"
#include "ac/tensor.hpp"

namespace ac {

enum class Weighting { Average, Fc1, Fc2 };

const char* weighting_name(Weighting k);
Weighting parse_weighting(const std::string& name);  // unknown → config error

struct ClusterConfig {
  Weighting kind = Weighting::Fc1;
  int N = 1;          // cluster size (number of attention units)
  bool shifting = true;
  int H = 10;         // FC2 hidden width
  int M = 50;         // local feature dimensionality
};

// Stacked parameters for all N units of one cluster. Unused tensors stay
// empty (numel 0) depending on the weighting kind / shifting flag.
struct ClusterParams {
  ClusterConfig cfg;
  Tensor w;      // FC1: N×M
  Tensor b;      // FC1: N (scalar bias per unit, broadcast over positions)
  Tensor w1;     // FC2: N×H×M
  Tensor b1;     // FC2: N×H
  Tensor w2;     // FC2: N×H
  Tensor b2;     // FC2: N
  Tensor alpha;  // shifting: N
  Tensor beta;   // shifting: N

  static ClusterParams init(const ClusterConfig& cfg, Rng& rng);

  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;

  // Tensors are stored under prefix ("w", "alpha", ...). The caller owns the
  // checkpoint's config text.
  void add_to(Checkpoint& c, const std::string& prefix) const;
  static ClusterParams from_checkpoint(const Checkpoint& c, const std::string& prefix,
                                       const ClusterConfig& cfg);
};

// One unit's slice of a ClusterParams, for the reference ops.
struct UnitParams {
  Weighting kind = Weighting::Average;
  Tensor w;            // FC1: M
  float b = 0.0f;      // FC1 bias
  Tensor w1;           // FC2: H×M
  Tensor b1;           // FC2: H
  Tensor w2;           // FC2: H
  float b2 = 0.0f;     // FC2 output bias
  bool shifting = false;
  float alpha = 1.0f, beta = 0.0f;
};

UnitParams unit_view(const ClusterParams& p, int unit);

// ---- reference ops (one sample, one unit, forward only) ----

// X is L×M. Returns the L-weight vector on the simplex.
Tensor compute_weights(const UnitParams& p, const Tensor& X);

// v = aX, optionally shifted: (α·aX+β)/(√N·‖α·aX+β‖₂). N is the size of the
// cluster the unit belongs to.
Tensor attention_unit(const UnitParams& p, const Tensor& X, int N);

// g = [v₁ ... v_N]; requires exactly cfg.N unit parameter sets.
Tensor attention_cluster(const ClusterConfig& cfg, const std::vector<UnitParams>& units,
                         const Tensor& X);

// Concatenates per-modality global features in declared order.
Tensor multimodal_concat(const std::vector<Tensor>& per_modality);

// Mean feature vector tiled N times (parameter-count-fair Average baseline).
Tensor average_replicated_baseline(const Tensor& X, int N);

// Row-major flattening; rejects L != expected_rows.
Tensor flatten_baseline(const Tensor& X, int64_t expected_rows);

// ---- batched tape graph ----

struct ClusterVars {
  Var w, b, w1, b1, w2, b2, alpha, beta;  // invalid where unused
  std::vector<Var> list() const;          // used vars, parameter order
};

ClusterVars lift_cluster(Tape& t, const ClusterParams& p);

// X: B×L×M → B×(N·M) global features.
Var cluster_forward(Tape& t, const ClusterConfig& cfg, const ClusterVars& v, Var x);

// Baselines on the same batched layout.
Var average_replicated_forward(Tape& t, Var x, int N);  // B×(N·M)
Var flatten_forward(Tape& t, Var x);                    // B×(L·M)

}  // namespace ac
