#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "ac/rng.hpp"
#include "ac/tensor.hpp"

namespace ac {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid for the tape that
// produced it.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over an operation tape. Each op records its forward
// result and a backward rule; `backward()` replays the rules in reverse
// creation order, which is a reverse topological order of the graph, so every
// node is visited exactly once. Forward values are never touched by the
// backward pass.
//
// All ops compute in float32. Reductions that feed a single scalar (norms,
// softmax denominators, losses) accumulate in double before rounding back,
// which costs nothing and keeps the gradient checks comfortably inside their
// tolerance.
class Tape {
 public:
  // Tracked input or parameter.
  Var leaf(Tensor value);
  // Node that never receives a meaningful gradient (masks, constants).
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  // Gradient accumulated by the last backward(); zeros if none flowed.
  const Tensor& grad(Var v) const;
  size_t node_count() const { return nodes_.size(); }

  // a: p×q, b: q×r -> p×r
  Var matmul(Var a, Var b);
  // Batched matmul: [B×]p×q times [B×]q×r -> B×p×r. A 2-D operand is shared
  // across the batch and its gradient sums over it.
  Var bmm(Var a, Var b);
  // input: [B×]C×H×W, kernels: K×C×kh×kw, bias: K -> [B×]K×(H-kh+1)×(W-kw+1).
  // Valid cross-correlation, stride 1.
  Var conv2d(Var input, Var kernels, Var bias);
  // 2×2 max pooling, stride 2. Spatial dims must be even. Ties route the
  // gradient to the first element of the window in row-major order.
  Var maxpool2(Var input);
  Var relu(Var x);
  Var tanh(Var x);
  // Softmax along the last axis, max-subtracted for stability.
  Var softmax(Var x);
  // Scales each last-axis slice to L2 norm `scale`. A slice with norm below
  // `kDegenerateNorm` is an error, not a clamp.
  Var l2normalize(Var x, float scale);
  // Bernoulli masking with keep-probability rescaling when `train`, identity
  // otherwise. p must be in [0,1). Eval mode consumes no randomness.
  Var dropout(Var x, float p, bool train, Rng& rng);
  // Concatenation along the last axis; leading dims must agree.
  Var concat(const std::vector<Var>& xs);
  Var add(Var a, Var b);
  // x: ...×D plus bias: D broadcast over leading dims.
  Var add_bias(Var x, Var bias);
  // v: B×N×M, alpha/beta: N. y[b,n,m] = alpha[n]*v[b,n,m] + beta[n].
  Var unit_affine(Var v, Var alpha, Var beta);
  // ...×p×q -> ...×q×p
  Var swap_last2(Var x);
  // Sub-tensor at `index` along dim 0; a 1-D input yields shape [1].
  Var slice_dim0(Var x, int64_t index);
  Var reshape(Var x, std::vector<int64_t> shape);
  Var scale(Var x, float c);
  // logits: B×C with one label per row -> scalar mean softmax cross-entropy.
  Var cross_entropy(Var logits, const std::vector<uint16_t>& labels);

  // Seeds d(root)/d(root) = 1 and accumulates gradients into every node.
  // root must be scalar. Grad buffers are reset first, so calling twice
  // yields identical results.
  void backward(Var root);

  static constexpr double kDegenerateNorm = 1e-12;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&)> back;
  };

  Var push(Tensor value, std::function<void(Tape&)> back);
  Tensor& gref(Var v) { return nodes_[size_t(v.id)].grad; }
  const Tensor& vref(Var v) const { return nodes_[size_t(v.id)].value; }
  void check_var(Var v, const char* who) const;

  // deque so value()/grad() references stay valid while later ops are pushed
  std::deque<Node> nodes_;
};

}  // namespace ac
