#pragma once

// ACKP checkpoint container: ordered named tensors plus run metadata.
// Serialization order is fixed by insertion order, so saving the same model
// twice produces identical bytes.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ac/tensor.hpp"

namespace ac {

constexpr uint32_t kCkptVersion = 1;
constexpr uint32_t kModelExtractor = 0;
constexpr uint32_t kModelCluster = 1;

struct Checkpoint {
  uint32_t model_kind = 0;
  uint64_t seed = 0;
  uint32_t epoch = 0;
  std::string config;  // flat key=value lines, opaque to this module
  std::vector<std::array<float, 4>> metrics;  // per-epoch {loss, train_acc, test_acc, spare}
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, Tensor t) { tensors.emplace_back(name, std::move(t)); }
  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
  // Missing name → consistency error naming it.
  const Tensor& require(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ac
