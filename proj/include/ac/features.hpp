#pragma once

// FMFT feature cache: per video, L rows of M float32 features plus the
// label. Payload is written in bulk (little-endian floats; this artifact
// targets little-endian hosts and the reader validates sizes, not byte
// order).

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ac/errors.hpp"

namespace ac {

constexpr uint32_t kFmftVersion = 1;

struct FeatureSet {
  uint16_t label = 0;
  std::vector<float> values;  // L×M row-major
};

class FmftWriter {
 public:
  FmftWriter(const std::string& path, uint64_t count, uint32_t L, uint32_t M);
  void append(uint16_t label, const float* values);  // L·M floats
  void finish();

 private:
  std::ofstream file_;
  uint64_t declared_ = 0, written_ = 0;
  uint32_t L_ = 0, M_ = 0;
  bool finished_ = false;
};

class FmftReader {
 public:
  explicit FmftReader(const std::string& path);

  uint64_t count() const { return count_; }
  uint32_t rows() const { return L_; }
  uint32_t cols() const { return M_; }

  FeatureSet read(uint64_t index);

  // Bulk load: features as count × (L·M) floats plus labels.
  void read_all(std::vector<float>& features, std::vector<uint16_t>& labels);

 private:
  std::ifstream file_;
  std::string path_;
  uint64_t count_ = 0;
  uint32_t L_ = 0, M_ = 0;
};

// Splits every sample's feature matrix at column `split_col`: rows [0,L)
// stay intact, columns [0,split_col) go to out_a and [split_col,M) to out_b.
// Labels are copied to both. Used to fabricate a two-modality setup from one
// cache.
void split_feature_columns(const std::string& in_path, const std::string& out_a,
                           const std::string& out_b, uint32_t split_col);

}  // namespace ac
