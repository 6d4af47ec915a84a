#pragma once

// Flash-MNIST synthesis: 25-frame videos of noisy 28×28 backgrounds with
// MNIST digits overlaid by per-pixel max. The label is a 10-bit mask, bit d
// set iff digit d appears somewhere in the video, giving 1024 categories.

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ac/mnist.hpp"
#include "ac/rng.hpp"

namespace ac {

constexpr int kVideoFrames = 25;
constexpr int kVideoBytes = kVideoFrames * kDigitPixels;  // 19600
constexpr int kNumCategories = 1024;
constexpr uint32_t kFmnvVersion = 1;

struct VideoSample {
  uint16_t label = 0;
  std::vector<uint8_t> frames;  // kVideoFrames × 784, frame-major
};

// Empirical distribution of pixel intensities over the MNIST training split.
// Sampling is integer-exact against the raw counts, so no floating-point
// rounding enters the data path; the probabilities are derived views.
class NoiseDistribution {
 public:
  static NoiseDistribution from_images(const std::vector<MnistImage>& train);

  double prob(int value) const { return prob_[size_t(value)]; }
  const std::array<double, 256>& probabilities() const { return prob_; }

  uint8_t sample(Rng& rng) const;

 private:
  std::array<uint64_t, 257> cum_{};  // cum_[v] = #pixels with intensity < v
  std::array<double, 256> prob_{};
};

// Per-digit index into an MNIST image list.
struct DigitPool {
  std::array<std::vector<int32_t>, 10> by_digit;
  static DigitPool build(const std::vector<MnistImage>& images);
};

// One video: 25 noise frames, then for each digit in `category` one or two
// images of that digit (p=0.5 each) are each overlaid onto a uniformly chosen
// frame. Consumes rng in a fixed documented order: noise frame-major
// pixel-major, then digits ascending (copy-count draw, then per copy image
// index and frame index).
VideoSample generate_sample(uint16_t category, const std::vector<MnistImage>& images,
                            const DigitPool& pool, const NoiseDistribution& dist, Rng& rng);

struct DatasetSpec {
  std::string split;  // "train" or "test": which MNIST pool supplies digits
  int64_t count = 0;
  uint64_t seed = 0;
  bool stratified = false;  // category = index mod 1024 instead of uniform draw
};

struct DatasetManifest {
  std::string split;
  int64_t count = 0;
  uint64_t seed = 0;
  uint32_t format_version = 0;
  std::array<int64_t, kNumCategories> class_counts{};
};

// Streams `spec.count` samples to `out_path` in the FMNV format and writes
// `out_path + ".manifest"`. Each sample derives its own rng from
// (seed, index), so generation order cannot affect the bytes.
DatasetManifest generate_dataset(const DatasetSpec& spec, const std::vector<MnistImage>& images,
                                 const DigitPool& pool, const NoiseDistribution& dist,
                                 const std::string& out_path);

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const DatasetManifest& m, const std::string& path);

// Sequential/random-access reader over an FMNV file. Header is validated on
// open, including the payload size implied by the sample count.
class FmnvReader {
 public:
  explicit FmnvReader(const std::string& path);

  uint64_t count() const { return count_; }
  uint64_t seed() const { return seed_; }

  VideoSample read(uint64_t index);

 private:
  std::ifstream file_;
  std::string path_;
  uint64_t count_ = 0;
  uint64_t seed_ = 0;
};

class FmnvWriter {
 public:
  FmnvWriter(const std::string& path, uint64_t count, uint64_t seed);
  void append(const VideoSample& s);
  // All declared samples must have been appended.
  void finish();

 private:
  std::ofstream file_;
  uint64_t declared_ = 0;
  uint64_t written_ = 0;
  bool finished_ = false;
};

}  // namespace ac
