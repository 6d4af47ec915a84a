#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ac {

constexpr int kDigitH = 28;
constexpr int kDigitW = 28;
constexpr int kDigitPixels = kDigitH * kDigitW;

struct MnistImage {
  std::array<uint8_t, kDigitPixels> pixels;
  uint8_t digit = 0;
};

// Loads an IDX image/label file pair (magic 0x803 / 0x801, big-endian
// header). Image dims must be 28×28 and counts must agree between the files.
std::vector<MnistImage> load_mnist(const std::string& images_path, const std::string& labels_path);

}  // namespace ac
