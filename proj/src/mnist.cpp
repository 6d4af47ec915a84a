#include "ac/mnist.hpp"

#include "ac/binio.hpp"

namespace ac {

std::vector<MnistImage> load_mnist(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgf = open_in(images_path);
  const uint32_t img_magic = read_be_u32(imgf, "image magic");
  if (img_magic != 0x00000803u)
    fail(ErrorKind::Format, images_path + ": bad image magic " + std::to_string(img_magic) +
                                " (want 2051)");
  const uint32_t n_images = read_be_u32(imgf, "image count");
  const uint32_t rows = read_be_u32(imgf, "rows");
  const uint32_t cols = read_be_u32(imgf, "cols");
  if (rows != kDigitH || cols != kDigitW)
    fail(ErrorKind::Format, images_path + ": expected 28x28 images, got " + std::to_string(rows) +
                                "x" + std::to_string(cols));

  std::ifstream labf = open_in(labels_path);
  const uint32_t lab_magic = read_be_u32(labf, "label magic");
  if (lab_magic != 0x00000801u)
    fail(ErrorKind::Format, labels_path + ": bad label magic " + std::to_string(lab_magic) +
                                " (want 2049)");
  const uint32_t n_labels = read_be_u32(labf, "label count");
  if (n_images != n_labels)
    fail(ErrorKind::Consistency, "image count " + std::to_string(n_images) +
                                     " does not match label count " + std::to_string(n_labels));

  std::vector<MnistImage> out(n_images);
  for (uint32_t i = 0; i < n_images; ++i)
    read_bytes(imgf, out[i].pixels.data(), kDigitPixels, "image pixels");
  for (uint32_t i = 0; i < n_images; ++i) {
    read_bytes(labf, &out[i].digit, 1, "label");
    if (out[i].digit > 9)
      fail(ErrorKind::Data, labels_path + ": label " + std::to_string(int(out[i].digit)) +
                                " out of range at index " + std::to_string(i));
  }
  return out;
}

}  // namespace ac
