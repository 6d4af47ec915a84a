#include "ac/checkpoint.hpp"

#include <cstring>

#include "ac/binio.hpp"

namespace ac {

namespace {
constexpr char kMagic[4] = {'A', 'C', 'K', 'P'};
}

const Tensor& Checkpoint::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) fail(ErrorKind::Consistency, "checkpoint is missing tensor '" + name + "'");
  return *t;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream f = open_out(path);
  write_bytes(f, kMagic, 4);
  write_le<uint32_t>(f, kCkptVersion);
  write_le<uint32_t>(f, c.model_kind);
  write_le<uint64_t>(f, c.seed);
  write_le<uint32_t>(f, c.epoch);

  write_le<uint32_t>(f, uint32_t(c.config.size()));
  write_bytes(f, c.config.data(), c.config.size());

  write_le<uint32_t>(f, uint32_t(c.metrics.size()));
  for (const auto& row : c.metrics)
    for (float v : row) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      write_le<uint32_t>(f, bits);
    }

  write_le<uint32_t>(f, uint32_t(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    if (name.size() > 0xFFFF) fail(ErrorKind::Storage, "tensor name too long: " + name);
    write_le<uint16_t>(f, uint16_t(name.size()));
    write_bytes(f, name.data(), name.size());
    write_le<uint32_t>(f, uint32_t(t.ndim()));
    for (size_t d = 0; d < t.ndim(); ++d) write_le<uint64_t>(f, uint64_t(t.dim(d)));
    for (int64_t i = 0; i < t.numel(); ++i) {
      uint32_t bits;
      std::memcpy(&bits, t.data() + i, 4);
      write_le<uint32_t>(f, bits);
    }
  }
  f.flush();
  if (!f) fail(ErrorKind::Storage, "checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f = open_in(path);
  char magic[4];
  read_bytes(f, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorKind::Format, path + ": not a checkpoint file");
  const uint32_t version = read_le<uint32_t>(f, "version");
  if (version != kCkptVersion)
    fail(ErrorKind::Format, path + ": unsupported checkpoint version " + std::to_string(version));

  Checkpoint c;
  c.model_kind = read_le<uint32_t>(f, "model kind");
  c.seed = read_le<uint64_t>(f, "seed");
  c.epoch = read_le<uint32_t>(f, "epoch");

  const uint32_t cfg_len = read_le<uint32_t>(f, "config length");
  c.config.resize(cfg_len);
  if (cfg_len) read_bytes(f, c.config.data(), cfg_len, "config");

  const uint32_t n_metrics = read_le<uint32_t>(f, "metric rows");
  c.metrics.resize(n_metrics);
  for (auto& row : c.metrics)
    for (float& v : row) {
      const uint32_t bits = read_le<uint32_t>(f, "metric value");
      std::memcpy(&v, &bits, 4);
    }

  const uint32_t n_tensors = read_le<uint32_t>(f, "tensor count");
  for (uint32_t k = 0; k < n_tensors; ++k) {
    const uint16_t name_len = read_le<uint16_t>(f, "tensor name length");
    std::string name(name_len, '\0');
    if (name_len) read_bytes(f, name.data(), name_len, "tensor name");
    const uint32_t ndim = read_le<uint32_t>(f, "tensor rank");
    if (ndim > 8) fail(ErrorKind::Format, path + ": implausible tensor rank");
    std::vector<int64_t> shape(ndim);
    for (auto& d : shape) d = int64_t(read_le<uint64_t>(f, "tensor dim"));
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const uint32_t bits = read_le<uint32_t>(f, "tensor data");
      std::memcpy(&t[i], &bits, 4);
    }
    c.add(name, std::move(t));
  }
  return c;
}

}  // namespace ac
