#include "ac/flashmnist.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "ac/binio.hpp"

namespace ac {

namespace {
constexpr char kFmnvMagic[4] = {'F', 'M', 'N', 'V'};
constexpr uint64_t kHeaderBytes = 4 + 4 + 8 + 8;
constexpr uint64_t kRecordBytes = 2 + uint64_t(kVideoBytes);
}  // namespace

NoiseDistribution NoiseDistribution::from_images(const std::vector<MnistImage>& train) {
  if (train.empty()) fail(ErrorKind::Config, "noise distribution needs a nonempty training set");
  std::array<uint64_t, 256> counts{};
  for (const auto& img : train)
    for (uint8_t p : img.pixels) counts[p]++;
  NoiseDistribution d;
  uint64_t total = 0;
  for (int v = 0; v < 256; ++v) {
    d.cum_[size_t(v)] = total;
    total += counts[size_t(v)];
  }
  d.cum_[256] = total;
  for (int v = 0; v < 256; ++v) d.prob_[size_t(v)] = double(counts[size_t(v)]) / double(total);
  return d;
}

uint8_t NoiseDistribution::sample(Rng& rng) const {
  const uint64_t r = rng.uniform_int(cum_[256]);
  // first position with cum_ > r, minus one, is the sampled intensity
  const auto it = std::upper_bound(cum_.begin() + 1, cum_.end(), r);
  return uint8_t((it - cum_.begin()) - 1);
}

DigitPool DigitPool::build(const std::vector<MnistImage>& images) {
  DigitPool p;
  for (size_t i = 0; i < images.size(); ++i)
    p.by_digit[images[i].digit].push_back(int32_t(i));
  return p;
}

VideoSample generate_sample(uint16_t category, const std::vector<MnistImage>& images,
                            const DigitPool& pool, const NoiseDistribution& dist, Rng& rng) {
  if (category >= kNumCategories)
    fail(ErrorKind::Config, "category " + std::to_string(category) + " outside [0,1024)");
  for (int d = 0; d < 10; ++d)
    if ((category >> d) & 1 && pool.by_digit[size_t(d)].empty())
      fail(ErrorKind::Data, "digit " + std::to_string(d) + " requested but absent from the pool");

  VideoSample s;
  s.label = category;
  s.frames.resize(size_t(kVideoBytes));
  for (auto& px : s.frames) px = dist.sample(rng);

  for (int d = 0; d < 10; ++d) {
    if (!((category >> d) & 1)) continue;
    const auto& idx = pool.by_digit[size_t(d)];
    const int copies = rng.bernoulli(0.5) ? 2 : 1;
    for (int c = 0; c < copies; ++c) {
      const MnistImage& img = images[size_t(idx[rng.uniform_int(idx.size())])];
      uint8_t* frame = s.frames.data() + rng.uniform_int(kVideoFrames) * kDigitPixels;
      for (int px = 0; px < kDigitPixels; ++px) frame[px] = std::max(frame[px], img.pixels[size_t(px)]);
    }
  }
  return s;
}

FmnvWriter::FmnvWriter(const std::string& path, uint64_t count, uint64_t seed)
    : file_(open_out(path)), declared_(count) {
  write_bytes(file_, kFmnvMagic, 4);
  write_le<uint32_t>(file_, kFmnvVersion);
  write_le<uint64_t>(file_, count);
  write_le<uint64_t>(file_, seed);
}

void FmnvWriter::append(const VideoSample& s) {
  if (written_ >= declared_)
    fail(ErrorKind::Storage, "more samples appended than declared (" + std::to_string(declared_) + ")");
  if (s.frames.size() != size_t(kVideoBytes))
    fail(ErrorKind::Dimension, "sample has " + std::to_string(s.frames.size()) + " bytes, want " +
                                   std::to_string(kVideoBytes));
  write_le<uint16_t>(file_, s.label);
  write_bytes(file_, s.frames.data(), s.frames.size());
  ++written_;
}

void FmnvWriter::finish() {
  if (finished_) return;
  if (written_ != declared_)
    fail(ErrorKind::Storage, "declared " + std::to_string(declared_) + " samples but wrote " +
                                 std::to_string(written_));
  file_.flush();
  if (!file_) fail(ErrorKind::Storage, "flush failed");
  finished_ = true;
}

FmnvReader::FmnvReader(const std::string& path) : file_(open_in(path)), path_(path) {
  char magic[4];
  read_bytes(file_, magic, 4, "magic");
  if (std::memcmp(magic, kFmnvMagic, 4) != 0) fail(ErrorKind::Format, path + ": not an FMNV file");
  const uint32_t version = read_le<uint32_t>(file_, "version");
  if (version != kFmnvVersion)
    fail(ErrorKind::Format, path + ": unsupported version " + std::to_string(version));
  count_ = read_le<uint64_t>(file_, "count");
  seed_ = read_le<uint64_t>(file_, "seed");
  const uint64_t expect = kHeaderBytes + count_ * kRecordBytes;
  const uint64_t actual = file_size(file_);
  if (actual != expect)
    fail(ErrorKind::Format, path + ": size " + std::to_string(actual) + " does not match header (" +
                                std::to_string(expect) + " for " + std::to_string(count_) + " samples)");
}

VideoSample FmnvReader::read(uint64_t index) {
  if (index >= count_)
    fail(ErrorKind::Data, path_ + ": sample " + std::to_string(index) + " out of range (count " +
                              std::to_string(count_) + ")");
  file_.seekg(std::streamoff(kHeaderBytes + index * kRecordBytes));
  VideoSample s;
  s.label = read_le<uint16_t>(file_, "label");
  s.frames.resize(size_t(kVideoBytes));
  read_bytes(file_, s.frames.data(), s.frames.size(), "frames");
  return s;
}

DatasetManifest generate_dataset(const DatasetSpec& spec, const std::vector<MnistImage>& images,
                                 const DigitPool& pool, const NoiseDistribution& dist,
                                 const std::string& out_path) {
  if (spec.count < 0) fail(ErrorKind::Config, "negative sample count");
  if (spec.split != "train" && spec.split != "test")
    fail(ErrorKind::Config, "split must be train or test, got '" + spec.split + "'");

  DatasetManifest m;
  m.split = spec.split;
  m.count = spec.count;
  m.seed = spec.seed;
  m.format_version = kFmnvVersion;

  FmnvWriter writer(out_path, uint64_t(spec.count), spec.seed);
  for (int64_t i = 0; i < spec.count; ++i) {
    Rng sub(derive_seed(spec.seed, uint64_t(i)));
    const uint16_t category = spec.stratified ? uint16_t(i % kNumCategories)
                                              : uint16_t(sub.uniform_int(kNumCategories));
    writer.append(generate_sample(category, images, pool, dist, sub));
    m.class_counts[category]++;
  }
  writer.finish();
  write_manifest(m, out_path + ".manifest");
  return m;
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::Storage, "cannot open for writing: " + path);
  f << "split=" << m.split << "\n";
  f << "count=" << m.count << "\n";
  f << "seed=" << m.seed << "\n";
  f << "format_version=" << m.format_version << "\n";
  for (int c = 0; c < kNumCategories; ++c) f << "class_" << c << "=" << m.class_counts[size_t(c)] << "\n";
  f.flush();
  if (!f) fail(ErrorKind::Storage, "manifest write failed: " + path);
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::Storage, "cannot open for reading: " + path);
  DatasetManifest m;
  std::string line;
  int seen = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Format, path + ": bad manifest line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "split")
        m.split = val;
      else if (key == "count")
        m.count = std::stoll(val);
      else if (key == "seed")
        m.seed = std::stoull(val);
      else if (key == "format_version")
        m.format_version = uint32_t(std::stoul(val));
      else if (key.rfind("class_", 0) == 0) {
        const int c = std::stoi(key.substr(6));
        if (c < 0 || c >= kNumCategories) fail(ErrorKind::Format, path + ": bad class key " + key);
        m.class_counts[size_t(c)] = std::stoll(val);
      } else
        fail(ErrorKind::Format, path + ": unknown manifest key '" + key + "'");
    } catch (const std::invalid_argument&) {
      fail(ErrorKind::Format, path + ": bad value in '" + line + "'");
    } catch (const std::out_of_range&) {
      fail(ErrorKind::Format, path + ": bad value in '" + line + "'");
    }
    ++seen;
  }
  if (seen < 4) fail(ErrorKind::Format, path + ": incomplete manifest");
  return m;
}

}  // namespace ac
