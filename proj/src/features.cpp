#include "ac/features.hpp"

#include <cstring>

#include "ac/binio.hpp"

namespace ac {

namespace {
constexpr char kMagic[4] = {'F', 'M', 'F', 'T'};
constexpr uint64_t kHeaderBytes = 4 + 4 + 8 + 4 + 4;
}  // namespace

FmftWriter::FmftWriter(const std::string& path, uint64_t count, uint32_t L, uint32_t M)
    : file_(open_out(path)), declared_(count), L_(L), M_(M) {
  if (L == 0 || M == 0) fail(ErrorKind::Config, "feature cache dims must be positive");
  write_bytes(file_, kMagic, 4);
  write_le<uint32_t>(file_, kFmftVersion);
  write_le<uint64_t>(file_, count);
  write_le<uint32_t>(file_, L);
  write_le<uint32_t>(file_, M);
}

void FmftWriter::append(uint16_t label, const float* values) {
  if (written_ >= declared_)
    fail(ErrorKind::Storage, "more feature sets appended than declared (" +
                                 std::to_string(declared_) + ")");
  write_le<uint16_t>(file_, label);
  write_bytes(file_, values, sizeof(float) * size_t(L_) * size_t(M_));
  ++written_;
}

void FmftWriter::finish() {
  if (finished_) return;
  if (written_ != declared_)
    fail(ErrorKind::Storage, "declared " + std::to_string(declared_) + " feature sets but wrote " +
                                 std::to_string(written_));
  file_.flush();
  if (!file_) fail(ErrorKind::Storage, "feature cache flush failed");
  finished_ = true;
}

FmftReader::FmftReader(const std::string& path) : file_(open_in(path)), path_(path) {
  char magic[4];
  read_bytes(file_, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorKind::Format, path + ": not a feature cache");
  const uint32_t version = read_le<uint32_t>(file_, "version");
  if (version != kFmftVersion)
    fail(ErrorKind::Format, path + ": unsupported version " + std::to_string(version));
  count_ = read_le<uint64_t>(file_, "count");
  L_ = read_le<uint32_t>(file_, "rows");
  M_ = read_le<uint32_t>(file_, "cols");
  if (L_ == 0 || M_ == 0) fail(ErrorKind::Format, path + ": zero feature dims");
  const uint64_t record = 2 + 4ull * L_ * M_;
  const uint64_t expect = kHeaderBytes + count_ * record;
  const uint64_t actual = file_size(file_);
  if (actual != expect)
    fail(ErrorKind::Format, path + ": size " + std::to_string(actual) +
                                " does not match header (" + std::to_string(expect) + ")");
}

FeatureSet FmftReader::read(uint64_t index) {
  if (index >= count_)
    fail(ErrorKind::Data, path_ + ": feature set " + std::to_string(index) +
                              " out of range (count " + std::to_string(count_) + ")");
  const uint64_t record = 2 + 4ull * L_ * M_;
  file_.seekg(std::streamoff(kHeaderBytes + index * record));
  FeatureSet s;
  s.label = read_le<uint16_t>(file_, "label");
  s.values.resize(size_t(L_) * size_t(M_));
  read_bytes(file_, s.values.data(), 4ull * L_ * M_, "features");
  return s;
}

void FmftReader::read_all(std::vector<float>& features, std::vector<uint16_t>& labels) {
  const size_t lm = size_t(L_) * size_t(M_);
  features.resize(size_t(count_) * lm);
  labels.resize(size_t(count_));
  file_.seekg(std::streamoff(kHeaderBytes));
  for (uint64_t i = 0; i < count_; ++i) {
    labels[size_t(i)] = read_le<uint16_t>(file_, "label");
    read_bytes(file_, features.data() + size_t(i) * lm, 4ull * lm, "features");
  }
}

void split_feature_columns(const std::string& in_path, const std::string& out_a,
                           const std::string& out_b, uint32_t split_col) {
  FmftReader in(in_path);
  if (split_col == 0 || split_col >= in.cols())
    fail(ErrorKind::Config, "split column " + std::to_string(split_col) + " outside (0," +
                                std::to_string(in.cols()) + ")");
  const uint32_t L = in.rows(), Ma = split_col, Mb = in.cols() - split_col;
  FmftWriter wa(out_a, in.count(), L, Ma), wb(out_b, in.count(), L, Mb);
  std::vector<float> va(size_t(L) * Ma), vb(size_t(L) * Mb);
  for (uint64_t i = 0; i < in.count(); ++i) {
    FeatureSet s = in.read(i);
    for (uint32_t r = 0; r < L; ++r) {
      std::memcpy(va.data() + size_t(r) * Ma, s.values.data() + size_t(r) * in.cols(),
                  4ull * Ma);
      std::memcpy(vb.data() + size_t(r) * Mb, s.values.data() + size_t(r) * in.cols() + Ma,
                  4ull * Mb);
    }
    wa.append(s.label, va.data());
    wb.append(s.label, vb.data());
  }
  wa.finish();
  wb.finish();
}

}  // namespace ac
