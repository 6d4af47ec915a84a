#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ac/errors.hpp"

namespace ac {

// Dense row-major float32 tensor. The autodiff tape pairs each value tensor
// with a same-shape gradient buffer; outside the tape this is plain storage.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), 0.0f);
  }

  Tensor(std::vector<int64_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (int64_t(data_.size()) != numel_of(shape_))
      fail(ErrorKind::Dimension, "tensor data length " + std::to_string(data_.size()) +
                                     " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  static Tensor full(std::vector<int64_t> shape, float v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }
  int64_t numel() const { return int64_t(data_.size()); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](int64_t i) { return data_[size_t(i)]; }
  float operator[](int64_t i) const { return data_[size_t(i)]; }

  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Reinterprets the buffer under a new shape with identical element count.
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (numel_of(shape) != numel())
      fail(ErrorKind::Dimension,
           "reshape from " + shape_string(shape_) + " to " + shape_string(shape) + " changes element count");
    return Tensor(std::move(shape), data_);
  }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) fail(ErrorKind::Dimension, "negative dimension in shape " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  static std::string shape_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  std::string shape_string() const { return shape_string(shape_); }

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

}  // namespace ac
