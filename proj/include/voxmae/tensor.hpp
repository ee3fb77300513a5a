#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "voxmae/error.hpp"

namespace voxmae {

using i64 = std::int64_t;

inline i64 numel_of(const std::vector<i64>& shape) {
  i64 n = 1;
  for (i64 d : shape) n *= d;
  return n;
}

inline std::vector<i64> strides_of(const std::vector<i64>& shape) {
  std::vector<i64> s(shape.size());
  i64 acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

inline std::string shape_str(const std::vector<i64>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major double tensor. Storage is shared on copy; any mutable
// access detaches, so handles behave like values.
class Tensor {
 public:
  Tensor() : buf_(std::make_shared<std::vector<double>>()) {}

  explicit Tensor(std::vector<i64> shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(numel_of(shape_)), 0.0)) {}

  Tensor(std::vector<i64> shape, double fill)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(numel_of(shape_)), fill)) {}

  Tensor(std::vector<i64> shape, std::vector<double> data)
      : shape_(std::move(shape)), buf_(std::make_shared<std::vector<double>>(std::move(data))) {
    require(static_cast<i64>(buf_->size()) == numel_of(shape_), ErrorCategory::internal,
            "tensor data size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(std::vector<i64> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<i64> shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }

  const std::vector<i64>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  i64 dim(int i) const {
    if (i < 0) i += ndim();
    return shape_[static_cast<std::size_t>(i)];
  }
  i64 numel() const { return static_cast<i64>(buf_->size()); }
  bool defined() const { return !shape_.empty() || !buf_->empty(); }

  const double* data() const { return buf_->data(); }
  double* data() {
    detach();
    return buf_->data();
  }

  double item() const {
    require(numel() == 1, ErrorCategory::internal, "item() on non-scalar tensor");
    return (*buf_)[0];
  }

  double at(std::initializer_list<i64> idx) const { return (*buf_)[flat(idx)]; }
  void set(std::initializer_list<i64> idx, double v) {
    detach();
    (*buf_)[flat(idx)] = v;
  }

  // Same storage, new shape (element count must match).
  Tensor reshaped(std::vector<i64> shape) const {
    require(numel_of(shape) == numel(), ErrorCategory::internal,
            "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<double>>(*buf_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::size_t flat(std::initializer_list<i64> idx) const {
    auto st = strides_of(shape_);
    std::size_t k = 0;
    std::size_t ax = 0;
    for (i64 i : idx) k += static_cast<std::size_t>(i * st[ax++]);
    return k;
  }

  void detach() {
    if (buf_.use_count() > 1) buf_ = std::make_shared<std::vector<double>>(*buf_);
  }

  std::vector<i64> shape_;
  std::shared_ptr<std::vector<double>> buf_;
};

}  // namespace voxmae
