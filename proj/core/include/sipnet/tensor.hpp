#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sipnet/errors.hpp"
#include "sipnet/rng.hpp"

namespace sipnet {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

// Dense row-major tensor. The element buffer is shared between copies and
// treated as immutable; mutable_data() copies when the buffer is shared.
// Scalars are represented as shape [1].
template <typename S>
class Tensor {
 public:
  using scalar_type = S;

  Tensor() : shape_{}, data_(std::make_shared<std::vector<S>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(shape_numel(shape_), S(0))) {}

  Tensor(Shape shape, std::vector<S> values) : shape_(std::move(shape)) {
    const auto n = shape_numel(shape_);
    if (static_cast<std::int64_t>(values.size()) != n) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<S>>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  static Tensor eye(std::int64_t n) {
    Tensor t({n, n});
    for (std::int64_t i = 0; i < n; ++i) (*t.data_)[i * n + i] = S(1);
    return t;
  }

  static Tensor random_normal(Shape shape, RngStream& rng, double std_dev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : *t.data_) v = static_cast<S>(rng.normal() * std_dev);
    return t;
  }

  static Tensor random_uniform(Shape shape, RngStream& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : *t.data_) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor truncated_normal(Shape shape, RngStream& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (auto& v : *t.data_) v = static_cast<S>(rng.truncated_normal(std_dev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }
  bool empty() const { return data_->empty(); }
  bool is_scalar() const { return size() == 1; }

  const S* data() const { return data_->data(); }
  const std::vector<S>& vec() const { return *data_; }

  // Unique-owner mutation; copies the buffer first if it is shared.
  S* mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<S>>(*data_);
    return data_->data();
  }

  S item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  S at(std::initializer_list<std::int64_t> idx) const {
    return (*data_)[static_cast<std::size_t>(offset(idx))];
  }

  std::int64_t offset(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
      throw ShapeError("index rank mismatch for shape " + shape_str(shape_));
    }
    std::int64_t off = 0;
    int axis = 0;
    for (auto i : idx) {
      off = off * shape_[static_cast<std::size_t>(axis)] + i;
      ++axis;
    }
    return off;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Same buffer, new shape; element counts must agree.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (const auto v : *data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void check_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError("non-finite values in " + what);
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_->size());
    for (std::size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<T>((*data_)[i]);
    return Tensor<T>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && *data_ == *other.data_;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Mean-pool over contiguous windows of `factor` frames along the time axis of
// a rank-3 [layers x time x dim] tensor. A trailing partial window is averaged
// over its actual length.
template <typename S>
Tensor<S> downsample_time(const Tensor<S>& x, std::int64_t factor) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  if (x.rank() != 3) throw ShapeError("downsample_time expects rank-3 input, got " + shape_str(x.shape()));
  const std::int64_t layers = x.dim(0), time = x.dim(1), dim = x.dim(2);
  const std::int64_t out_time = (time + factor - 1) / factor;
  Tensor<S> out({layers, out_time, dim});
  S* o = out.mutable_data();
  const S* in = x.data();
  for (std::int64_t l = 0; l < layers; ++l) {
    for (std::int64_t j = 0; j < out_time; ++j) {
      const std::int64_t t0 = j * factor;
      const std::int64_t t1 = std::min(time, t0 + factor);
      const double inv = 1.0 / static_cast<double>(t1 - t0);
      for (std::int64_t k = 0; k < dim; ++k) {
        double acc = 0.0;
        for (std::int64_t t = t0; t < t1; ++t) {
          acc += static_cast<double>(in[(l * time + t) * dim + k]);
        }
        o[(l * out_time + j) * dim + k] = static_cast<S>(acc * inv);
      }
    }
  }
  return out;
}

// Rank-3 [L x t x d] -> rank-2 [t x d] slice of one layer.
template <typename S>
Tensor<S> layer_slice(const Tensor<S>& x, std::int64_t layer) {
  if (x.rank() != 3) throw ShapeError("layer_slice expects rank-3 input");
  const std::int64_t time = x.dim(1), dim = x.dim(2);
  std::vector<S> out(static_cast<std::size_t>(time * dim));
  const S* in = x.data() + layer * time * dim;
  std::copy(in, in + time * dim, out.begin());
  return Tensor<S>({time, dim}, std::move(out));
}

}  // namespace sipnet
