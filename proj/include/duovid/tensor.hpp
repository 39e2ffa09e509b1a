#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "duovid/error.hpp"

namespace duovid {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Owns its storage; copies are deep.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_size(shape_), ErrorKind::shape_mismatch,
            "tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) flat = flat * shape_[axis++] + i;
    return flat;
  }

  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  Tensor reshaped(Shape shape) const {
    require(shape_size(shape) == size(), ErrorKind::shape_mismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::shape_mismatch, "max_abs_diff " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T best{};
  for (std::size_t i = 0; i < a.size(); ++i) best = std::max(best, static_cast<T>(std::abs(a[i] - b[i])));
  return best;
}

template <class T>
T mean(const Tensor<T>& t) {
  long double acc = 0;
  for (T v : t.data()) acc += v;
  return t.empty() ? T{} : static_cast<T>(acc / static_cast<long double>(t.size()));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

// Slice [begin, begin + count) along axis 0.
template <class T>
Tensor<T> slice_front(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  require(t.rank() >= 1 && begin + count <= t.dim(0), ErrorKind::invalid_argument, "slice_front out of range");
  Shape shape = t.shape();
  shape[0] = count;
  const std::size_t stride = t.size() / std::max<std::size_t>(t.dim(0), 1);
  std::vector<T> out(t.storage().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                     t.storage().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  return Tensor<T>(std::move(shape), std::move(out));
}

// Gather rows along axis 0.
template <class T>
Tensor<T> gather_front(const Tensor<T>& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  shape[0] = rows.size();
  const std::size_t stride = t.size() / std::max<std::size_t>(t.dim(0), 1);
  std::vector<T> out;
  out.reserve(rows.size() * stride);
  for (std::size_t r : rows) {
    require(r < t.dim(0), ErrorKind::invalid_argument, "gather index out of range");
    auto first = t.storage().begin() + static_cast<std::ptrdiff_t>(r * stride);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor<T>(std::move(shape), std::move(out));
}

}  // namespace duovid
