#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dddr/error.hpp"

namespace dddr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. `Tensor` (float) is the storage type used across the
/// project; the double instantiation exists for gradient verification.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }
  static BasicTensor row(std::vector<T> v) {
    const std::size_t n = v.size();
    return BasicTensor(Shape{1, n}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Leading dimension; a rank-1 tensor is one row.
  std::size_t rows() const noexcept { return rank() >= 2 ? shape_[0] : (empty() ? 0 : 1); }
  std::size_t cols() const noexcept { return rows() ? size() / rows() : 0; }

  std::span<const T> values() const noexcept { return data_; }
  std::span<T> values() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const T* data() const noexcept { return data_.data(); }
  T* data() noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<const T> row_span(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<T> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("tensor: zero-length dimension in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <class U, class T>
BasicTensor<U> tensor_cast(const BasicTensor<T>& t) {
  if (t.empty()) return {};
  std::vector<U> out(t.values().begin(), t.values().end());
  return BasicTensor<U>(t.shape(), std::move(out));
}

/// Named parameters with a deterministic (lexicographic) ordering.
template <class T>
class BasicParamSet {
 public:
  using Map = std::map<std::string, BasicTensor<T>>;

  void set(const std::string& name, BasicTensor<T> t) { map_[name] = std::move(t); }
  bool contains(const std::string& name) const { return map_.count(name) != 0; }
  const BasicTensor<T>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw Error(ErrorKind::Data, "param set: no parameter named '" + name + "'");
    return it->second;
  }
  BasicTensor<T>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw Error(ErrorKind::Data, "param set: no parameter named '" + name + "'");
    return it->second;
  }
  void erase(const std::string& name) { map_.erase(name); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(map_.size());
    for (const auto& [k, _] : map_) out.push_back(k);
    return out;
  }
  std::size_t size() const noexcept { return map_.size(); }
  bool empty() const noexcept { return map_.empty(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : map_) n += t.size();
    return n;
  }

  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }
  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }
  const Map& map() const noexcept { return map_; }

  /// Copy of the entries whose names start with `prefix`.
  BasicParamSet subset(const std::string& prefix) const {
    BasicParamSet out;
    for (const auto& [k, t] : map_)
      if (k.rfind(prefix, 0) == 0) out.set(k, t);
    return out;
  }
  void merge(const BasicParamSet& other) {
    for (const auto& [k, t] : other) map_[k] = t;
  }

  friend bool operator==(const BasicParamSet& a, const BasicParamSet& b) { return a.map_ == b.map_; }

 private:
  Map map_;
};

using ParamSet = BasicParamSet<float>;
using ParamSetD = BasicParamSet<double>;

template <class U, class T>
BasicParamSet<U> params_cast(const BasicParamSet<T>& p) {
  BasicParamSet<U> out;
  for (const auto& [k, t] : p) out.set(k, tensor_cast<U>(t));
  return out;
}

/// Throws ShapeError naming the symmetric difference / mismatched shapes.
template <class T, class U>
void require_same_layout(const BasicParamSet<T>& a, const BasicParamSet<U>& b, const std::string& context) {
  std::vector<std::string> only_a, only_b, shape_diff;
  for (const auto& [k, t] : a) {
    if (!b.contains(k)) only_a.push_back(k);
    else if (b.at(k).shape() != t.shape()) shape_diff.push_back(k);
  }
  for (const auto& [k, _] : b)
    if (!a.contains(k)) only_b.push_back(k);
  if (only_a.empty() && only_b.empty() && shape_diff.empty()) return;
  std::ostringstream os;
  os << context << ": parameter sets disagree;";
  auto list = [&](const char* label, const std::vector<std::string>& v) {
    if (v.empty()) return;
    os << ' ' << label << " [";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    os << ']';
  };
  list("only in first:", only_a);
  list("only in second:", only_b);
  list("shape mismatch:", shape_diff);
  throw ShapeError(os.str());
}

/// 64-bit FNV-1a over names, shapes and raw bytes. Used for freeze checks.
std::uint64_t checksum(const ParamSet& p);
std::uint64_t checksum(const Tensor& t);
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace dddr
