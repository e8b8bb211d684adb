#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgan {

/// Raised on incompatible shapes or parameter sets.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a value becomes NaN/Inf or an optimizer diverges.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// First-order dual number. Running the reverse pass with duals gives a
/// forward-over-reverse product: the tangent of a gradient.
template <class T>
struct Dual {
  T v{};
  T d{};

  constexpr Dual() = default;
  constexpr Dual(T value) : v(value) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(T value, T tangent) : v(value), d(tangent) {}

  Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
  Dual& operator-=(const Dual& o) { v -= o.v; d -= o.d; return *this; }
  Dual& operator*=(const Dual& o) { d = d * o.v + v * o.d; v *= o.v; return *this; }
  Dual& operator/=(const Dual& o) {
    d = (d * o.v - v * o.d) / (o.v * o.v);
    v /= o.v;
    return *this;
  }
  friend Dual operator+(Dual a, const Dual& b) { return a += b; }
  friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
  friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
  friend Dual operator/(Dual a, const Dual& b) { return a /= b; }
  friend Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
  friend bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
  friend bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
};

template <class T> Dual<T> exp(const Dual<T>& a) { T e = std::exp(a.v); return {e, e * a.d}; }
template <class T> Dual<T> log(const Dual<T>& a) { return {std::log(a.v), a.d / a.v}; }
template <class T> Dual<T> sqrt(const Dual<T>& a) {
  T s = std::sqrt(a.v);
  return {s, a.d / (T(2) * s)};
}
template <class T> Dual<T> tanh(const Dual<T>& a) {
  T t = std::tanh(a.v);
  return {t, (T(1) - t * t) * a.d};
}

using std::exp;
using std::log;
using std::sqrt;
using std::tanh;

template <class T> inline T value_of(const T& x) { return x; }
template <class T> inline T value_of(const Dual<T>& x) { return x.v; }
template <class T> inline bool is_finite(const T& x) { return std::isfinite(x); }
template <class T> inline bool is_finite(const Dual<T>& x) {
  return std::isfinite(x.v) && std::isfinite(x.d);
}

/// Dense row-major n-dimensional array.
template <class T = float>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Same data viewed under a new shape with equal element count.
  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data_);
  }

  /// Rows [begin, end) along the leading dimension.
  BasicTensor slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || end > shape_[0] || begin > end) {
      throw ShapeError("slice out of range on " + shape_str(shape_));
    }
    const std::size_t row = data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    return BasicTensor(s, std::vector<T>(data_.begin() + begin * row,
                                         data_.begin() + end * row));
  }

  bool all_finite() const {
    for (const auto& x : data_) {
      if (!is_finite(x)) return false;
    }
    return true;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Concatenate along the leading dimension.
template <class T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts.front().shape();
  std::size_t rows = 0;
  std::vector<T> data;
  for (const auto& p : parts) {
    if (p.rank() != s.size() ||
        !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("concat shape mismatch " + shape_str(p.shape()) +
                       " vs " + shape_str(s));
    }
    rows += p.dim(0);
    data.insert(data.end(), p.storage().begin(), p.storage().end());
  }
  s[0] = rows;
  return BasicTensor<T>(s, std::move(data));
}

/// Named tensors. Models, updates and gradients are all ParamSets; names are
/// kept sorted so iteration order is stable.
template <class T = float>
class BasicParamSet {
 public:
  using map_type = std::map<std::string, BasicTensor<T>>;

  BasicParamSet() = default;

  void set(const std::string& name, BasicTensor<T> t) { tensors_[name] = std::move(t); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  BasicTensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing parameter '" + name + "'");
    return it->second;
  }
  const BasicTensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : tensors_) out.push_back(k);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors_) n += v.size();
    return n;
  }

  /// Subset whose names start with `prefix`.
  BasicParamSet filter_prefix(const std::string& prefix) const {
    BasicParamSet out;
    for (const auto& [k, v] : tensors_) {
      if (k.rfind(prefix, 0) == 0) out.set(k, v);
    }
    return out;
  }

  BasicParamSet zeros_like() const {
    BasicParamSet out;
    for (const auto& [k, v] : tensors_) out.set(k, BasicTensor<T>(v.shape()));
    return out;
  }

  friend bool operator==(const BasicParamSet& a, const BasicParamSet& b) {
    return a.tensors_ == b.tensors_;
  }

 private:
  map_type tensors_;
};

using ParamSet = BasicParamSet<float>;

/// Throws unless `a` and `b` have identical names and shapes.
template <class A, class B>
void require_aligned(const BasicParamSet<A>& a, const BasicParamSet<B>& b,
                     const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": parameter count " +
                     std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) {
      throw ShapeError(std::string(what) + ": name '" + ia->first + "' vs '" +
                       ib->first + "'");
    }
    if (ia->second.shape() != ib->second.shape()) {
      throw ShapeError(std::string(what) + ": shape of '" + ia->first + "' " +
                       shape_str(ia->second.shape()) + " vs " +
                       shape_str(ib->second.shape()));
    }
  }
}

/// a + scale * b over aligned sets.
inline ParamSet axpy(const ParamSet& a, const ParamSet& b, float scale = 1.0f) {
  require_aligned(a, b, "axpy");
  ParamSet out = a;
  for (auto& [name, t] : out) {
    const auto& src = b.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += scale * src[i];
  }
  return out;
}

inline ParamSet difference(const ParamSet& after, const ParamSet& before) {
  return axpy(after, before, -1.0f);
}

inline double squared_norm(const ParamSet& p) {
  double s = 0.0;
  for (const auto& [k, t] : p) {
    for (float x : t.storage()) s += double(x) * x;
  }
  return s;
}

/// Lift a float ParamSet into another scalar type.
template <class T>
BasicParamSet<T> cast_params(const ParamSet& p) {
  BasicParamSet<T> out;
  for (const auto& [k, t] : p) {
    std::vector<T> d(t.storage().begin(), t.storage().end());
    out.set(k, BasicTensor<T>(t.shape(), std::move(d)));
  }
  return out;
}

template <class T>
BasicTensor<T> cast_tensor(const Tensor& t) {
  std::vector<T> d(t.storage().begin(), t.storage().end());
  return BasicTensor<T>(t.shape(), std::move(d));
}

}  // namespace mgan
