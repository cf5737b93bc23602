#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hiercode/error.hpp"

namespace hiercode {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of doubles. A shape of {} denotes a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() : data(1, 0.0) {}
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape))
      fail<ShapeError>("tensor data length ", data.size(), " does not match shape ", shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> d;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) fail<ShapeError>("ragged matrix literal");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(d));
  }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    std::vector<double> d;
    const std::size_t cols = rows.empty() ? 0 : rows.front().size();
    for (const auto& r : rows) {
      if (r.size() != cols) fail<ShapeError>("ragged row list");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(d));
  }
  template <typename Rng>
  static Tensor uniform(Shape s, double lo, double hi, Rng& rng) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.data) x = dist(rng);
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool is_scalar() const { return data.size() == 1; }
  double item() const {
    if (data.size() != 1) fail<ShapeError>("item() on tensor of shape ", shape_str(shape));
    return data[0];
  }

  // Row view for tensors whose leading axis indexes records.
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t row_size() const { return shape.empty() ? 1 : data.size() / std::max<std::size_t>(shape[0], 1); }
  std::span<double> row(std::size_t i) { return {data.data() + i * row_size(), row_size()}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * row_size(), row_size()}; }

  double& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  bool all_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }
};

inline std::ostream& operator<<(std::ostream& os, const Tensor& t) {
  os << "Tensor" << shape_str(t.shape) << "{";
  for (std::size_t i = 0; i < t.data.size() && i < 16; ++i) os << (i ? ", " : "") << t.data[i];
  if (t.data.size() > 16) os << ", ...";
  return os << "}";
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace hiercode
