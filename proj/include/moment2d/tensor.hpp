#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2d {

/// Tracks how many tensor values are alive, to report benchmark working sets
/// as a portable element count instead of OS-level RSS.
struct TensorAllocStats {
  static std::atomic<std::int64_t>& live() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& peak() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static void on_alloc(std::int64_t n) {
    const std::int64_t now = live().fetch_add(n) + n;
    std::int64_t p = peak().load();
    while (now > p && !peak().compare_exchange_weak(p, now)) {
    }
  }
  static void on_free(std::int64_t n) { live().fetch_sub(n); }
  static void reset_peak() { peak().store(live().load()); }
};

/// Dense row-major n-d array of doubles. Value semantics: copies are deep, so
/// no two distinct tensors alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape) { reshape_alloc(std::move(shape)); }

  Tensor(std::initializer_list<std::int64_t> shape)
      : Tensor(std::vector<std::int64_t>(shape)) {}

  Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) {
    TensorAllocStats::on_alloc(static_cast<std::int64_t>(data_.size()));
  }
  Tensor(Tensor&& other) noexcept { swap(other); }
  Tensor& operator=(const Tensor& other) {
    if (this != &other) {
      Tensor tmp(other);
      swap(tmp);
    }
    return *this;
  }
  Tensor& operator=(Tensor&& other) noexcept {
    if (this != &other) {
      Tensor tmp(std::move(other));
      swap(tmp);
    }
    return *this;
  }
  ~Tensor() { TensorAllocStats::on_free(static_cast<std::int64_t>(data_.size())); }

  void swap(Tensor& other) noexcept {
    shape_.swap(other.shape_);
    data_.swap(other.data_);
  }

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
  }

  static Tensor from(std::vector<std::int64_t> shape, std::vector<double> values) {
    Tensor t;
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    if (n != static_cast<std::int64_t>(values.size()))
      throw std::invalid_argument("Tensor::from: shape/value count mismatch");
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    TensorAllocStats::on_alloc(static_cast<std::int64_t>(t.data_.size()));
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at2(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double at2(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double& at3(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at3(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Flattens leading axes: views the tensor as [rows, cols] with cols = last extent.
  std::int64_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }
  std::int64_t rows_flat() const { return last_dim() == 0 ? 0 : size() / last_dim(); }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  void reshape_alloc(std::vector<std::int64_t> shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
      if (e < 0) throw std::invalid_argument("Tensor: negative extent");
      n *= e;
    }
    shape_ = std::move(shape);
    data_.assign(static_cast<std::size_t>(n), 0.0);
    TensorAllocStats::on_alloc(n);
  }

  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
}

}  // namespace m2d
