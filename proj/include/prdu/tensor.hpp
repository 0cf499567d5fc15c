#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace prdu {

// Dense row-major tensor of 64-bit reals, rank 0 (scalar) through 2.
// Copies are shallow: they share the underlying buffer. Recorded ops never
// mutate their inputs, so sharing is safe; in-place writes go through
// data() and are reserved for owners (initializers, the optimizer,
// finite differencing).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(checked_size(shape_), 0.0)) {}

  Tensor(std::vector<int> shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (static_cast<std::size_t>(checked_size(shape_)) != data_->size())
      throw std::invalid_argument("tensor: shape does not match value count");
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  int size() const { return data_ ? static_cast<int>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }
  bool is_scalar() const { return defined() && shape_.empty(); }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double value() const {
    if (!is_scalar()) throw std::invalid_argument("tensor: value() on non-scalar");
    return (*data_)[0];
  }

  double at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const {
    return (*data_)[static_cast<std::size_t>(i) * extent(1) + j];
  }

  // Independent copy of the buffer (snapshots, perturbation probes).
  Tensor clone() const {
    Tensor out;
    out.shape_ = shape_;
    out.data_ = std::make_shared<std::vector<double>>(*data_);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  // Tape linkage; node < 0 means constant (not recorded).
  int node() const { return node_; }
  std::uint64_t tape_generation() const { return tape_gen_; }
  void bind_node(int node, std::uint64_t gen) {
    node_ = node;
    tape_gen_ = gen;
  }
  void unbind() {
    node_ = -1;
    tape_gen_ = 0;
  }
  // Same values, no tape linkage; blocks gradient flow.
  Tensor detached() const {
    Tensor out = *this;
    out.unbind();
    return out;
  }

 private:
  static int checked_size(const std::vector<int>& shape) {
    long long n = 1;
    for (int e : shape) {
      if (e <= 0) throw std::invalid_argument("tensor: extents must be positive");
      n *= e;
    }
    if (n > (1LL << 31)) throw std::invalid_argument("tensor: too large");
    return static_cast<int>(n);
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  int node_ = -1;
  std::uint64_t tape_gen_ = 0;
};

// Named handle to a trainable tensor owned by a model struct.
struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};

}  // namespace prdu
