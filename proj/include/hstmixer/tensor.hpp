#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hstmixer {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// ----------------------------------------------------------------------------
// Error taxonomy. ShapeError/ConfigError map to CLI exit 1, DataError to 2,
// NumericError to 3.
// ----------------------------------------------------------------------------

class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::vector<Index> row_major_strides(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

namespace detail {

template <typename Scalar>
struct TensorStorage {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};

}  // namespace detail

// ----------------------------------------------------------------------------
// Tensor<Scalar>: dense row-major multi-axis array. Handle semantics: copies
// share storage; use clone() for a deep copy. Scalar is float for training
// and double for finite-difference gradient checks.
// ----------------------------------------------------------------------------

template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.s_ = std::make_shared<detail::TensorStorage<Scalar>>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(static_cast<std::size_t>(shape_numel(t.s_->shape)),
                      Scalar(0));
    return t;
  }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.s_->data) x = v;
    return t;
  }

  static Tensor scalar(Scalar v) { return full({}, v); }

  static Tensor from_vector(Shape shape, std::vector<Scalar> values) {
    if (static_cast<Index>(values.size()) != shape_numel(shape))
      throw ShapeError("from_vector: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    Tensor t;
    t.s_ = std::make_shared<detail::TensorStorage<Scalar>>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    return t;
  }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.s_->data) x = static_cast<Scalar>(dist(rng));
    return t;
  }

  template <typename Rng>
  static Tensor randu(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t = zeros(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.s_->data) x = static_cast<Scalar>(dist(rng));
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  Index rank() const { return static_cast<Index>(s_->shape.size()); }
  Index size() const { return static_cast<Index>(s_->data.size()); }
  Index dim(Index axis) const { return s_->shape.at(axis); }

  Scalar* data() { return s_->data.data(); }
  const Scalar* data() const { return s_->data.data(); }
  std::vector<Scalar>& vec() { return s_->data; }
  const std::vector<Scalar>& vec() const { return s_->data; }

  Scalar value() const {
    if (size() != 1)
      throw ShapeError("value(): tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    return s_->data[0];
  }

  Scalar at(std::initializer_list<Index> idx) const {
    return s_->data[offset_of(idx)];
  }
  Scalar& at(std::initializer_list<Index> idx) {
    return s_->data[offset_of(idx)];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    s_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  Scalar* grad_data() const { return s_->grad.data(); }
  const std::vector<Scalar>& grad_vec() const { return s_->grad; }

  // Allocates (zero-filled) on first use; backward accumulates into it.
  std::vector<Scalar>& ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), Scalar(0));
    return s_->grad;
  }
  void zero_grad() const {
    if (!s_->grad.empty()) s_->grad.assign(s_->data.size(), Scalar(0));
  }
  void clear_grad() const { s_->grad.clear(); }

  void accumulate_grad(const Scalar* g) const {
    auto& gr = ensure_grad();
    for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += g[i];
  }

  Tensor clone() const {
    Tensor t = zeros(s_->shape);
    t.s_->data = s_->data;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  std::size_t offset_of(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != rank())
      throw ShapeError("at(): index rank mismatch for shape " +
                       shape_str(shape()));
    auto st = row_major_strides(s_->shape);
    std::size_t off = 0;
    std::size_t k = 0;
    for (Index i : idx) off += static_cast<std::size_t>(i * st[k++]);
    return off;
  }

  std::shared_ptr<detail::TensorStorage<Scalar>> s_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> v(a.vec().begin(), a.vec().end());
  Tensor<To> t = Tensor<To>::from_vector(a.shape(), std::move(v));
  if (a.requires_grad()) t.set_requires_grad(true);
  return t;
}

// ----------------------------------------------------------------------------
// Tape<Scalar>: reverse-mode record of operations. Construction pushes the
// tape as the thread's active tape; destruction pops it. backward() replays
// the records in exact reverse order, so gradient accumulation order is
// fixed and runs are bitwise reproducible. One backward per tape.
// ----------------------------------------------------------------------------

template <typename Scalar>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }

  void backward(const Tensor<Scalar>& root) {
    if (root.size() != 1)
      throw NumericError("backward: root has shape " +
                         shape_str(root.shape()) + ", expected a scalar");
    if (!root.requires_grad())
      throw NumericError("backward: root is not connected to the tape");
    root.ensure_grad()[0] = Scalar(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> entries_;
  Tape* prev_ = nullptr;
  inline static thread_local Tape* active_ = nullptr;
};

}  // namespace hstmixer
