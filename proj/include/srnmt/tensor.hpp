#pragma once

// Dense tensors (rank 1..3) with a reverse-mode autodiff tape.
//
// A Tensor is a cheap shared handle to its storage. Ops that receive a
// non-null Tape record a backward closure; replaying the tape in reverse
// record order accumulates total derivatives into every requires_grad
// tensor reachable from the loss. A null tape means pure inference: no
// recording, no grads, outputs are plain values.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace srnmt {

// ----------------------------------------------------------------------
// Error taxonomy
// ----------------------------------------------------------------------

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VocabError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------------------
// Shape
// ----------------------------------------------------------------------

class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<int64_t> extents) {
    if (extents.size() < 1 || extents.size() > 3)
      throw ShapeError("tensor rank must be 1..3, got rank " +
                       std::to_string(extents.size()));
    rank_ = static_cast<int>(extents.size());
    int i = 0;
    for (int64_t e : extents) {
      if (e <= 0)
        throw ShapeError("shape extents must be positive, got " +
                         std::to_string(e));
      ext_[i++] = e;
    }
  }

  static Shape vec(int64_t n) { return Shape{n}; }
  static Shape mat(int64_t r, int64_t c) { return Shape{r, c}; }

  int rank() const { return rank_; }
  int64_t operator[](int i) const { return ext_[static_cast<size_t>(i)]; }

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= ext_[static_cast<size_t>(i)];
    return n;
  }

  // Row/column view: everything but the last axis is "rows".
  int64_t cols() const { return ext_[static_cast<size_t>(rank_ - 1)]; }
  int64_t rows() const { return numel() / cols(); }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (ext_[static_cast<size_t>(i)] != o.ext_[static_cast<size_t>(i)])
        return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "[";
    for (int i = 0; i < rank_; ++i)
      os << (i ? "x" : "") << ext_[static_cast<size_t>(i)];
    os << "]";
    return os.str();
  }

 private:
  std::array<int64_t, 3> ext_{0, 0, 0};
  int rank_ = 0;
};

// ----------------------------------------------------------------------
// Tensor
// ----------------------------------------------------------------------

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  bool on_tape = false;
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.node_ = std::make_shared<TensorData<T>>();
    t.node_->shape = s;
    t.node_->values.assign(static_cast<size_t>(s.numel()), T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(s);
    for (auto& x : t.node_->values) x = v;
    return t;
  }

  static Tensor from(Shape s, std::vector<T> vals) {
    if (static_cast<int64_t>(vals.size()) != s.numel())
      throw ShapeError("value count " + std::to_string(vals.size()) +
                       " does not match shape " + s.str());
    Tensor t;
    t.node_ = std::make_shared<TensorData<T>>();
    t.node_->shape = s;
    t.node_->values = std::move(vals);
    return t;
  }

  static Tensor scalar(T v) { return from(Shape{1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->shape.numel(); }

  const std::vector<T>& values() const { return node_->values; }
  std::vector<T>& values() { return node_->values; }

  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool on_tape() const { return node_->on_tape; }

  T at(int64_t i) const { return node_->values[static_cast<size_t>(i)]; }
  T at(int64_t i, int64_t j) const {
    return node_->values[static_cast<size_t>(i * shape().cols() + j)];
  }
  T at(int64_t b, int64_t i, int64_t j) const {
    const Shape& s = shape();
    return node_->values[static_cast<size_t>((b * s[1] + i) * s[2] + j)];
  }

  std::shared_ptr<TensorData<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorData<T>> node_;
};

// Zero-fill a grad buffer on first touch; backward rules accumulate into it.
template <typename T>
inline std::vector<T>& grad_buf(TensorData<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.values.size(), T(0));
  return n.grad;
}

// ----------------------------------------------------------------------
// Tape
// ----------------------------------------------------------------------

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  // Marks the output as a tape resident and stores the backward rule.
  void record(std::vector<Tensor<T>> touched, BackwardFn fn) {
    for (auto& t : touched) nodes_.push_back(t.node());
    records_.push_back(std::move(fn));
  }

  size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays backward rules in reverse
  // record order, so every node's grad is complete before its producer
  // rule consumes it.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          (loss.defined() ? loss.shape().str() : "<null>"));
    if (!loss.on_tape())
      throw ContractError("backward: loss tensor is not on this tape");
    grad_buf(*loss.node())[0] = T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

  // Drops all records and resets grads of every tensor that was recorded.
  void clear() {
    for (auto& n : nodes_) {
      n->grad.clear();
      n->on_tape = false;
    }
    nodes_.clear();
    records_.clear();
  }

 private:
  std::vector<BackwardFn> records_;
  std::vector<std::shared_ptr<TensorData<T>>> nodes_;
};

// True when the op must be recorded: a tape is present and some input
// carries gradient.
template <typename T, typename... Ts>
inline bool needs_tape(Tape<T>* tape, const Ts&... inputs) {
  if (!tape) return false;
  return (... || inputs.requires_grad());
}

template <typename T>
inline void mark_output(Tape<T>* /*tape*/, Tensor<T>& out) {
  out.set_requires_grad(true);
  out.node()->on_tape = true;
}

// ----------------------------------------------------------------------
// Deterministic RNG helpers
// ----------------------------------------------------------------------

using Rng = std::mt19937_64;

// Uniform in [0,1) from the top 53 bits; identical across platforms,
// unlike std::uniform_real_distribution.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_range(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Stream-splitting: derive an independent seed for sub-tasks (per-step
// dropout, per-epoch shuffles) from a master seed.
inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
  uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ----------------------------------------------------------------------
// Boolean mask over the last axis of a sequence tensor.
// keep[i] == true marks a real (non-PAD) position.
// ----------------------------------------------------------------------

struct Mask {
  Shape shape;                // rank 1 [T] or rank 2 [B,T]
  std::vector<uint8_t> keep;

  static Mask all(Shape s) {
    Mask m;
    m.shape = s;
    m.keep.assign(static_cast<size_t>(s.numel()), 1);
    return m;
  }

  bool at(int64_t i) const { return keep[static_cast<size_t>(i)] != 0; }
  bool at(int64_t b, int64_t t) const {
    return keep[static_cast<size_t>(b * shape[1] + t)] != 0;
  }
  int64_t count() const {
    int64_t n = 0;
    for (uint8_t k : keep) n += k ? 1 : 0;
    return n;
  }
};

}  // namespace srnmt
