// Dense 64-bit tensors and the reverse-mode tape that records operations on
// them. Tensors are immutable values: every operation produces a new tensor,
// and copies share storage. A tensor becomes differentiable once it is
// registered on a Tape (see Tape::leaf); operations whose inputs live on a
// tape record themselves on that same tape.

#ifndef WFLOW_TENSOR_H_
#define WFLOW_TENSOR_H_

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define WFLOW_CHECK(cond, msg)                     \
  do {                                             \
    if (!(cond)) throw ::wflow::Error(msg);        \
  } while (false)

using Shape = std::vector<int64_t>;

int64_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor Zeros(Shape shape);
  static Tensor Full(Shape shape, double value);
  static Tensor Scalar(double value);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const;
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  // View of the values; not available on temporaries, whose storage may be
  // released before the view is used.
  std::span<const double> data() const&;
  std::span<const double> data() const&& = delete;
  double at(int64_t flat_index) const { return (*data_)[flat_index]; }
  // Value of a single-element tensor.
  double item() const;
  std::vector<double> to_vector() const { return data_ ? *data_ : std::vector<double>{}; }

  bool recorded() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int tape_id() const { return node_; }

  // Same values, no tape participation.
  Tensor detach() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Gradient of a backward root with respect to every leaf of the tape.
class Gradients {
 public:
  const Tensor& of(const Tensor& leaf) const;
  const std::map<int, Tensor>& by_id() const { return grads_; }

 private:
  friend class Tape;
  std::map<int, Tensor> grads_;
};

// Single-owner record of a computation. Not thread-safe; distinct tapes may
// be used concurrently. Tensors recorded here must not outlive the tape.
class Tape {
 public:
  // Accumulates d(root)/d(inputs) given d(root)/d(output). grad_in[k] is null
  // when input k does not participate in differentiation.
  using BackwardFn = std::function<void(std::span<const double> grad_out,
                                        std::span<std::vector<double>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(const Tensor& value);

  // Records `value` as the output of an operation over `inputs`. Inputs that
  // are not on this tape are treated as constants.
  Tensor record(Tensor value, const std::vector<Tensor>& inputs, BackwardFn backward);

  // Reverse sweep from a scalar root. Each node is visited at most once and the
  // gradient accumulators are released before returning, so repeated calls
  // give identical results.
  Gradients backward(const Tensor& root);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> inputs;
    BackwardFn backward;
    Shape shape;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

// Records `value` when any input is on a tape, otherwise returns it as is.
Tensor MaybeRecord(Tensor value, const std::vector<Tensor>& inputs, Tape::BackwardFn backward);

}  // namespace wflow

#endif  // WFLOW_TENSOR_H_
