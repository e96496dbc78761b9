#include "wflow/tensor.h"

#include <sstream>
#include <utility>

namespace wflow {

int64_t NumElements(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  WFLOW_CHECK(!shape_.empty(), "tensor shape must have at least one axis");
  for (int64_t d : shape_) {
    WFLOW_CHECK(d > 0, "tensor extents must be positive, got " + ShapeToString(shape_));
  }
  WFLOW_CHECK(NumElements(shape_) == static_cast<int64_t>(data.size()),
              "data length " + std::to_string(data.size()) + " does not match shape " +
                  ShapeToString(shape_));
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::Zeros(Shape shape) { return Full(std::move(shape), 0.0); }

Tensor Tensor::Full(Shape shape, double value) {
  const int64_t n = NumElements(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::Scalar(double value) { return Tensor({1}, {value}); }

int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  WFLOW_CHECK(axis >= 0 && axis < rank(), "axis out of range");
  return shape_[axis];
}

std::span<const double> Tensor::data() const& {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  WFLOW_CHECK(numel() == 1, "item() needs a single-element tensor, got " + ShapeToString(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

const Tensor& Gradients::of(const Tensor& leaf) const {
  auto it = grads_.find(leaf.tape_id());
  WFLOW_CHECK(it != grads_.end(), "no gradient recorded for this tensor");
  return it->second;
}

Tensor Tape::leaf(const Tensor& value) {
  WFLOW_CHECK(value.defined(), "cannot record an undefined tensor");
  Node node;
  node.shape = value.shape();
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  Tensor out = value.detach();
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size()) - 1;
  return out;
}

Tensor Tape::record(Tensor value, const std::vector<Tensor>& inputs, BackwardFn backward) {
  Node node;
  node.shape = value.shape();
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    node.inputs.push_back(in.tape_ == this ? in.node_ : -1);
  }
  nodes_.push_back(std::move(node));
  Tensor out = value.detach();
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size()) - 1;
  return out;
}

Gradients Tape::backward(const Tensor& root) {
  WFLOW_CHECK(root.tape_ == this && root.node_ >= 0, "backward root is not recorded on this tape");
  WFLOW_CHECK(root.numel() == 1, "backward root must be scalar, got shape " +
                                     ShapeToString(root.shape()));
  std::vector<std::vector<double>> acc(nodes_.size());
  acc[root.node_].assign(1, 1.0);

  std::vector<std::vector<double>*> grad_in;
  for (int id = root.node_; id >= 0; --id) {
    if (acc[id].empty()) continue;
    const Node& node = nodes_[id];
    if (node.is_leaf) continue;
    grad_in.assign(node.inputs.size(), nullptr);
    for (size_t k = 0; k < node.inputs.size(); ++k) {
      const int in = node.inputs[k];
      if (in < 0) continue;
      if (acc[in].empty()) acc[in].assign(NumElements(nodes_[in].shape), 0.0);
      grad_in[k] = &acc[in];
    }
    node.backward(acc[id], grad_in);
    std::vector<double>().swap(acc[id]);
  }

  Gradients out;
  for (int id = 0; id < static_cast<int>(nodes_.size()); ++id) {
    const Node& node = nodes_[id];
    if (!node.is_leaf) continue;
    if (acc[id].empty()) {
      out.grads_.emplace(id, Tensor::Zeros(node.shape));
    } else {
      out.grads_.emplace(id, Tensor(node.shape, std::move(acc[id])));
    }
  }
  return out;
}

Tensor MaybeRecord(Tensor value, const std::vector<Tensor>& inputs, Tape::BackwardFn backward) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (!t.recorded()) continue;
    if (tape == nullptr) {
      tape = t.tape();
    } else {
      WFLOW_CHECK(tape == t.tape(), "inputs are recorded on different tapes");
    }
  }
  if (tape == nullptr) return value;
  return tape->record(std::move(value), inputs, std::move(backward));
}

}  // namespace wflow
