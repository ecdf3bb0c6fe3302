#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssp::autograd {

using Shape = std::vector<std::size_t>;
using NodeId = int;
inline constexpr NodeId kNoNode = -1;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Thrown when an operation receives inputs whose shapes it cannot combine.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class Tape;

/// Dense float32 array. The element buffer is shared and never written after
/// construction, so copies are cheap and safe to hand across threads.
///
/// A tensor produced on a tape carries the tape pointer and its node id; a
/// tensor without a tape is a constant for differentiation purposes.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor scalar(float value);

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    bool empty() const { return numel() == 0; }

    std::span<const float> values() const;
    const float* data() const { return data_ ? data_->data() : nullptr; }
    float operator[](std::size_t i) const { return (*data_)[i]; }
    float item() const;

    bool requires_grad() const { return tape_ != nullptr; }
    NodeId node() const { return node_; }
    Tape* tape() const { return tape_; }

    /// Same values, no tape attachment.
    Tensor detach() const;

    /// Same values and node, new shape with equal element count. Recorded as a
    /// view: gradients flow through unchanged.
    Tensor reshape(Shape shape) const;

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<const std::vector<float>> data_;
    Tape* tape_ = nullptr;
    NodeId node_ = kNoNode;
};

/// Mutable trainable array owned by a model. A tape snapshots it into a leaf
/// tensor for each forward pass; optimizers update it in place afterwards.
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<float> value;

    Parameter() = default;
    Parameter(std::string n, Shape s);
    Parameter(std::string n, Shape s, std::vector<float> v);

    std::size_t numel() const { return value.size(); }
};

}  // namespace ssp::autograd
