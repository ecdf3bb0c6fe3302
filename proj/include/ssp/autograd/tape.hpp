#pragma once

#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include "ssp/autograd/tensor.hpp"

namespace ssp::autograd {

using Buffer = std::vector<float>;

/// Given the gradient of a node's output and which inputs want a gradient,
/// return one buffer per input (left empty where not wanted).
using BackwardFn = std::function<std::vector<Buffer>(const Buffer& grad_out, const std::vector<bool>& wanted)>;

/// Gradients produced by one backward pass, keyed by node id.
class Gradients {
public:
    const Buffer* find(NodeId node) const;
    const Buffer* find(const Tensor& t) const { return find(t.node()); }
    const Buffer* find(const Parameter& p) const;
    Tensor of(const Tensor& t) const;

    std::size_t size() const;

private:
    friend class Tape;
    std::vector<Buffer> by_node_;
    std::vector<Shape> shapes_;
    std::unordered_map<const Parameter*, NodeId> params_;
};

/// Define-by-run recording of primitive operations. Nodes are appended in
/// execution order, so the node list is already topologically sorted.
/// A tape is confined to a single thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that requires a gradient.
    Tensor variable(Tensor value);

    /// Snapshot of a parameter as a leaf; the binding is remembered so that
    /// `Gradients::find(param)` works after backward(). Watching the same
    /// parameter again returns the same leaf.
    Tensor watch(Parameter& param);

    /// Append a node. Inputs that carry no tape are treated as constants.
    Tensor record(Shape shape, Buffer values, std::initializer_list<const Tensor*> inputs, BackwardFn backward);
    Tensor record(Shape shape, Buffer values, const std::vector<const Tensor*>& inputs, BackwardFn backward);

    Gradients backward(const Tensor& loss) const;

    std::size_t size() const { return nodes_.size(); }
    const std::unordered_map<const Parameter*, NodeId>& watched() const { return params_; }

private:
    struct Node {
        std::vector<NodeId> inputs;
        BackwardFn backward;
        Shape shape;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, NodeId> params_;
    std::unordered_map<const Parameter*, Tensor> leaves_;
};

/// The tape shared by the given inputs, or nullptr if none of them is
/// recorded. Mixing tapes is an error.
Tape* common_tape(std::initializer_list<const Tensor*> inputs);
Tape* common_tape(const std::vector<const Tensor*>& inputs);

}  // namespace ssp::autograd
