#include "ssp/autograd/tape.hpp"

#include <stdexcept>

namespace ssp::autograd {

const Buffer* Gradients::find(NodeId node) const {
    if (node < 0 || static_cast<std::size_t>(node) >= by_node_.size()) return nullptr;
    const auto& g = by_node_[static_cast<std::size_t>(node)];
    return g.empty() ? nullptr : &g;
}

const Buffer* Gradients::find(const Parameter& p) const {
    auto it = params_.find(&p);
    return it == params_.end() ? nullptr : find(it->second);
}

Tensor Gradients::of(const Tensor& t) const {
    const Buffer* g = find(t);
    if (!g) throw std::logic_error("no gradient recorded for node " + std::to_string(t.node()));
    return Tensor(t.shape(), *g);
}

std::size_t Gradients::size() const {
    std::size_t n = 0;
    for (const auto& g : by_node_) n += g.empty() ? 0 : 1;
    return n;
}

Tensor Tape::variable(Tensor value) {
    Tensor out = value.detach();
    out.tape_ = this;
    out.node_ = static_cast<NodeId>(nodes_.size());
    nodes_.push_back(Node{{}, nullptr, out.shape()});
    return out;
}

Tensor Tape::watch(Parameter& param) {
    if (auto it = leaves_.find(&param); it != leaves_.end()) return it->second;
    Tensor leaf = variable(Tensor(param.shape, param.value));
    params_[&param] = leaf.node();
    leaves_.emplace(&param, leaf);
    return leaf;
}

Tensor Tape::record(Shape shape, Buffer values, std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    return record(std::move(shape), std::move(values), std::vector<const Tensor*>(inputs), std::move(backward));
}

Tensor Tape::record(Shape shape, Buffer values, const std::vector<const Tensor*>& inputs, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    Node node;
    node.inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) {
        if (in->tape() && in->tape() != this) throw std::logic_error("tensor recorded on a different tape");
        node.inputs.push_back(in->tape() ? in->node() : kNoNode);
    }
    node.backward = std::move(backward);
    node.shape = out.shape();
    out.tape_ = this;
    out.node_ = static_cast<NodeId>(nodes_.size());
    nodes_.push_back(std::move(node));
    return out;
}

Gradients Tape::backward(const Tensor& loss) const {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
    }
    if (loss.tape() != this) throw std::logic_error("backward: loss was not recorded on this tape");

    Gradients grads;
    grads.by_node_.resize(nodes_.size());
    grads.params_ = params_;
    grads.by_node_[static_cast<std::size_t>(loss.node())] = Buffer{1.0f};

    for (auto id = static_cast<std::size_t>(loss.node()) + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!node.backward || grads.by_node_[id].empty()) continue;
        std::vector<bool> wanted(node.inputs.size());
        bool any = false;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            wanted[i] = node.inputs[i] != kNoNode;
            any = any || wanted[i];
        }
        if (!any) continue;
        auto input_grads = node.backward(grads.by_node_[id], wanted);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            if (!wanted[i] || input_grads[i].empty()) continue;
            auto& slot = grads.by_node_[static_cast<std::size_t>(node.inputs[i])];
            if (slot.empty()) {
                slot = std::move(input_grads[i]);
            } else {
                for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += input_grads[i][k];
            }
        }
    }
    return grads;
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
    return common_tape(std::vector<const Tensor*>(inputs));
}

Tape* common_tape(const std::vector<const Tensor*>& inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t->tape()) continue;
        if (tape && tape != t->tape()) throw std::logic_error("inputs recorded on different tapes");
        tape = t->tape();
    }
    return tape;
}

}  // namespace ssp::autograd
