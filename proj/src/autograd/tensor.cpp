#include "ssp/autograd/tensor.hpp"

#include <sstream>

namespace ssp::autograd {

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
    if (element_count(shape_) != values.size()) {
        throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " +
                         std::to_string(element_count(shape_)) + " elements, got " +
                         std::to_string(values.size()));
    }
    data_ = std::make_shared<const std::vector<float>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
    const auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

std::span<const float> Tensor::values() const {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape_) + " is not a scalar");
    return (*data_)[0];
}

Tensor Tensor::detach() const {
    Tensor out = *this;
    out.tape_ = nullptr;
    out.node_ = kNoNode;
    return out;
}

Tensor Tensor::reshape(Shape shape) const {
    if (element_count(shape) != numel()) {
        throw ShapeError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

Parameter::Parameter(std::string n, Shape s)
    : name(std::move(n)), shape(std::move(s)), value(element_count(shape), 0.0f) {}

Parameter::Parameter(std::string n, Shape s, std::vector<float> v)
    : name(std::move(n)), shape(std::move(s)), value(std::move(v)) {
    if (element_count(shape) != value.size()) {
        throw ShapeError("parameter " + name + ": shape " + shape_string(shape) + " does not match " +
                         std::to_string(value.size()) + " values");
    }
}

}  // namespace ssp::autograd
