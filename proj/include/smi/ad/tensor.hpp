#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major double
// arrays. A Tensor is a shared handle to a graph node; operations record their
// parents and a backward closure only when some input requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace smi::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor parameter(Shape shape, std::vector<double> values);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    // Zero-filled view if no gradient has been accumulated yet.
    std::span<const double> grad() const;
    std::span<double> mutable_grad() { return node_->grad_buffer(); }
    double item() const;

    void zero_grad() { node_->grad.clear(); }
    Tensor detach() const;
    Tensor clone_parameter() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    static Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                              std::function<void(Node&)> backward);

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;
};

// Reverse sweep from a scalar loss; gradients accumulate into every node that
// requires them.
void backward(const Tensor& loss);

// Records the discrete decisions taken while evaluating a graph (relu signs,
// calibration shifts) so that finite-difference checks can discard coordinates
// whose perturbation crosses a non-differentiable point.
class StructureLog {
public:
    static void begin();
    static std::uint64_t end();
    static bool active();
    static void record(std::uint64_t value);
    static void record_bytes(const void* data, std::size_t n);
};

}  // namespace smi::ad
