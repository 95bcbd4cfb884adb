#include "smi/ad/tensor.hpp"

#include "smi/core/error.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

namespace smi::ad {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
}

namespace {

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

}  // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_size(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

std::span<const double> Tensor::grad() const {
    return node_->grad_buffer();
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->value); }

Tensor Tensor::clone_parameter() const { return parameter(node_->shape, node_->value); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                           std::function<void(Node&)> backward) {
    const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    auto node = make_node(std::move(shape), std::move(values), needs);
    if (needs) {
        node->parents.reserve(inputs.size());
        for (auto& t : inputs) node->parents.push_back(t.node_);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) throw ContractError("backward() needs a scalar loss");
    if (!loss.requires_grad()) return;
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

namespace {

struct StructureState {
    bool active = false;
    std::uint64_t hash = 0xcbf29ce484222325ULL;
};

thread_local StructureState g_structure;

}  // namespace

void StructureLog::begin() {
    g_structure.active = true;
    g_structure.hash = 0xcbf29ce484222325ULL;
}

std::uint64_t StructureLog::end() {
    g_structure.active = false;
    return g_structure.hash;
}

bool StructureLog::active() { return g_structure.active; }

void StructureLog::record(std::uint64_t value) { record_bytes(&value, sizeof(value)); }

void StructureLog::record_bytes(const void* data, std::size_t n) {
    if (!g_structure.active) return;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        g_structure.hash ^= p[i];
        g_structure.hash *= 0x100000001b3ULL;
    }
}

}  // namespace smi::ad
