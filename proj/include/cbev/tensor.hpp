#pragma once

#include <cbev/error.hpp>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cbev {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    std::vector<float>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
        return grad;
    }
};

} // namespace detail

/// Dense row-major float tensor with an optional gradient.
///
/// A Tensor is a cheap handle; copies share storage. Operations in ops.hpp record
/// a backward closure when any input requires a gradient, and backward() replays
/// them in reverse topological order.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<float> d(shape_numel(shape), 0.0f);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, float value, bool requires_grad = false) {
        std::vector<float> d(shape_numel(shape), value);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(float v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const float> data() const { return node_->data; }
    std::span<float> mutable_data() { return node_->data; }
    float operator[](std::size_t i) const { return node_->data[i]; }

    float item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    /// Gradient buffer; zeros when nothing has been accumulated.
    std::vector<float> grad() const {
        if (node_->grad.empty()) return std::vector<float>(numel(), 0.0f);
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    /// Same values, no history, no gradient requirement.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    Tensor clone(bool requires_grad = false) const { return Tensor(shape(), node_->data, requires_grad); }

    /// Reverse-mode sweep from a scalar.
    void backward() const {
        if (numel() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                detail::Node* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad()[0] += 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(std::span<const float> values, const char* op) {
    for (float v : values)
        if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite value");
}

/// Builds an op result; the backward closure is attached only if some parent needs it.
inline Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                          std::vector<Tensor> const& parents,
                          std::function<void(Node&)> backward) {
    check_finite(data, op);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    Tensor out(std::move(shape), std::move(data), rg);
    if (rg) {
        auto& n = *out.node();
        for (const auto& p : parents) n.parents.push_back(p.node());
        n.backward_fn = std::move(backward);
    }
    return out;
}

/// Parent gradient buffer, or nullptr when the parent does not take gradients.
inline float* grad_of(Node& self, std::size_t parent) {
    Node& p = *self.parents[parent];
    return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

} // namespace detail

inline void require_shape(const Tensor& t, const Shape& expected, const char* what) {
    if (t.shape() != expected)
        throw DimensionError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                             shape_str(t.shape()));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.ndim() != rank)
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
}

} // namespace cbev
