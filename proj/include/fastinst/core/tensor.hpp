#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fastinst {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;

    bool is_leaf() const { return parents.empty(); }
};

/// Dense row-major tensor handle with optional reverse-mode gradient tracking.
///
/// Copies share the underlying node. Values are immutable once an op has
/// produced them; only leaves (parameters, inputs) may be edited in place
/// through mutable_data().
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

   public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        for (auto extent : shape) {
            if (extent == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_str(shape));
        }
        auto node = std::make_shared<Node<T>>();
        node->shape = std::move(shape);
        node->data = std::move(values);
        node->requires_grad = requires_grad;
        if (requires_grad) node->grad.assign(node->data.size(), T(0));
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

    static Tensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
    std::size_t numel() const { return node().data.size(); }

    std::span<const T> data() const { return node().data; }
    const T* ptr() const { return node().data.data(); }
    T operator[](std::size_t i) const { return node().data[i]; }
    T item() const {
        if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
        return node().data[0];
    }

    /// In-place access; only valid on leaves.
    std::span<T> mutable_data() {
        if (!node().is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
        return node().data;
    }

    bool requires_grad() const { return node().requires_grad; }
    std::span<const T> grad() const { return node().grad; }
    std::span<T> mutable_grad() { return node().grad; }

    void zero_grad() { std::fill(node().grad.begin(), node().grad.end(), T(0)); }

    /// Copy of the values with no graph history.
    Tensor detach() const { return from(shape(), node().data, false); }

    std::vector<T> to_vector() const { return node().data; }

    /// Reverse-mode sweep from this (scalar) tensor. Leaf gradients accumulate
    /// across calls; interior gradients are recomputed on every call.
    void backward() const;

    Node<T>& node() const {
        if (!node_) throw std::logic_error("use of an undefined tensor");
        return *node_;
    }
    const NodePtr& node_ptr() const { return node_; }

   private:
    NodePtr node_;
};

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; graphs can be deep.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

/// Builds an op result and attaches the backward closure when any input tracks gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto out = Tensor<T>::from(std::move(shape), std::move(values), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto* in : inputs) any = any || in->requires_grad();
    if (!any) return out;
    auto& node = out.node();
    node.requires_grad = true;
    node.grad.assign(node.data.size(), T(0));
    for (const auto* in : inputs) node.parents.push_back(in->node_ptr());
    node.backward = std::move(backward);
    return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
    auto out = Tensor<T>::from(std::move(shape), std::move(values), false);
    if (!grad_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
    if (!any) return out;
    auto& node = out.node();
    node.requires_grad = true;
    node.grad.assign(node.data.size(), T(0));
    for (const auto& in : inputs) node.parents.push_back(in.node_ptr());
    node.backward = std::move(backward);
    return out;
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
    auto& root = node();
    if (root.data.size() != 1) throw std::logic_error("backward() requires a scalar, got " + shape_str(root.shape));
    if (!root.requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");
    auto order = detail::topo_order(&root);
    for (auto* n : order) {
        if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
    root.grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->is_leaf() && n->backward) n->backward(*n);
    }
}

}  // namespace fastinst
