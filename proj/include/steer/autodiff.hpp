#pragma once

// Minimal reverse-mode differentiation over steer::Tensor.
//
// Values are immutable once produced and are held through shared_ptr, so a
// leaf can wrap a parameter snapshot that several workers read at once. A
// graph (the Node objects reachable from a loss) belongs to one worker.

#include <functional>
#include <memory>
#include <vector>

#include "steer/tensor.hpp"

namespace steer::ad {

namespace detail {
struct NodeImpl {
    std::shared_ptr<const Tensor> value;
    Tensor grad;  // empty until first touched by backward or grad()
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeImpl>> parents;
    std::function<void(NodeImpl&)> backward;
    const char* op = "leaf";

    Tensor& ensure_grad();
};
}  // namespace detail

class Node {
public:
    Node() = default;

    static Node constant(Tensor value);
    static Node constant(std::shared_ptr<const Tensor> value);
    static Node leaf(Tensor value);
    static Node leaf(std::shared_ptr<const Tensor> value);

    bool valid() const { return impl_ != nullptr; }
    const Tensor& value() const { return *impl_->value; }
    std::shared_ptr<const Tensor> shared_value() const { return impl_->value; }
    const Shape& shape() const { return impl_->value->shape(); }
    std::size_t numel() const { return impl_->value->numel(); }
    double item() const { return impl_->value->item(); }

    // Zero-initialized with the value's shape when nothing has flowed in yet.
    const Tensor& grad() const { return impl_->ensure_grad(); }
    bool requires_grad() const { return impl_->requires_grad; }
    bool is_leaf() const { return !impl_->backward; }
    const char* op() const { return impl_->op; }
    void zero_grad();

    detail::NodeImpl& impl() const { return *impl_; }
    const std::shared_ptr<detail::NodeImpl>& handle() const { return impl_; }

    static Node make(Tensor value, std::vector<Node> parents, std::function<void(detail::NodeImpl&)> backward,
                     const char* op);

private:
    explicit Node(std::shared_ptr<detail::NodeImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::NodeImpl> impl_;
};

struct SortResult {
    Node sorted_values;
    std::vector<std::size_t> permutation;  // sorted position i came from source index permutation[i]
};

// Linear algebra
Node matmul(const Node& a, const Node& b);

// Elementwise. Binary ops accept equal shapes or a rank-0 scalar on either side.
Node add(const Node& a, const Node& b);
Node sub(const Node& a, const Node& b);
Node mul(const Node& a, const Node& b);
Node abs(const Node& a);
Node pow(const Node& a, double p);
Node relu(const Node& a);
Node tanh(const Node& a);
Node scale(const Node& a, double c);
// sqrt with the derivative evaluated at max(a, floor) so an exact zero has a finite slope.
Node sqrt_floor(const Node& a, double floor);

// Explicit row broadcasting: a is [N x d], v has d elements.
Node add_rows(const Node& a, const Node& v);
Node mul_rows(const Node& a, const Node& v);

// Per-row zero-mean unit-variance standardization over the feature axis.
Node layer_norm_rows(const Node& a, double eps);

// Structural
Node column(const Node& a, std::size_t j);
Node row_slice(const Node& a, std::size_t r, std::size_t begin, std::size_t end);
Node concat_cols(const Node& a, const Node& b);
Node gather_rows(const Node& a, const std::vector<std::size_t>& rows);

SortResult sort_ascending(const Node& a);

// Reductions to a rank-0 scalar.
Node sum(const Node& a);
Node mean(const Node& a);

// Accumulates dLoss/dNode into every requires_grad leaf reachable from loss.
void backward(const Node& loss);

}  // namespace steer::ad
