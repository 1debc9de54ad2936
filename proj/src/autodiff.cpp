#include "steer/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace steer::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }
MatMap as_mat(Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }

const Tensor& val(const detail::NodeImpl& n, std::size_t i) { return *n.parents[i]->value; }

// Grad buffer of parent i, or nullptr when it does not need one.
Tensor* pgrad(detail::NodeImpl& n, std::size_t i) {
    auto& p = *n.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}

void require_matrix(const Node& a, const char* op) {
    if (a.value().rank() != 2) throw DimensionError(std::string(op) + ": expected matrix, got " + shape_str(a.shape()));
}

enum class Bcast { same, left_scalar, right_scalar };

Bcast broadcast_kind(const Node& a, const Node& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (a.value().is_scalar()) return Bcast::left_scalar;
    if (b.value().is_scalar()) return Bcast::right_scalar;
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

// out[i] = f(a[ia], b[ib]) under the scalar broadcasting rule.
template <class F>
Tensor binary_values(const Tensor& a, const Tensor& b, Bcast kind, F f) {
    const Shape& shape = kind == Bcast::left_scalar ? b.shape() : a.shape();
    Tensor out = Tensor::zeros(shape);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        double x = kind == Bcast::left_scalar ? a[0] : a[i];
        double y = kind == Bcast::right_scalar ? b[0] : b[i];
        out[i] = f(x, y);
    }
    return out;
}

// Accumulates g[i] * coef(i) into a grad buffer, summing when that side was broadcast.
template <class F>
void accumulate_side(Tensor* dst, const Tensor& g, bool broadcast, F coef) {
    if (!dst) return;
    const std::size_t n = g.numel();
    if (broadcast) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * coef(i);
        (*dst)[0] += s;
    } else {
        for (std::size_t i = 0; i < n; ++i) (*dst)[i] += g[i] * coef(i);
    }
}

template <class Value, class Deriv>
Node unary(const Node& a, const char* op, Value value, Deriv deriv) {
    const Tensor& x = a.value();
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = value(x[i]);
    return Node::make(
        std::move(out), {a},
        [deriv](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            const Tensor& x = val(self, 0);
            const Tensor& y = *self.value;
            for (std::size_t i = 0; i < x.numel(); ++i) (*ga)[i] += self.grad[i] * deriv(x[i], y[i]);
        },
        op);
}

void require_row_vector(const Node& a, const Node& v, const char* op) {
    require_matrix(a, op);
    if (v.numel() != a.value().cols() || v.value().rank() != 1) {
        throw DimensionError(std::string(op) + ": row vector " + shape_str(v.shape()) + " vs matrix " +
                             shape_str(a.shape()));
    }
}

}  // namespace

Tensor& detail::NodeImpl::ensure_grad() {
    if (grad.shape() != value->shape() || grad.numel() != value->numel()) grad = Tensor::zeros(value->shape());
    return grad;
}

Node Node::constant(Tensor value) { return constant(std::make_shared<const Tensor>(std::move(value))); }

Node Node::constant(std::shared_ptr<const Tensor> value) {
    auto impl = std::make_shared<detail::NodeImpl>();
    impl->value = std::move(value);
    impl->op = "constant";
    return Node(std::move(impl));
}

Node Node::leaf(Tensor value) { return leaf(std::make_shared<const Tensor>(std::move(value))); }

Node Node::leaf(std::shared_ptr<const Tensor> value) {
    auto impl = std::make_shared<detail::NodeImpl>();
    impl->value = std::move(value);
    impl->requires_grad = true;
    impl->ensure_grad();
    return Node(std::move(impl));
}

void Node::zero_grad() { impl_->grad = Tensor::zeros(impl_->value->shape()); }

Node Node::make(Tensor value, std::vector<Node> parents, std::function<void(detail::NodeImpl&)> backward, const char* op) {
    auto impl = std::make_shared<detail::NodeImpl>();
    impl->value = std::make_shared<const Tensor>(std::move(value));
    impl->op = op;
    for (const auto& p : parents) impl->requires_grad = impl->requires_grad || p.requires_grad();
    if (impl->requires_grad) {
        impl->parents.reserve(parents.size());
        for (auto& p : parents) impl->parents.push_back(p.impl_);
        impl->backward = std::move(backward);
    }
    return Node(std::move(impl));
}

Node matmul(const Node& a, const Node& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.cols() != y.rows()) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(x.shape()) + " * " + shape_str(y.shape()));
    }
    Tensor out = Tensor::zeros({x.rows(), y.cols()});
    as_mat(out).noalias() = as_mat(x) * as_mat(y);
    return Node::make(
        std::move(out), {a, b},
        [](detail::NodeImpl& self) {
            auto g = as_mat(static_cast<const Tensor&>(self.grad));
            if (Tensor* ga = pgrad(self, 0)) as_mat(*ga).noalias() += g * as_mat(val(self, 1)).transpose();
            if (Tensor* gb = pgrad(self, 1)) as_mat(*gb).noalias() += as_mat(val(self, 0)).transpose() * g;
        },
        "matmul");
}

Node add(const Node& a, const Node& b) {
    auto kind = broadcast_kind(a, b, "add");
    return Node::make(
        binary_values(a.value(), b.value(), kind, [](double x, double y) { return x + y; }), {a, b},
        [kind](detail::NodeImpl& self) {
            auto one = [](std::size_t) { return 1.0; };
            accumulate_side(pgrad(self, 0), self.grad, kind == Bcast::left_scalar, one);
            accumulate_side(pgrad(self, 1), self.grad, kind == Bcast::right_scalar, one);
        },
        "add");
}

Node sub(const Node& a, const Node& b) {
    auto kind = broadcast_kind(a, b, "sub");
    return Node::make(
        binary_values(a.value(), b.value(), kind, [](double x, double y) { return x - y; }), {a, b},
        [kind](detail::NodeImpl& self) {
            accumulate_side(pgrad(self, 0), self.grad, kind == Bcast::left_scalar, [](std::size_t) { return 1.0; });
            accumulate_side(pgrad(self, 1), self.grad, kind == Bcast::right_scalar, [](std::size_t) { return -1.0; });
        },
        "sub");
}

Node mul(const Node& a, const Node& b) {
    auto kind = broadcast_kind(a, b, "mul");
    return Node::make(
        binary_values(a.value(), b.value(), kind, [](double x, double y) { return x * y; }), {a, b},
        [kind](detail::NodeImpl& self) {
            const Tensor& x = val(self, 0);
            const Tensor& y = val(self, 1);
            auto xi = [&](std::size_t i) { return kind == Bcast::left_scalar ? x[0] : x[i]; };
            auto yi = [&](std::size_t i) { return kind == Bcast::right_scalar ? y[0] : y[i]; };
            accumulate_side(pgrad(self, 0), self.grad, kind == Bcast::left_scalar, yi);
            accumulate_side(pgrad(self, 1), self.grad, kind == Bcast::right_scalar, xi);
        },
        "mul");
}

Node abs(const Node& a) {
    return unary(
        a, "abs", [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Node pow(const Node& a, double p) {
    if (p == 1.0) {
        return unary(a, "pow", [](double x) { return x; }, [](double, double) { return 1.0; });
    }
    if (p == 2.0) {
        return unary(a, "pow", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
    }
    return unary(
        a, "pow", [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Node relu(const Node& a) {
    return unary(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Node tanh(const Node& a) {
    return unary(
        a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Node scale(const Node& a, double c) {
    return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Node sqrt_floor(const Node& a, double floor) {
    return unary(
        a, "sqrt", [](double x) { return std::sqrt(x); },
        [floor](double x, double) { return 0.5 / std::sqrt(std::max(x, floor)); });
}

Node add_rows(const Node& a, const Node& v) {
    require_row_vector(a, v, "add_rows");
    Tensor out = a.value();
    as_mat(out).rowwise() += as_mat(v.value()).row(0);
    return Node::make(
        std::move(out), {a, v},
        [](detail::NodeImpl& self) {
            auto g = as_mat(static_cast<const Tensor&>(self.grad));
            if (Tensor* ga = pgrad(self, 0)) as_mat(*ga) += g;
            if (Tensor* gv = pgrad(self, 1)) as_mat(*gv).row(0) += g.colwise().sum();
        },
        "add_rows");
}

Node mul_rows(const Node& a, const Node& v) {
    require_row_vector(a, v, "mul_rows");
    Tensor out = a.value();
    as_mat(out).array().rowwise() *= as_mat(v.value()).row(0).array();
    return Node::make(
        std::move(out), {a, v},
        [](detail::NodeImpl& self) {
            auto g = as_mat(static_cast<const Tensor&>(self.grad));
            auto x = as_mat(val(self, 0));
            auto w = as_mat(val(self, 1));
            if (Tensor* ga = pgrad(self, 0)) as_mat(*ga).array() += g.array().rowwise() * w.row(0).array();
            if (Tensor* gv = pgrad(self, 1)) as_mat(*gv).row(0) += (g.array() * x.array()).matrix().colwise().sum();
        },
        "mul_rows");
}

Node layer_norm_rows(const Node& a, double eps) {
    require_matrix(a, "layer_norm_rows");
    const Tensor& x = a.value();
    const std::size_t n = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_sigma(n);
    for (std::size_t r = 0; r < n; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x.at(r, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (x.at(r, j) - mu) * (x.at(r, j) - mu);
        var /= static_cast<double>(d);
        inv_sigma[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) out.at(r, j) = (x.at(r, j) - mu) * inv_sigma[r];
    }
    return Node::make(
        std::move(out), {a},
        [inv_sigma = std::move(inv_sigma)](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            const Tensor& y = *self.value;
            const Tensor& g = self.grad;
            const std::size_t n = y.rows(), d = y.cols();
            for (std::size_t r = 0; r < n; ++r) {
                double mg = 0.0, mgy = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    mg += g.at(r, j);
                    mgy += g.at(r, j) * y.at(r, j);
                }
                mg /= static_cast<double>(d);
                mgy /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) ga->at(r, j) += inv_sigma[r] * (g.at(r, j) - mg - y.at(r, j) * mgy);
            }
        },
        "layer_norm_rows");
}

Node column(const Node& a, std::size_t j) {
    require_matrix(a, "column");
    if (j >= a.value().cols()) throw DimensionError("column: index " + std::to_string(j) + " out of range");
    return Node::make(
        Tensor::vector(a.value().col(j)), {a},
        [j](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            for (std::size_t r = 0; r < self.grad.numel(); ++r) ga->at(r, j) += self.grad[r];
        },
        "column");
}

Node row_slice(const Node& a, std::size_t r, std::size_t begin, std::size_t end) {
    const Tensor& x = a.value();
    if (x.rank() == 0 || r >= x.rows() || begin > end || end > x.cols()) {
        throw DimensionError("row_slice: out of range on " + shape_str(x.shape()));
    }
    std::vector<double> vals(x.data().begin() + static_cast<std::ptrdiff_t>(r * x.cols() + begin),
                             x.data().begin() + static_cast<std::ptrdiff_t>(r * x.cols() + end));
    return Node::make(
        Tensor::vector(std::move(vals)), {a},
        [r, begin](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            const std::size_t base = r * ga->cols() + begin;
            for (std::size_t i = 0; i < self.grad.numel(); ++i) (*ga)[base + i] += self.grad[i];
        },
        "row_slice");
}

Node concat_cols(const Node& a, const Node& b) {
    require_matrix(a, "concat_cols");
    require_matrix(b, "concat_cols");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rows() != y.rows()) throw DimensionError("concat_cols: row counts differ");
    Tensor out = Tensor::zeros({x.rows(), x.cols() + y.cols()});
    auto o = as_mat(out);
    o.leftCols(static_cast<Eigen::Index>(x.cols())) = as_mat(x);
    o.rightCols(static_cast<Eigen::Index>(y.cols())) = as_mat(y);
    return Node::make(
        std::move(out), {a, b},
        [](detail::NodeImpl& self) {
            auto g = as_mat(static_cast<const Tensor&>(self.grad));
            if (Tensor* ga = pgrad(self, 0)) as_mat(*ga) += g.leftCols(static_cast<Eigen::Index>(ga->cols()));
            if (Tensor* gb = pgrad(self, 1)) as_mat(*gb) += g.rightCols(static_cast<Eigen::Index>(gb->cols()));
        },
        "concat_cols");
}

Node gather_rows(const Node& a, const std::vector<std::size_t>& rows) {
    require_matrix(a, "gather_rows");
    const Tensor& x = a.value();
    const std::size_t d = x.cols();
    Tensor out = Tensor::zeros({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.rows()) throw DimensionError("gather_rows: index out of range");
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return Node::make(
        std::move(out), {a},
        [rows](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            const std::size_t d = ga->cols();
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) ga->at(rows[i], j) += self.grad.at(i, j);
        },
        "gather_rows");
}

SortResult sort_ascending(const Node& a) {
    const Tensor& x = a.value();
    if (x.rank() != 1) throw DimensionError("sort_ascending: expected 1-D input, got " + shape_str(x.shape()));
    for (double v : x.data())
        if (std::isnan(v)) throw std::domain_error("sort_ascending: NaN entry");
    std::vector<std::size_t> perm(x.numel());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> sorted(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) sorted[i] = x[perm[i]];
    Node out = Node::make(
        Tensor::vector(std::move(sorted)), {a},
        [perm](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            for (std::size_t i = 0; i < perm.size(); ++i) (*ga)[perm[i]] += self.grad[i];
        },
        "sort");
    return {std::move(out), std::move(perm)};
}

Node sum(const Node& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return Node::make(
        Tensor::scalar(s), {a},
        [](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            const double g = self.grad[0];
            for (auto& v : ga->data()) v += g;
        },
        "sum");
}

Node mean(const Node& a) {
    const std::size_t n = a.numel();
    if (n == 0) throw DimensionError("mean of empty tensor");
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return Node::make(
        Tensor::scalar(s / static_cast<double>(n)), {a},
        [n](detail::NodeImpl& self) {
            Tensor* ga = pgrad(self, 0);
            if (!ga) return;
            const double g = self.grad[0] / static_cast<double>(n);
            for (auto& v : ga->data()) v += g;
        },
        "mean");
}

void backward(const Node& loss) {
    if (!loss.value().is_scalar()) throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<detail::NodeImpl*> order;
    std::unordered_set<detail::NodeImpl*> seen;
    std::vector<std::pair<detail::NodeImpl*, std::size_t>> stack;
    stack.emplace_back(&loss.impl(), 0);
    seen.insert(&loss.impl());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::NodeImpl* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* n : order)
        if (n->backward) n->grad = Tensor::zeros(n->value->shape());
    loss.impl().ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

}  // namespace steer::ad
