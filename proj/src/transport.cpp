#include "steer/transport.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace steer {

namespace {

constexpr double kRootFloor = 1e-12;

void check_p(int p) {
    if (p != 1 && p != 2) throw std::invalid_argument("p must be 1 or 2, got " + std::to_string(p));
}

void check_lengths(std::size_t nx, std::size_t ny) {
    if (nx == 0 || ny == 0) throw DimensionError("wasserstein distance of an empty sample");
    if (nx != ny)
        throw DimensionError("wasserstein distance needs equal sample counts, got " + std::to_string(nx) + " and " +
                             std::to_string(ny));
}

std::vector<double> sorted_copy(std::span<const double> v) {
    std::vector<double> s(v.begin(), v.end());
    for (double x : s)
        if (std::isnan(x)) throw std::domain_error("wasserstein distance: NaN sample");
    std::sort(s.begin(), s.end());
    return s;
}

// Stable ascending order of column j of a row-major [n x d] buffer.
std::vector<std::size_t> column_order(const Tensor& a, std::size_t j) {
    const std::size_t n = a.rows(), d = a.cols();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t r, std::size_t s) { return a[r * d + j] < a[s * d + j]; });
    return perm;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Sum over columns of W_p(a[:, j], t[:, j]), with a hand-written backward so the
// loss costs one graph node per site instead of a handful per neuron.
ad::Node columnwise_wp(const ad::Node& a, const Tensor& t, int p, const std::string& site) {
    const Tensor& x = a.value();
    if (x.rank() != 2 || t.rank() != 2 || x.cols() != t.cols())
        throw DimensionError("site '" + site + "': steered " + shape_str(x.shape()) + " vs target " + shape_str(t.shape()));
    if (x.rows() != t.rows())
        throw DimensionError("site '" + site + "': sample-count mismatch " + std::to_string(x.rows()) + " vs " +
                             std::to_string(t.rows()));
    if (x.rows() == 0) throw DimensionError("site '" + site + "': empty activations");
    for (double v : x.data())
        if (std::isnan(v)) throw std::domain_error("site '" + site + "': NaN activation");

    const std::size_t n = x.rows(), d = x.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    // coef[j * n + i] = dW_j / d(sorted x)_i, scattered through perms[j] on the way back.
    std::vector<std::size_t> perms(n * d);
    std::vector<double> coef(n * d);
    double total = 0.0;
    std::vector<double> tcol(n);
    for (std::size_t j = 0; j < d; ++j) {
        auto perm = column_order(x, j);
        for (std::size_t i = 0; i < n; ++i) tcol[i] = t[i * d + j];
        auto ts = sorted_copy(tcol);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double r = x[perm[i] * d + j] - ts[i];
            acc += p == 1 ? std::abs(r) : r * r;
            coef[j * n + i] = r;
            perms[j * n + i] = perm[i];
        }
        acc *= inv_n;
        if (p == 1) {
            total += acc;
            for (std::size_t i = 0; i < n; ++i) coef[j * n + i] = sign(coef[j * n + i]) * inv_n;
        } else {
            total += std::sqrt(acc);
            const double s = 0.5 / std::sqrt(std::max(acc, kRootFloor));
            for (std::size_t i = 0; i < n; ++i) coef[j * n + i] *= 2.0 * inv_n * s;
        }
    }
    return ad::Node::make(
        Tensor::scalar(total), {a},
        [perms = std::move(perms), coef = std::move(coef), n, d](ad::detail::NodeImpl& self) {
            auto& parent = *self.parents[0];
            if (!parent.requires_grad) return;
            Tensor& ga = parent.ensure_grad();
            const double g = self.grad[0];
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t i = 0; i < n; ++i) ga[perms[j * n + i] * d + j] += g * coef[j * n + i];
        },
        "wp_columns");
}

void check_sites(const std::vector<std::string>& steered, const ActivationRecord& target) {
    bool same = steered.size() == target.size();
    for (const auto& s : steered) same = same && target.contains(s);
    if (!same) throw std::invalid_argument("alignment loss: steered and target records have different sites");
}

}  // namespace

void LossConfig::validate() const {
    check_p(p);
    if (site_weights)
        for (const auto& [name, w] : *site_weights)
            if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("site weight for '" + name + "' must be >= 0");
}

double LossConfig::weight(const std::string& site) const {
    if (!site_weights) return 1.0;
    auto it = site_weights->find(site);
    return it == site_weights->end() ? 1.0 : it->second;
}

ad::Node wp_distance(const ad::Node& x, const Tensor& y, int p) {
    check_p(p);
    if (x.value().rank() != 1 || y.rank() != 1) throw DimensionError("wp_distance expects 1-D samples");
    check_lengths(x.numel(), y.numel());
    auto sx = ad::sort_ascending(x).sorted_values;
    auto diff = ad::sub(sx, ad::Node::constant(Tensor::vector(sorted_copy(y.data()))));
    if (p == 1) return ad::mean(ad::abs(diff));
    return ad::sqrt_floor(ad::mean(ad::pow(diff, 2.0)), kRootFloor);
}

double wp_distance(const Tensor& x, const Tensor& y, int p) {
    check_p(p);
    check_lengths(x.numel(), y.numel());
    auto sx = sorted_copy(x.data());
    auto sy = sorted_copy(y.data());
    double acc = 0.0;
    for (std::size_t i = 0; i < sx.size(); ++i) {
        double r = sx[i] - sy[i];
        acc += p == 1 ? std::abs(r) : r * r;
    }
    acc /= static_cast<double>(sx.size());
    return p == 1 ? acc : std::sqrt(acc);
}

ad::Node alignment_loss(const std::map<std::string, ad::Node>& steered, const ActivationRecord& target,
                        const LossConfig& cfg) {
    cfg.validate();
    std::vector<std::string> names;
    for (const auto& [name, node] : steered) names.push_back(name);
    check_sites(names, target);
    if (names.empty()) throw std::invalid_argument("alignment loss over an empty record");
    ad::Node total;
    for (const auto& name : names) {
        ad::Node term = columnwise_wp(steered.at(name), target.at(name), cfg.p, name);
        const double w = cfg.weight(name);
        if (w != 1.0) term = ad::scale(term, w);
        total = total.valid() ? ad::add(total, term) : term;
    }
    return total;
}

double alignment_loss(const ActivationRecord& steered, const ActivationRecord& target, const LossConfig& cfg) {
    double total = 0.0;
    for (const auto& [name, v] : site_losses(steered, target, cfg)) total += v;
    return total;
}

std::map<std::string, double> site_losses(const ActivationRecord& steered, const ActivationRecord& target,
                                          const LossConfig& cfg) {
    cfg.validate();
    std::vector<std::string> names;
    for (const auto& [name, t] : steered) names.push_back(name);
    check_sites(names, target);
    std::map<std::string, double> out;
    for (const auto& name : names)
        out[name] = cfg.weight(name) * columnwise_wp(ad::Node::constant(steered.at(name)), target.at(name), cfg.p, name).item();
    return out;
}

double transport_gap(const Tensor& source, const Tensor& target, double w, double b, double lambda, int p) {
    check_lengths(source.numel(), target.numel());
    Tensor moved = source;
    for (auto& v : moved.data()) v = (1.0 - lambda) * v + lambda * (w * v + b);
    return wp_distance(moved, target, p);
}

}  // namespace steer
