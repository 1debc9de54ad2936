#include "steer/estimators.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "steer/optim.hpp"

namespace steer {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

void check_records(const ActivationRecord& src, const ActivationRecord& tgt, const char* who) {
    if (src.empty() || tgt.empty()) throw std::invalid_argument(std::string(who) + ": empty activation record");
    if (src.size() != tgt.size()) throw std::invalid_argument(std::string(who) + ": records have different sites");
    for (const auto& [name, a] : src) {
        auto it = tgt.find(name);
        if (it == tgt.end()) throw std::invalid_argument(std::string(who) + ": target has no site '" + name + "'");
        if (a.rank() != 2 || it->second.rank() != 2 || a.cols() != it->second.cols())
            throw DimensionError(std::string(who) + ": width mismatch at '" + name + "'");
        if (a.rows() == 0 || it->second.rows() == 0)
            throw std::invalid_argument(std::string(who) + ": no samples at '" + name + "'");
    }
}

Eigen::VectorXd column_means(const Tensor& a) { return as_mat(a).colwise().mean().transpose(); }

Tensor to_tensor(const Eigen::VectorXd& v) { return Tensor::vector(std::vector<double>(v.data(), v.data() + v.size())); }

void check_inputs(const Generator& g, const Tensor& src, const Tensor& tgt) {
    if (src.rank() != 2 || tgt.rank() != 2 || src.rows() == 0 || tgt.rows() == 0)
        throw std::invalid_argument("fit: inputs must be non-empty matrices");
    if (src.cols() != g.input_dim() || tgt.cols() != g.input_dim())
        throw DimensionError("fit: inputs do not match generator input_dim " + std::to_string(g.input_dim()));
    if (src.rows() != tgt.rows())
        throw DimensionError("fit: source and target sample counts differ (" + std::to_string(src.rows()) + " vs " +
                             std::to_string(tgt.rows()) + ")");
}

InterventionParams fit_records(Method base, const ActivationRecord& src, const ActivationRecord& tgt,
                               const EstimatorConfig& cfg) {
    switch (base) {
        case Method::caa: return estimate_caa(src, tgt);
        case Method::iti: return estimate_iti(src, tgt, cfg);
        case Method::linact: return estimate_linact(src, tgt, cfg);
        case Method::lineas: break;
    }
    throw std::invalid_argument("lineas has no record-level estimator");
}

void fill_site_losses(FitReport& report, const Generator& g, const Tensor& src, const ActivationRecord& tgt_record,
                      const LossConfig& loss) {
    auto before = site_losses(g.forward_capture(src).record, tgt_record, loss);
    auto after = site_losses(g.forward_capture(src, &report.params).record, tgt_record, loss);
    for (const auto& [name, v] : before) report.site_loss[name] = {v, after.at(name)};
}

}  // namespace

std::string to_string(Method m) {
    switch (m) {
        case Method::caa: return "caa";
        case Method::iti: return "iti";
        case Method::linact: return "linact";
        case Method::lineas: return "lineas";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "caa") return Method::caa;
    if (s == "iti") return Method::iti;
    if (s == "linact") return Method::linact;
    if (s == "lineas") return Method::lineas;
    throw std::invalid_argument("unknown method '" + s + "' (expected caa, iti, linact or lineas)");
}

void EstimatorConfig::validate() const {
    if (lineas_steps == 0 || iti_steps == 0) throw std::invalid_argument("estimator step counts must be positive");
    if (!(lineas_lr > 0.0) || !(iti_lr > 0.0)) throw std::invalid_argument("estimator learning rates must be positive");
    if (!(eps_var > 0.0)) throw std::invalid_argument("eps_var must be positive");
    if (!(iti_l2 >= 0.0)) throw std::invalid_argument("iti_l2 must be >= 0");
    if (!(lineas_final_factor > 0.0) || lineas_final_factor > 1.0)
        throw std::invalid_argument("lineas_final_factor must be in (0, 1]");
    loss.validate();
}

double FitReport::loss_before() const {
    double s = 0.0;
    for (const auto& [name, l] : site_loss) s += l.before;
    return s;
}

double FitReport::loss_after() const {
    double s = 0.0;
    for (const auto& [name, l] : site_loss) s += l.after;
    return s;
}

InterventionParams estimate_caa(const ActivationRecord& src, const ActivationRecord& tgt) {
    check_records(src, tgt, "caa");
    InterventionParams out;
    out.provenance = "caa";
    for (const auto& [name, a] : src) {
        Eigen::VectorXd shift = column_means(tgt.at(name)) - column_means(a);
        out.sites[name] = {Tensor::filled({a.cols()}, 1.0), to_tensor(shift)};
    }
    return out;
}

InterventionParams estimate_iti(const ActivationRecord& src, const ActivationRecord& tgt, const EstimatorConfig& cfg) {
    check_records(src, tgt, "iti");
    cfg.validate();
    InterventionParams out;
    out.provenance = "iti";
    for (const auto& [name, a] : src) {
        const Tensor& t = tgt.at(name);
        if (a.rows() < 2 || t.rows() < 2)
            throw std::invalid_argument("iti: site '" + name + "' needs at least 2 samples per class");
        const auto ns = static_cast<Eigen::Index>(a.rows()), nt = static_cast<Eigen::Index>(t.rows());
        const auto d = static_cast<Eigen::Index>(a.cols());
        RowMat x(ns + nt, d);
        x.topRows(ns) = as_mat(a);
        x.bottomRows(nt) = as_mat(t);
        Eigen::VectorXd y(ns + nt);
        y.head(ns).setZero();
        y.tail(nt).setOnes();
        const double inv_n = 1.0 / static_cast<double>(ns + nt);

        // L2-regularized logistic regression by full-batch gradient descent.
        Eigen::VectorXd u = Eigen::VectorXd::Zero(d);
        double c = 0.0;
        for (std::size_t step = 0; step < cfg.iti_steps; ++step) {
            Eigen::ArrayXd z = (x * u).array() + c;
            Eigen::VectorXd r = (1.0 / (1.0 + (-z).exp())).matrix() - y;
            Eigen::VectorXd gu = x.transpose() * r * inv_n + cfg.iti_l2 * u;
            double gc = r.sum() * inv_n;
            u -= cfg.iti_lr * gu;
            c -= cfg.iti_lr * gc;
        }
        Eigen::VectorXd shift = Eigen::VectorXd::Zero(d);
        const double norm = u.norm();
        if (norm > 0.0) {
            Eigen::VectorXd dir = u / norm;
            const double alpha = (column_means(t) - column_means(a)).dot(dir);
            shift = alpha * dir;
        }
        out.sites[name] = {Tensor::filled({a.cols()}, 1.0), to_tensor(shift)};
    }
    return out;
}

AffineFit estimate_linact_site(const Tensor& src_col, const Tensor& tgt_col, double eps_var) {
    const std::size_t n = src_col.numel();
    if (tgt_col.numel() != n) throw DimensionError("linact: source and target columns differ in length");
    if (n < 2) throw std::invalid_argument("linact: need at least 2 samples per neuron");
    std::vector<double> s(src_col.data().begin(), src_col.data().end());
    std::vector<double> t(tgt_col.data().begin(), tgt_col.data().end());
    std::sort(s.begin(), s.end());
    std::sort(t.begin(), t.end());
    double ms = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ms += s[i];
        mt += t[i];
    }
    ms /= static_cast<double>(n);
    mt /= static_cast<double>(n);
    double var = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        var += (s[i] - ms) * (s[i] - ms);
        cov += (s[i] - ms) * (t[i] - mt);
    }
    var /= static_cast<double>(n);
    cov /= static_cast<double>(n);
    if (var < eps_var) return {1.0, mt - ms};
    const double w = cov / var;
    if (w < 0.0) return {0.0, mt};
    return {w, mt - w * ms};
}

InterventionParams estimate_linact(const ActivationRecord& src, const ActivationRecord& tgt, const EstimatorConfig& cfg) {
    check_records(src, tgt, "linact");
    cfg.validate();
    InterventionParams out;
    out.provenance = "linact";
    for (const auto& [name, a] : src) {
        const Tensor& t = tgt.at(name);
        if (a.rows() != t.rows())
            throw DimensionError("linact: sample-count mismatch at '" + name + "' (" + std::to_string(a.rows()) + " vs " +
                                 std::to_string(t.rows()) + ")");
        SiteParams p{Tensor::zeros({a.cols()}), Tensor::zeros({a.cols()})};
        for (std::size_t j = 0; j < a.cols(); ++j) {
            auto fit = estimate_linact_site(Tensor::vector(a.col(j)), Tensor::vector(t.col(j)), cfg.eps_var);
            p.w[j] = fit.w;
            p.b[j] = fit.b;
        }
        out.sites[name] = std::move(p);
    }
    return out;
}

FitReport estimate_lineas(const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs,
                          const EstimatorConfig& cfg) {
    cfg.validate();
    check_inputs(g, src_inputs, tgt_inputs);
    const auto start = Clock::now();
    const ActivationRecord target = g.forward_capture(tgt_inputs).record;
    const ad::Node x = ad::Node::constant(src_inputs);

    InterventionParams params = identity_params(g.sites());
    FitReport report;
    report.method = Method::lineas;
    report.incremental = false;
    for (std::size_t step = 0; step < cfg.lineas_steps; ++step) {
        InterventionNodes nodes = as_leaves(params);
        ad::Node loss = alignment_loss(g.forward_graph(x, &nodes).record, target, cfg.loss);
        if (!std::isfinite(loss.item()))
            throw std::runtime_error("lineas diverged at step " + std::to_string(step) + " (loss " +
                                     std::to_string(loss.item()) + ")");
        report.loss_trace.push_back(loss.item());
        ad::backward(loss);
        const double lr = cosine_lr(step, cfg.lineas_steps - 1, cfg.lineas_lr, cfg.lineas_final_factor);
        for (auto& [name, site] : params.sites) {
            const Tensor& gw = nodes.sites.at(name).w.grad();
            const Tensor& gb = nodes.sites.at(name).b.grad();
            for (std::size_t j = 0; j < site.w.numel(); ++j) {
                site.w[j] -= lr * gw[j];
                site.b[j] -= lr * gb[j];
            }
            if (!site.w.all_finite() || !site.b.all_finite())
                throw std::runtime_error("lineas diverged at step " + std::to_string(step) + " (non-finite parameters at '" +
                                         name + "')");
        }
    }
    params.provenance = "lineas";
    report.params = std::move(params);
    report.wall_seconds = seconds_since(start);
    fill_site_losses(report, g, src_inputs, target, cfg.loss);
    return report;
}

FitReport estimate_incremental(Method base, const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs,
                               const EstimatorConfig& cfg) {
    if (base == Method::lineas) throw std::invalid_argument("incremental fitting needs caa, iti or linact");
    cfg.validate();
    check_inputs(g, src_inputs, tgt_inputs);
    const auto start = Clock::now();
    const ActivationRecord target = g.forward_capture(tgt_inputs).record;
    InterventionParams params;
    for (const auto& site : g.sites()) {
        // Source activations under everything fitted so far.
        ActivationRecord src = g.forward_capture(src_inputs, &params).record;
        auto fitted = fit_records(base, {{site.name, src.at(site.name)}}, {{site.name, target.at(site.name)}}, cfg);
        params.sites[site.name] = fitted.sites.at(site.name);
    }
    params.provenance = to_string(base) + "-incremental";
    FitReport report;
    report.method = base;
    report.incremental = true;
    report.params = std::move(params);
    report.wall_seconds = seconds_since(start);
    fill_site_losses(report, g, src_inputs, target, cfg.loss);
    return report;
}

FitReport estimate_independent(Method base, const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs,
                               const EstimatorConfig& cfg) {
    if (base == Method::lineas) return estimate_lineas(g, src_inputs, tgt_inputs, cfg);
    cfg.validate();
    check_inputs(g, src_inputs, tgt_inputs);
    const auto start = Clock::now();
    const ActivationRecord target = g.forward_capture(tgt_inputs).record;
    FitReport report;
    report.method = base;
    report.incremental = false;
    report.params = fit_records(base, g.forward_capture(src_inputs).record, target, cfg);
    report.wall_seconds = seconds_since(start);
    fill_site_losses(report, g, src_inputs, target, cfg.loss);
    return report;
}

FitReport fit_concept(const Generator& g, const Tensor& src_inputs, const Tensor& tgt_inputs, const EstimatorConfig& cfg) {
    if (cfg.method == Method::lineas || !cfg.incremental)
        return estimate_independent(cfg.method, g, src_inputs, tgt_inputs, cfg);
    return estimate_incremental(cfg.method, g, src_inputs, tgt_inputs, cfg);
}

nlohmann::json to_json(const EstimatorConfig& cfg) {
    return {{"method", to_string(cfg.method)}, {"incremental", cfg.incremental},
            {"lineas_steps", cfg.lineas_steps}, {"lineas_lr", cfg.lineas_lr},
            {"lineas_final_factor", cfg.lineas_final_factor}, {"iti_l2", cfg.iti_l2},
            {"iti_steps", cfg.iti_steps}, {"iti_lr", cfg.iti_lr},
            {"eps_var", cfg.eps_var}, {"p", cfg.loss.p}};
}

EstimatorConfig estimator_config_from_json(const nlohmann::json& j) {
    EstimatorConfig cfg;
    cfg.method = method_from_string(j.value("method", to_string(cfg.method)));
    cfg.incremental = j.value("incremental", cfg.incremental);
    cfg.lineas_steps = j.value("lineas_steps", cfg.lineas_steps);
    cfg.lineas_lr = j.value("lineas_lr", cfg.lineas_lr);
    cfg.lineas_final_factor = j.value("lineas_final_factor", cfg.lineas_final_factor);
    cfg.iti_l2 = j.value("iti_l2", cfg.iti_l2);
    cfg.iti_steps = j.value("iti_steps", cfg.iti_steps);
    cfg.iti_lr = j.value("iti_lr", cfg.iti_lr);
    cfg.eps_var = j.value("eps_var", cfg.eps_var);
    cfg.loss.p = j.value("p", cfg.loss.p);
    cfg.validate();
    return cfg;
}

// Wall time is left out so that refits produce identical files.
nlohmann::json to_json(const FitReport& report) {
    nlohmann::json losses = nlohmann::json::object();
    for (const auto& [name, l] : report.site_loss) losses[name] = {{"before", l.before}, {"after", l.after}};
    return {{"kind", "steer.fit"},
            {"method", to_string(report.method)},
            {"incremental", report.incremental},
            {"loss_before", report.loss_before()},
            {"loss_after", report.loss_after()},
            {"site_loss", losses},
            {"loss_trace", report.loss_trace},
            {"params", to_json(report.params)}};
}

}  // namespace steer
