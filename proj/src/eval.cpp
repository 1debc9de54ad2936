#include "steer/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace steer {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kSourceTag = 0x73726365;  // "srce"
constexpr std::uint64_t kShotTag = 0x73686f74;    // "shot"

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(a),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(tag)};
    return std::mt19937_64(seq);
}

std::span<const double> row_span(const Tensor& t, std::size_t r) { return t.data().subspan(r * t.cols(), t.cols()); }

Tensor mean_row(const Tensor& t) {
    Tensor m = Tensor::zeros({t.cols()});
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t j = 0; j < t.cols(); ++j) m[j] += t.at(r, j);
    for (auto& v : m.data()) v /= static_cast<double>(t.rows());
    return m;
}

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double checked_cosine(std::span<const double> a, std::span<const double> b, const char* what) {
    if (norm(a) == 0.0 || norm(b) == 0.0) throw std::domain_error(std::string(what) + ": zero-norm output vector");
    return cosine(a, b);
}

double input_fidelity_of(const Tensor& steered, const Tensor& unsteered) {
    double s = 0.0;
    for (std::size_t r = 0; r < steered.rows(); ++r)
        s += checked_cosine(row_span(steered, r), row_span(unsteered, r), "input_fidelity");
    return s / static_cast<double>(steered.rows());
}

double concept_fidelity_of(const Tensor& steered, const Tensor& target_mean, const Tensor& baseline) {
    if (target_mean.numel() != baseline.numel() || steered.cols() != baseline.numel())
        throw DimensionError("concept_fidelity: output width mismatch");
    std::vector<double> dir(baseline.numel());
    for (std::size_t j = 0; j < dir.size(); ++j) dir[j] = target_mean[j] - baseline[j];
    if (norm(dir) == 0.0) throw std::domain_error("concept_fidelity: target mean equals the source baseline");
    std::vector<double> d(dir.size());
    double s = 0.0;
    for (std::size_t r = 0; r < steered.rows(); ++r) {
        for (std::size_t j = 0; j < d.size(); ++j) d[j] = steered.at(r, j) - baseline[j];
        s += checked_cosine(d, dir, "concept_fidelity");
    }
    return s / static_cast<double>(steered.rows());
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; the first failure (by index) is rethrown.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](std::size_t w, std::size_t stride) {
        for (std::size_t i = w; i < n; i += stride) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t t = std::min(workers, n);
    if (t <= 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < t; ++w) pool.emplace_back(work, w, t);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::vector<const ConceptSpec*> concepts_in(const World& world, Split s) {
    std::vector<const ConceptSpec*> out;
    for (auto id : world.ids_in(s)) out.push_back(&world.concept_by_id(id));
    return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    return out;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << v;
    return s.str();
}

std::string pm(const Stat& s) { return fmt(s.mean) + " ± " + fmt(s.sd); }

std::string pad(std::string s, std::size_t w) {
    // Width counts code points so "±" does not skew columns.
    std::size_t cps = 0;
    for (unsigned char c : s) cps += (c & 0xC0) != 0x80;
    if (cps < w) s.append(w - cps, ' ');
    return s;
}

}  // namespace

void EvalConfig::validate() const {
    if (n_workers == 0) throw std::invalid_argument("n_workers must be >= 1");
    if (splits.empty()) throw std::invalid_argument("no splits to evaluate");
    estimator.validate();
    loss.validate();
}

SourceSplit split_source(const World& world, std::uint64_t seed) {
    const std::size_t n = world.config.samples_per_concept;
    const std::size_t m = world.source.samples.rows();
    if (2 * n > m)
        throw std::invalid_argument("source pool of " + std::to_string(m) + " rows cannot hold two disjoint sets of " +
                                    std::to_string(n));
    std::vector<std::size_t> p(m);
    std::iota(p.begin(), p.end(), std::size_t{0});
    auto rng = make_rng(seed, 0, 0, kSourceTag);
    std::shuffle(p.begin(), p.end(), rng);
    return {select_rows(world.source.samples, {p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n)}),
            select_rows(world.source.samples,
                        {p.begin() + static_cast<std::ptrdiff_t>(n), p.begin() + static_cast<std::ptrdiff_t>(2 * n)})};
}

ConceptReference concept_reference(const Generator& g, const Tensor& eval_inputs, const Tensor& concept_samples) {
    ConceptReference ref;
    ref.unsteered = g.forward(eval_inputs);
    ref.baseline = mean_row(ref.unsteered);
    auto target = g.forward_capture(concept_samples);
    ref.target_mean = mean_row(target.outputs);
    ref.target_record = std::move(target.record);
    return ref;
}

double input_fidelity(const Generator& g, const Tensor& inputs, const InterventionParams& params) {
    return input_fidelity_of(g.forward(inputs, &params), g.forward(inputs));
}

double concept_fidelity(const Generator& g, const Tensor& inputs, const InterventionParams& params,
                        const Tensor& target_mean, const Tensor& src_baseline) {
    return concept_fidelity_of(g.forward(inputs, &params), target_mean, src_baseline);
}

Scores score(const Generator& g, const Tensor& eval_inputs, const InterventionParams* params, const ConceptReference& ref,
             const LossConfig& loss) {
    auto steered = g.forward_capture(eval_inputs, params);
    return {input_fidelity_of(steered.outputs, ref.unsteered),
            concept_fidelity_of(steered.outputs, ref.target_mean, ref.baseline),
            alignment_loss(steered.record, ref.target_record, loss)};
}

Stat summarize(const std::vector<double>& values) {
    Stat s;
    s.n = values.size();
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    return s;
}

const MethodRow& EvalReport::row(const std::string& method, Split split) const {
    for (const auto& r : rows)
        if (r.method == method && r.split == split) return r;
    throw std::out_of_range("report has no row '" + method + "' for split " + to_string(split));
}

EvalReport compare_methods(const World& world, const Generator& g, const std::vector<Method>& methods,
                           const HypernetState* hypernet, const EvalConfig& cfg) {
    cfg.validate();
    const SourceSplit src = split_source(world, cfg.seed);
    std::vector<std::string> names{"unsteered"};
    for (auto m : methods) names.push_back(to_string(m));
    if (hypernet) names.push_back("hypernet");

    EvalReport report;
    for (Split split : cfg.splits) {
        const auto concepts = concepts_in(world, split);
        // results[c][k]: concept c, column k of `names`
        std::vector<std::vector<ConceptResult>> results(concepts.size());
        parallel_for(concepts.size(), cfg.n_workers, [&](std::size_t c) {
            const ConceptSpec& spec = *concepts[c];
            const auto ref = concept_reference(g, src.eval, spec.samples_text);
            auto& out = results[c];
            out.push_back({"unsteered", split, spec.id, score(g, src.eval, nullptr, ref, cfg.loss), 0.0});
            for (auto m : methods) {
                EstimatorConfig ec = cfg.estimator;
                ec.method = m;
                auto fit = fit_concept(g, src.fit, spec.samples_text, ec);
                out.push_back({to_string(m), split, spec.id, score(g, src.eval, &fit.params, ref, cfg.loss), fit.wall_seconds});
            }
            if (hypernet) {
                const auto t0 = Clock::now();
                auto params = predict(*hypernet, encode(spec.samples_text), cfg.weights);
                const double secs = seconds_since(t0);
                out.push_back({"hypernet", split, spec.id, score(g, src.eval, &params, ref, cfg.loss), secs});
            }
        });
        for (std::size_t k = 0; k < names.size(); ++k) {
            std::vector<double> fi, fc, ls, tm;
            for (const auto& per : results) {
                const auto& r = per[k];
                fi.push_back(r.scores.input_fidelity);
                fc.push_back(r.scores.concept_fidelity);
                ls.push_back(r.scores.loss);
                tm.push_back(r.seconds);
            }
            report.rows.push_back({names[k], split, summarize(fi), summarize(fc), summarize(ls), summarize(tm).mean});
        }
        for (auto& per : results)
            for (auto& r : per) report.concepts.push_back(std::move(r));
    }
    return report;
}

std::vector<double> default_lambda_grid() { return {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5}; }

std::vector<LambdaRow> lambda_sweep(const Generator& g, const InterventionParams& params, const Tensor& eval_inputs,
                                    const ConceptReference& ref, const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("lambda grid is empty");
    for (double l : grid)
        if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("lambda grid values must be finite and >= 0");
    std::vector<LambdaRow> rows;
    for (double l : grid) {
        auto p = with_strength(params, l);
        Tensor out = g.forward(eval_inputs, &p);
        double fi = input_fidelity_of(out, ref.unsteered);
        double fc = concept_fidelity_of(out, ref.target_mean, ref.baseline);
        rows.push_back({l, fi, fc, 0.5 * (fi + fc)});
    }
    return rows;
}

LambdaSweepReport lambda_sweep_concepts(const World& world, const Generator& g, const HypernetState* hypernet,
                                        const EvalConfig& cfg, const std::vector<double>& grid) {
    cfg.validate();
    const SourceSplit src = split_source(world, cfg.seed);
    LambdaSweepReport rep;
    rep.source = hypernet ? "hypernet" : to_string(cfg.estimator.method);
    for (Split split : cfg.splits)
        for (const auto* c : concepts_in(world, split)) rep.concept_ids.push_back(c->id);
    rep.per_concept.resize(rep.concept_ids.size());
    parallel_for(rep.concept_ids.size(), cfg.n_workers, [&](std::size_t i) {
        const ConceptSpec& spec = world.concept_by_id(rep.concept_ids[i]);
        const auto ref = concept_reference(g, src.eval, spec.samples_text);
        InterventionParams params = hypernet ? predict(*hypernet, encode(spec.samples_text), cfg.weights)
                                             : fit_concept(g, src.fit, spec.samples_text, cfg.estimator).params;
        rep.per_concept[i] = lambda_sweep(g, params, src.eval, ref, grid);
    });
    std::size_t monotone = 0;
    for (const auto& rows : rep.per_concept) {
        bool ok = true;
        for (std::size_t k = 1; k < rows.size(); ++k)
            if (rows[k].lambda <= 1.0 && rows[k - 1].lambda < rows[k].lambda &&
                rows[k].concept_fidelity < rows[k - 1].concept_fidelity)
                ok = false;
        monotone += ok;
    }
    const double n = static_cast<double>(rep.per_concept.size());
    rep.monotone_fraction = rep.per_concept.empty() ? 0.0 : static_cast<double>(monotone) / n;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        LambdaRow avg{grid[k], 0.0, 0.0, 0.0};
        for (const auto& rows : rep.per_concept) {
            avg.input_fidelity += rows[k].input_fidelity / n;
            avg.concept_fidelity += rows[k].concept_fidelity / n;
        }
        avg.mean = 0.5 * (avg.input_fidelity + avg.concept_fidelity);
        rep.rows.push_back(avg);
    }
    return rep;
}

std::vector<std::size_t> default_shots() { return {1, 2, 4, 8, 16, 32}; }

std::vector<std::size_t> nshot_rows(const World& world, const ConceptSpec& spec, std::size_t shots, std::uint64_t seed) {
    const std::size_t n = spec.samples_text.rows();
    if (shots == 0 || shots > n)
        throw std::invalid_argument("cannot condition on " + std::to_string(shots) + " of " + std::to_string(n) + " samples");
    (void)world;
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    auto rng = make_rng(seed, spec.id, shots, kShotTag);
    std::shuffle(p.begin(), p.end(), rng);
    p.resize(shots);
    return p;
}

NShotReport nshot_sweep(const World& world, const Generator& g, const HypernetState& hypernet,
                        const std::vector<std::size_t>& shots, const EvalConfig& cfg) {
    cfg.validate();
    for (auto s : shots)
        if (s == 0 || s > world.config.samples_per_concept)
            throw std::invalid_argument("shot count " + std::to_string(s) + " exceeds samples_per_concept (" +
                                        std::to_string(world.config.samples_per_concept) + ")");
    const SourceSplit src = split_source(world, cfg.seed);
    std::vector<const ConceptSpec*> concepts;
    for (Split split : cfg.splits)
        for (const auto* c : concepts_in(world, split)) concepts.push_back(c);

    std::vector<std::vector<Scores>> scores(concepts.size());
    std::vector<double> unsteered(concepts.size());
    parallel_for(concepts.size(), cfg.n_workers, [&](std::size_t c) {
        const ConceptSpec& spec = *concepts[c];
        const auto ref = concept_reference(g, src.eval, spec.samples_text);
        unsteered[c] = score(g, src.eval, nullptr, ref, cfg.loss).concept_fidelity;
        for (auto s : shots) {
            auto rows = nshot_rows(world, spec, s, cfg.seed);
            Tensor e = s == 1 ? encode(spec.samples_text, Encoding::row(rows[0])) : encode(select_rows(spec.samples_text, rows));
            auto params = predict(hypernet, e, cfg.weights);
            scores[c].push_back(score(g, src.eval, &params, ref, cfg.loss));
        }
    });
    NShotReport rep;
    rep.unsteered_concept_fidelity = summarize(unsteered);
    for (std::size_t k = 0; k < shots.size(); ++k) {
        std::vector<double> fi, fc, ls;
        for (const auto& per : scores) {
            fi.push_back(per[k].input_fidelity);
            fc.push_back(per[k].concept_fidelity);
            ls.push_back(per[k].loss);
        }
        rep.rows.push_back({shots[k], summarize(fi), summarize(fc), summarize(ls)});
    }
    return rep;
}

CrossmodalReport crossmodal_eval(const World& world, const Generator& g, const HypernetState& hypernet,
                                 const EvalConfig& cfg) {
    cfg.validate();
    const SourceSplit src = split_source(world, cfg.seed);
    std::vector<const ConceptSpec*> concepts;
    for (Split split : cfg.splits)
        for (const auto* c : concepts_in(world, split)) concepts.push_back(c);
    CrossmodalReport rep;
    rep.concepts.resize(concepts.size());
    parallel_for(concepts.size(), cfg.n_workers, [&](std::size_t c) {
        const ConceptSpec& spec = *concepts[c];
        if (spec.samples_image.numel() == 0)
            throw std::invalid_argument("concept " + std::to_string(spec.id) + " has no image samples");
        const auto ref = concept_reference(g, src.eval, spec.samples_text);
        auto pt = predict(hypernet, encode(spec.samples_text), cfg.weights);
        auto pi = predict(hypernet, encode(spec.samples_image), cfg.weights);
        rep.concepts[c] = {spec.id, score(g, src.eval, &pt, ref, cfg.loss), score(g, src.eval, &pi, ref, cfg.loss)};
    });
    std::vector<double> tc, ic, ti, ii;
    for (const auto& r : rep.concepts) {
        tc.push_back(r.text.concept_fidelity);
        ic.push_back(r.image.concept_fidelity);
        ti.push_back(r.text.input_fidelity);
        ii.push_back(r.image.input_fidelity);
    }
    rep.text_concept_fidelity = summarize(tc);
    rep.image_concept_fidelity = summarize(ic);
    rep.text_input_fidelity = summarize(ti);
    rep.image_input_fidelity = summarize(ii);
    rep.delta_concept_fidelity = rep.image_concept_fidelity.mean - rep.text_concept_fidelity.mean;
    rep.delta_input_fidelity = rep.image_input_fidelity.mean - rep.text_input_fidelity.mean;
    rep.relative_delta = std::abs(rep.delta_concept_fidelity) / std::abs(rep.text_concept_fidelity.mean);
    return rep;
}

void write_table_csv(const std::filesystem::path& path, const EvalReport& report) {
    auto out = open_out(path);
    out << "method,split,n,input_fidelity_mean,input_fidelity_sd,concept_fidelity_mean,concept_fidelity_sd,loss_mean,loss_sd\n";
    for (const auto& r : report.rows)
        out << r.method << ',' << to_string(r.split) << ',' << r.input_fidelity.n << ',' << r.input_fidelity.mean << ','
            << r.input_fidelity.sd << ',' << r.concept_fidelity.mean << ',' << r.concept_fidelity.sd << ',' << r.loss.mean
            << ',' << r.loss.sd << '\n';
}

void write_timing_csv(const std::filesystem::path& path, const EvalReport& report) {
    auto out = open_out(path);
    out << "method,split,seconds_per_concept\n";
    for (const auto& r : report.rows) out << r.method << ',' << to_string(r.split) << ',' << r.seconds << '\n';
}

void write_concepts_csv(const std::filesystem::path& path, const EvalReport& report) {
    auto out = open_out(path);
    out << "method,split,concept,input_fidelity,concept_fidelity,loss\n";
    for (const auto& r : report.concepts)
        out << r.method << ',' << to_string(r.split) << ',' << r.concept_id << ',' << r.scores.input_fidelity << ','
            << r.scores.concept_fidelity << ',' << r.scores.loss << '\n';
}

void write_lambda_csv(const std::filesystem::path& path, const LambdaSweepReport& report) {
    auto out = open_out(path);
    out << "lambda,input_fidelity,concept_fidelity,mean\n";
    for (const auto& r : report.rows)
        out << r.lambda << ',' << r.input_fidelity << ',' << r.concept_fidelity << ',' << r.mean << '\n';
}

void write_nshot_csv(const std::filesystem::path& path, const NShotReport& report) {
    auto out = open_out(path);
    out << "shots,n,input_fidelity_mean,input_fidelity_sd,concept_fidelity_mean,concept_fidelity_sd,loss_mean,loss_sd\n";
    for (const auto& r : report.rows)
        out << r.shots << ',' << r.concept_fidelity.n << ',' << r.input_fidelity.mean << ',' << r.input_fidelity.sd << ','
            << r.concept_fidelity.mean << ',' << r.concept_fidelity.sd << ',' << r.loss.mean << ',' << r.loss.sd << '\n';
}

void write_crossmodal_csv(const std::filesystem::path& path, const CrossmodalReport& report) {
    auto out = open_out(path);
    out << "concept,text_input_fidelity,image_input_fidelity,delta_input_fidelity,text_concept_fidelity,"
           "image_concept_fidelity,delta_concept_fidelity\n";
    for (const auto& r : report.concepts)
        out << r.concept_id << ',' << r.text.input_fidelity << ',' << r.image.input_fidelity << ','
            << r.image.input_fidelity - r.text.input_fidelity << ',' << r.text.concept_fidelity << ','
            << r.image.concept_fidelity << ',' << r.image.concept_fidelity - r.text.concept_fidelity << '\n';
    out << "mean," << report.text_input_fidelity.mean << ',' << report.image_input_fidelity.mean << ','
        << report.delta_input_fidelity << ',' << report.text_concept_fidelity.mean << ','
        << report.image_concept_fidelity.mean << ',' << report.delta_concept_fidelity << '\n';
}

void write_distances_csv(const std::filesystem::path& path, const DistanceReport& report) {
    auto out = open_out(path);
    out << "concept,split,q25,q50,q75,mean_distance_to_train,min_distance_to_train\n";
    for (std::size_t i = 0; i < report.ids.size(); ++i) {
        out << report.ids[i] << ',' << to_string(report.splits[i]) << ',' << report.quantiles[i].q25 << ','
            << report.quantiles[i].q50 << ',' << report.quantiles[i].q75;
        auto it = std::find_if(report.difficulty.begin(), report.difficulty.end(),
                               [&](const DifficultyEntry& d) { return d.concept_id == report.ids[i]; });
        if (it != report.difficulty.end()) out << ',' << it->mean_distance << ',' << it->min_distance << '\n';
        else out << ",,\n";
    }
}

std::string format_table(const EvalReport& report, bool with_time) {
    std::ostringstream s;
    s << "Input Fid.   = mean cosine between steered and unsteered outputs\n"
         "Concept Fid. = mean cosine between (steered - baseline) and (concept mean - baseline) outputs\n"
         "Loss         = alignment loss to the concept's activations (lower is better)\n\n";
    s << pad("Method", 12) << pad("Split", 7);
    if (with_time) s << pad("Time (s)", 12);
    s << pad("Input Fid.", 18) << pad("Concept Fid.", 18) << "Loss\n";
    for (const auto& r : report.rows) {
        s << pad(r.method, 12) << pad(to_string(r.split), 7);
        if (with_time) {
            std::ostringstream t;
            t << std::scientific << std::setprecision(2) << r.seconds;
            s << pad(t.str(), 12);
        }
        s << pad(pm(r.input_fidelity), 18) << pad(pm(r.concept_fidelity), 18) << pm(r.loss) << '\n';
    }
    return s.str();
}

std::string format_lambda(const LambdaSweepReport& report) {
    std::ostringstream s;
    s << "Strength sweep (" << report.source << ", " << report.concept_ids.size() << " concepts)\n";
    s << pad("lambda", 8) << pad("Input Fid.", 12) << pad("Concept Fid.", 14) << "Mean\n";
    for (const auto& r : report.rows)
        s << pad(fmt(r.lambda, 2), 8) << pad(fmt(r.input_fidelity), 12) << pad(fmt(r.concept_fidelity), 14) << fmt(r.mean)
          << '\n';
    s << "concept fidelity non-decreasing on [0, 1]: " << fmt(100.0 * report.monotone_fraction, 1) << "% of concepts\n";
    return s.str();
}

std::string format_nshot(const NShotReport& report) {
    std::ostringstream s;
    s << "Conditioning samples sweep\n";
    s << pad("N", 6) << pad("Input Fid.", 18) << pad("Concept Fid.", 18) << "Loss\n";
    for (const auto& r : report.rows)
        s << pad(std::to_string(r.shots), 6) << pad(pm(r.input_fidelity), 18) << pad(pm(r.concept_fidelity), 18)
          << pm(r.loss) << '\n';
    s << "unsteered concept fidelity: " << pm(report.unsteered_concept_fidelity) << '\n';
    return s.str();
}

std::string format_crossmodal(const CrossmodalReport& report) {
    std::ostringstream s;
    s << "Cross-modal conditioning (" << report.concepts.size() << " concepts)\n";
    s << pad("Condition", 11) << pad("Input Fid.", 18) << "Concept Fid.\n";
    s << pad("text", 11) << pad(pm(report.text_input_fidelity), 18) << pm(report.text_concept_fidelity) << '\n';
    s << pad("image", 11) << pad(pm(report.image_input_fidelity), 18) << pm(report.image_concept_fidelity) << '\n';
    s << pad("delta", 11) << pad(fmt(report.delta_input_fidelity), 18) << fmt(report.delta_concept_fidelity) << '\n';
    s << "relative concept fidelity delta: " << fmt(100.0 * report.relative_delta, 2) << "%\n";
    return s.str();
}

std::string format_distances(const DistanceReport& report) {
    std::ostringstream s;
    s << "Concept distance analysis (" << report.ids.size() << " concepts)\n";
    s << "median q50 distance, train: " << fmt(report.median_q50_train) << '\n';
    s << "median q50 distance, test:  " << fmt(report.median_q50_test) << '\n';
    s << "difficulty proxies (mean vs min distance to train), Pearson r: " << fmt(report.difficulty_pearson) << '\n';
    return s.str();
}

}  // namespace steer
