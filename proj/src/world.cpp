#include "steer/world.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <tuple>

#include "steer/json_io.hpp"

namespace steer {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Vec gaussian_vec(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
    return v;
}

Vec normalized(const Vec& v) {
    double n = v.norm();
    if (n == 0.0) throw std::domain_error("cannot normalize a zero vector");
    return v / n;
}

Tensor to_tensor(const Vec& v) { return Tensor::vector(std::vector<double>(v.data(), v.data() + v.size())); }

// Orthogonal R = (I - K)^-1 (I + K) with ||R - I||_2 == gap exactly.
Mat modality_rotation(std::mt19937_64& rng, std::size_t d, double gap) {
    Mat s(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < s.rows(); ++i)
        for (Eigen::Index j = 0; j < s.cols(); ++j) s(i, j) = normal(rng);
    Mat eye = Mat::Identity(s.rows(), s.cols());
    if (gap == 0.0) return eye;
    Mat k = s - s.transpose();
    // Cayley maps skew eigenvalue i*theta to a rotation by 2*atan(theta); |e^{i phi} - 1| = gap.
    double theta = std::tan(std::asin(gap / 2.0));
    double spectral = Eigen::JacobiSVD<Mat>(k).singularValues()(0);
    k *= theta / spectral;
    return (eye - k).partialPivLu().solve(eye + k);
}

}  // namespace

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

void WorldConfig::validate() const {
    if (n_concepts < 2) throw std::invalid_argument("world needs at least 2 concepts");
    if (sample_noise < 0.0) throw std::invalid_argument("sample_noise must be >= 0");
    if (modality_gap < 0.0 || modality_gap >= 2.0) throw std::invalid_argument("modality_gap must be in [0, 2)");
    if (latent_dim < 1 || latent_dim >= embed_dim) throw std::invalid_argument("need 1 <= latent_dim < embed_dim");
    if (samples_per_concept < 1) throw std::invalid_argument("samples_per_concept must be >= 1");
    if (train_frac < 0.0 || test_frac < 0.0 || std::abs(train_frac + test_frac - 1.0) > 1e-12)
        throw std::invalid_argument("split fractions must be non-negative and sum to 1");
    if (source_pool_size < 1) throw std::invalid_argument("source_pool_size must be >= 1");
    if (source_cos_cap <= 0.0 || source_cos_cap > 1.0) throw std::invalid_argument("source_cos_cap must be in (0, 1]");
    if (cone_offset < 0.0) throw std::invalid_argument("cone_offset must be >= 0");
}

std::vector<std::size_t> World::ids_in(Split s) const {
    std::vector<std::size_t> out;
    for (const auto& c : concepts)
        if (c.split == s) out.push_back(c.id);
    return out;
}

const ConceptSpec& World::concept_by_id(std::size_t id) const {
    for (const auto& c : concepts)
        if (c.id == id) return c;
    throw std::out_of_range("unknown concept id " + std::to_string(id));
}

World build_world(const WorldConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
    const auto k = static_cast<Eigen::Index>(cfg.latent_dim);

    Mat manifold(d, k);
    for (Eigen::Index j = 0; j < k; ++j) manifold.col(j) = gaussian_vec(rng, cfg.embed_dim) / std::sqrt(double(d));
    Vec shared = normalized(gaussian_vec(rng, cfg.embed_dim));
    Mat rotation = modality_rotation(rng, cfg.embed_dim, cfg.modality_gap);

    World world;
    world.config = cfg;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t c = 0; c < cfg.n_concepts; ++c) {
        ConceptSpec spec;
        spec.id = c;
        Vec z = normalized(gaussian_vec(rng, cfg.latent_dim)) * unit(rng);
        Vec center = normalized(manifold * z + cfg.cone_offset * shared);
        Vec image_center = rotation * center;
        spec.latent = to_tensor(z);
        spec.center = to_tensor(center);
        spec.samples_text = Tensor::zeros({cfg.samples_per_concept, cfg.embed_dim});
        spec.samples_image = Tensor::zeros({cfg.samples_per_concept, cfg.embed_dim});
        for (std::size_t i = 0; i < cfg.samples_per_concept; ++i) {
            Vec xi = gaussian_vec(rng, cfg.embed_dim) * cfg.sample_noise;
            Vec text = normalized(center + xi);
            Vec image = normalized(image_center + xi);
            for (Eigen::Index j = 0; j < d; ++j) {
                spec.samples_text.at(i, std::size_t(j)) = text[j];
                spec.samples_image.at(i, std::size_t(j)) = image[j];
            }
        }
        world.concepts.push_back(std::move(spec));
    }

    // Stratified split: concepts are ordered by (latent-radius band, latent
    // orthant, radius) and evenly spaced positions go to the test split. The
    // radius band keeps central and peripheral concepts in both splits; the
    // orthant spreads each band's picks across the manifold.
    const std::size_t n = cfg.n_concepts;
    std::vector<double> radius(n, 0.0);
    std::vector<std::uint64_t> orthant(n, 0);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
            double v = world.concepts[c].latent[j];
            radius[c] += v * v;
            if (v >= 0.0) orthant[c] |= (std::uint64_t{1} << j);
        }
    }
    std::vector<std::size_t> by_radius(n);
    std::iota(by_radius.begin(), by_radius.end(), std::size_t{0});
    std::sort(by_radius.begin(), by_radius.end(), [&](std::size_t a, std::size_t b) { return radius[a] < radius[b]; });
    constexpr std::size_t kBands = 5;
    std::vector<std::size_t> band(n);
    for (std::size_t rank = 0; rank < n; ++rank) band[by_radius[rank]] = rank * kBands / n;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::tie(band[a], orthant[a], radius[a]) < std::tie(band[b], orthant[b], radius[b]);
    });
    for (std::size_t pos = 0; pos < n; ++pos) {
        auto before = static_cast<long long>(std::floor(double(pos) * cfg.test_frac + 1e-9));
        auto after = static_cast<long long>(std::floor(double(pos + 1) * cfg.test_frac + 1e-9));
        world.concepts[order[pos]].split = after > before ? Split::test : Split::train;
    }

    world.source.samples = Tensor::zeros({cfg.source_pool_size, cfg.embed_dim});
    for (std::size_t i = 0; i < cfg.source_pool_size;) {
        Vec v = normalized(gaussian_vec(rng, cfg.embed_dim));
        double worst = -1.0;
        for (const auto& c : world.concepts) {
            double dot = 0.0;
            for (Eigen::Index j = 0; j < d; ++j) dot += v[j] * c.center[std::size_t(j)];
            worst = std::max(worst, dot);
        }
        if (worst >= cfg.source_cos_cap) continue;
        for (Eigen::Index j = 0; j < d; ++j) world.source.samples.at(i, std::size_t(j)) = v[j];
        ++i;
    }
    return world;
}

Tensor encode(const Tensor& samples, Encoding mode) {
    if (samples.rank() != 2 || samples.rows() == 0) throw DimensionError("encode: need a non-empty [N x d] matrix");
    const std::size_t d = samples.cols();
    std::vector<double> e(d, 0.0);
    if (mode.single) {
        if (*mode.single >= samples.rows()) throw std::out_of_range("encode: row index out of range");
        e = samples.row(*mode.single);
    } else {
        for (std::size_t r = 0; r < samples.rows(); ++r)
            for (std::size_t j = 0; j < d; ++j) e[j] += samples.at(r, j);
        for (auto& v : e) v /= double(samples.rows());
    }
    double norm = 0.0;
    for (double v : e) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw std::domain_error("encode: zero-norm mean embedding");
    for (auto& v : e) v /= norm;
    return Tensor::vector(std::move(e));
}

Tensor select_rows(const Tensor& samples, const std::vector<std::size_t>& rows) {
    const std::size_t d = samples.cols();
    Tensor out = Tensor::zeros({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= samples.rows()) throw std::out_of_range("select_rows: index out of range");
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = samples.at(rows[i], j);
    }
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine: zero-norm vector");
    return ab / std::sqrt(aa * bb);
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    std::sort(values.begin(), values.end());
    double pos = q * double(values.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = std::min(lo + 1, values.size() - 1);
    double frac = pos - double(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson: need two equal series of length >= 2");
    const double n = double(x.size());
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

DistanceReport concept_distance_stats(const std::vector<ConceptSpec>& concepts) {
    DistanceReport rep;
    const std::size_t n = concepts.size();
    std::size_t n_train = 0, n_test = 0;
    for (const auto& c : concepts) (c.split == Split::train ? n_train : n_test) += 1;
    if (n_train < 2 || n_test < 2) throw std::invalid_argument("distance stats need >= 2 concepts per split");

    rep.distances = Tensor::zeros({n, n});
    for (std::size_t a = 0; a < n; ++a) {
        rep.ids.push_back(concepts[a].id);
        rep.splits.push_back(concepts[a].split);
        for (std::size_t b = 0; b < n; ++b)
            rep.distances.at(a, b) = a == b ? 0.0 : 1.0 - cosine(concepts[a].center.data(), concepts[b].center.data());
    }

    std::vector<double> q50_train, q50_test;
    for (std::size_t a = 0; a < n; ++a) {
        std::vector<double> others;
        for (std::size_t b = 0; b < n; ++b)
            if (b != a) others.push_back(rep.distances.at(a, b));
        QuantileSummary q{percentile(others, 0.25), percentile(others, 0.5), percentile(others, 0.75)};
        rep.quantiles.push_back(q);
        (concepts[a].split == Split::train ? q50_train : q50_test).push_back(q.q50);
    }
    rep.median_q50_train = percentile(q50_train, 0.5);
    rep.median_q50_test = percentile(q50_test, 0.5);

    std::vector<double> means, mins;
    for (std::size_t a = 0; a < n; ++a) {
        if (concepts[a].split != Split::test) continue;
        DifficultyEntry e{concepts[a].id, 0.0, std::numeric_limits<double>::infinity()};
        for (std::size_t b = 0; b < n; ++b) {
            if (concepts[b].split != Split::train) continue;
            e.mean_distance += rep.distances.at(a, b);
            e.min_distance = std::min(e.min_distance, rep.distances.at(a, b));
        }
        e.mean_distance /= double(n_train);
        rep.difficulty.push_back(e);
        means.push_back(e.mean_distance);
        mins.push_back(e.min_distance);
    }
    rep.difficulty_pearson = pearson(means, mins);
    return rep;
}

nlohmann::json to_json(const WorldConfig& cfg) {
    return {{"embed_dim", cfg.embed_dim},
            {"latent_dim", cfg.latent_dim},
            {"n_concepts", cfg.n_concepts},
            {"samples_per_concept", cfg.samples_per_concept},
            {"sample_noise", cfg.sample_noise},
            {"modality_gap", cfg.modality_gap},
            {"seed", cfg.seed},
            {"train_frac", cfg.train_frac},
            {"test_frac", cfg.test_frac},
            {"source_pool_size", cfg.source_pool_size},
            {"source_cos_cap", cfg.source_cos_cap},
            {"cone_offset", cfg.cone_offset}};
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
    WorldConfig c;
    c.embed_dim = j.at("embed_dim");
    c.latent_dim = j.at("latent_dim");
    c.n_concepts = j.at("n_concepts");
    c.samples_per_concept = j.at("samples_per_concept");
    c.sample_noise = j.at("sample_noise");
    c.modality_gap = j.at("modality_gap");
    c.seed = j.at("seed");
    c.train_frac = j.at("train_frac");
    c.test_frac = j.at("test_frac");
    c.source_pool_size = j.at("source_pool_size");
    c.source_cos_cap = j.at("source_cos_cap");
    c.cone_offset = j.at("cone_offset");
    return c;
}

nlohmann::json to_json(const World& world) {
    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& c : world.concepts) {
        concepts.push_back({{"id", c.id},
                            {"split", to_string(c.split)},
                            {"latent", tensor_to_json(c.latent)},
                            {"center", tensor_to_json(c.center)},
                            {"samples_text", tensor_to_json(c.samples_text)},
                            {"samples_image", tensor_to_json(c.samples_image)}});
    }
    return {{"kind", "steer.world"},
            {"version", 1},
            {"seed", world.config.seed},
            {"config", to_json(world.config)},
            {"concepts", std::move(concepts)},
            {"source_pool", tensor_to_json(world.source.samples)}};
}

World world_from_json(const nlohmann::json& j) {
    if (j.value("kind", "") != "steer.world") throw std::runtime_error("not a world file");
    World w;
    w.config = world_config_from_json(j.at("config"));
    for (const auto& cj : j.at("concepts")) {
        ConceptSpec c;
        c.id = cj.at("id");
        c.split = split_from_string(cj.at("split"));
        c.latent = tensor_from_json(cj.at("latent"));
        c.center = tensor_from_json(cj.at("center"));
        c.samples_text = tensor_from_json(cj.at("samples_text"));
        c.samples_image = tensor_from_json(cj.at("samples_image"));
        w.concepts.push_back(std::move(c));
    }
    w.source.samples = tensor_from_json(j.at("source_pool"));
    return w;
}

}  // namespace steer
