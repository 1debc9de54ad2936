#include "steer/hypernet.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "steer/json_io.hpp"

namespace steer {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
MatMap as_mat(Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

// Fixed parameter slots; decoder layers follow in pairs (weight, bias).
constexpr std::size_t kAdapterW = 0, kAdapterGain = 1, kAdapterShift = 2, kKey = 3, kShape = 4, kStateKey = 5,
                      kDecoder = 6;
constexpr double kAdapterNormEps = 1e-5;

std::size_t n_decoder_layers(const HypernetConfig& cfg) { return cfg.decoder_hidden.size() + 1; }

struct QueryIndex {
    std::vector<std::size_t> zeros, site, shape, state;
};

QueryIndex query_index(const HypernetConfig& cfg) {
    QueryIndex q;
    for (std::size_t i = 0; i < cfg.sites.size(); ++i)
        for (std::size_t s = 0; s < 2; ++s) {
            q.zeros.push_back(0);
            q.site.push_back(i);
            q.shape.push_back(cfg.shape_index(i));
            q.state.push_back(s);
        }
    return q;
}

void add_bias_rows(Tensor& x, const Tensor& b) {
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t j = 0; j < x.cols(); ++j) x.at(r, j) += b[j];
}

Tensor gaussian(std::mt19937_64& rng, Shape shape, double sd) {
    std::normal_distribution<double> normal(0.0, sd);
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) v = normal(rng);
    return t;
}

Tensor embedding_row_matrix(const Tensor& e, std::size_t encoder_dim) {
    if (e.numel() != encoder_dim || (e.rank() == 2 && e.rows() != 1) || e.rank() == 0)
        throw DimensionError("hypernet: embedding " + shape_str(e.shape()) + " vs encoder_dim " +
                             std::to_string(encoder_dim));
    return Tensor::matrix(1, encoder_dim, e.values());
}

}  // namespace

std::size_t HypernetConfig::max_out() const {
    std::size_t m = 0;
    for (const auto& s : sites) m = std::max(m, s.width);
    return m;
}

std::vector<std::size_t> HypernetConfig::distinct_widths() const {
    std::vector<std::size_t> out;
    for (const auto& s : sites)
        if (std::find(out.begin(), out.end(), s.width) == out.end()) out.push_back(s.width);
    return out;
}

std::size_t HypernetConfig::shape_index(std::size_t site) const {
    auto widths = distinct_widths();
    return static_cast<std::size_t>(std::find(widths.begin(), widths.end(), sites.at(site).width) - widths.begin());
}

void HypernetConfig::validate() const {
    if (encoder_dim == 0 || adapter_out == 0 || key_dim == 0 || shape_dim == 0 || state_key_dim == 0)
        throw std::invalid_argument("hypernet dims must be positive");
    if (sites.empty()) throw std::invalid_argument("hypernet needs at least one site");
    for (auto h : decoder_hidden)
        if (h == 0) throw std::invalid_argument("hypernet decoder widths must be positive");
    for (const auto& s : sites)
        if (s.width == 0) throw std::invalid_argument("hypernet site '" + s.name + "' has zero width");
}

std::size_t HypernetState::index(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::out_of_range("hypernet has no parameter '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
}

std::size_t HypernetState::param_count() const {
    std::size_t n = 0;
    for (const auto& p : live) n += p->numel();
    return n;
}

HypernetState init_hypernet(const HypernetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    HypernetState st;
    st.config = cfg;
    auto add = [&](std::string name, Tensor t) {
        st.names.push_back(std::move(name));
        st.live.push_back(std::make_shared<Tensor>(std::move(t)));
    };
    add("adapter.weight", gaussian(rng, {cfg.encoder_dim, cfg.adapter_out}, 1.0 / std::sqrt(double(cfg.encoder_dim))));
    add("adapter.norm_gain", Tensor::filled({cfg.adapter_out}, 1.0));
    add("adapter.norm_shift", Tensor::zeros({cfg.adapter_out}));
    add("embed.key", gaussian(rng, {cfg.sites.size(), cfg.key_dim}, 1.0));
    add("embed.shape", gaussian(rng, {cfg.distinct_widths().size(), cfg.shape_dim}, 1.0));
    add("embed.state_key", gaussian(rng, {2, cfg.state_key_dim}, 1.0));
    std::size_t in = cfg.adapter_out + cfg.query_dim();
    for (std::size_t l = 0; l < cfg.decoder_hidden.size(); ++l) {
        const std::size_t out = cfg.decoder_hidden[l];
        add("decoder." + std::to_string(l) + ".weight", gaussian(rng, {in, out}, std::sqrt(2.0 / double(in))));
        add("decoder." + std::to_string(l) + ".bias", Tensor::zeros({out}));
        in = out;
    }
    const std::string last = "decoder." + std::to_string(cfg.decoder_hidden.size());
    add(last + ".weight", Tensor::zeros({in, cfg.max_out()}));
    add(last + ".bias", Tensor::zeros({cfg.max_out()}));
    for (const auto& p : st.live) st.shadow.push_back(std::make_shared<Tensor>(*p));
    return st;
}

std::vector<ad::Node> as_leaves(const HypernetState& state, Weights which) {
    const auto& src = which == Weights::live ? state.live : state.shadow;
    std::vector<ad::Node> out;
    out.reserve(src.size());
    for (const auto& p : src) out.push_back(ad::Node::leaf(std::shared_ptr<const Tensor>(p)));
    return out;
}

InterventionNodes predict_graph(const HypernetConfig& cfg, const std::vector<ad::Node>& params, const ad::Node& embedding) {
    if (params.size() != kDecoder + 2 * n_decoder_layers(cfg))
        throw std::invalid_argument("hypernet: parameter list does not match config");
    ad::Node e = embedding;
    if (e.value().rank() != 2) e = ad::Node::constant(embedding_row_matrix(embedding.value(), cfg.encoder_dim));
    if (e.value().rows() != 1 || e.value().cols() != cfg.encoder_dim)
        throw DimensionError("hypernet: embedding " + shape_str(e.shape()) + " vs encoder_dim " +
                             std::to_string(cfg.encoder_dim));

    const QueryIndex q = query_index(cfg);
    ad::Node task = ad::add_rows(
        ad::mul_rows(ad::layer_norm_rows(ad::matmul(e, params[kAdapterW]), kAdapterNormEps), params[kAdapterGain]),
        params[kAdapterShift]);
    ad::Node x = ad::concat_cols(
        ad::concat_cols(ad::concat_cols(ad::gather_rows(task, q.zeros), ad::gather_rows(params[kKey], q.site)),
                        ad::gather_rows(params[kShape], q.shape)),
        ad::gather_rows(params[kStateKey], q.state));
    const std::size_t layers = n_decoder_layers(cfg);
    for (std::size_t l = 0; l < layers; ++l) {
        x = ad::add_rows(ad::matmul(x, params[kDecoder + 2 * l]), params[kDecoder + 2 * l + 1]);
        if (l + 1 < layers) x = ad::relu(x);
    }

    InterventionNodes out;
    const ad::Node one = ad::Node::constant(Tensor::scalar(1.0));
    for (std::size_t i = 0; i < cfg.sites.size(); ++i) {
        const auto& s = cfg.sites[i];
        out.sites[s.name] = {ad::add(one, ad::row_slice(x, 2 * i, 0, s.width)), ad::row_slice(x, 2 * i + 1, 0, s.width)};
    }
    out.lambda = ad::Node::constant(Tensor::scalar(1.0));
    return out;
}

InterventionParams predict(const HypernetState& state, const Tensor& embedding, Weights which) {
    const auto& cfg = state.config;
    const auto& p = which == Weights::live ? state.live : state.shadow;
    Tensor e = embedding_row_matrix(embedding, cfg.encoder_dim);

    Tensor task = Tensor::zeros({1, cfg.adapter_out});
    as_mat(task).noalias() = as_mat(e) * as_mat(*p[kAdapterW]);
    {
        const double d = static_cast<double>(cfg.adapter_out);
        double mu = 0.0, var = 0.0;
        for (double v : task.data()) mu += v;
        mu /= d;
        for (double v : task.data()) var += (v - mu) * (v - mu);
        var /= d;
        const double inv_sigma = 1.0 / std::sqrt(var + kAdapterNormEps);
        for (std::size_t j = 0; j < cfg.adapter_out; ++j)
            task[j] = (task[j] - mu) * inv_sigma * (*p[kAdapterGain])[j] + (*p[kAdapterShift])[j];
    }

    const QueryIndex q = query_index(cfg);
    const std::size_t nq = cfg.n_queries();
    Tensor x = Tensor::zeros({nq, cfg.adapter_out + cfg.query_dim()});
    for (std::size_t r = 0; r < nq; ++r) {
        auto row = x.data().subspan(r * x.cols(), x.cols());
        auto put = [&, off = std::size_t{0}](const Tensor& table, std::size_t idx) mutable {
            for (std::size_t j = 0; j < table.cols(); ++j) row[off + j] = table.at(idx, j);
            off += table.cols();
        };
        put(task, 0);
        put(*p[kKey], q.site[r]);
        put(*p[kShape], q.shape[r]);
        put(*p[kStateKey], q.state[r]);
    }
    const std::size_t layers = n_decoder_layers(cfg);
    for (std::size_t l = 0; l < layers; ++l) {
        const Tensor& w = *p[kDecoder + 2 * l];
        Tensor y = Tensor::zeros({nq, w.cols()});
        as_mat(y).noalias() = as_mat(x) * as_mat(w);
        add_bias_rows(y, *p[kDecoder + 2 * l + 1]);
        if (l + 1 < layers)
            for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
        x = std::move(y);
    }

    InterventionParams out;
    out.lambda = 1.0;
    out.provenance = "hypernet";
    for (std::size_t i = 0; i < cfg.sites.size(); ++i) {
        const auto& s = cfg.sites[i];
        SiteParams sp{Tensor::zeros({s.width}), Tensor::zeros({s.width})};
        for (std::size_t j = 0; j < s.width; ++j) {
            sp.w[j] = 1.0 + x.at(2 * i, j);
            sp.b[j] = x.at(2 * i + 1, j);
        }
        out.sites[s.name] = std::move(sp);
    }
    return out;
}

void ema_update(HypernetState& state, double decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema decay must be in [0, 1)");
    for (std::size_t k = 0; k < state.live.size(); ++k) {
        auto s = state.shadow[k]->data();
        auto l = state.live[k]->data();
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = decay * s[i] + (1.0 - decay) * l[i];
    }
}

std::map<std::string, std::size_t> count_params(const HypernetState& state) {
    std::map<std::string, std::size_t> out{{"Input adapters", 0},
                                           {"Layer embeddings", 0},
                                           {"Decoding projection (MLP)", 0},
                                           {"Single linear expert", 0}};
    const std::size_t final_layer = kDecoder + 2 * (n_decoder_layers(state.config) - 1);
    for (std::size_t k = 0; k < state.live.size(); ++k) {
        const std::size_t n = state.live[k]->numel();
        if (k <= kAdapterShift) out["Input adapters"] += n;
        else if (k < kDecoder) out["Layer embeddings"] += n;
        else if (k < final_layer) out["Decoding projection (MLP)"] += n;
        else out["Single linear expert"] += n;
    }
    std::size_t total = 0;
    for (const auto& [k, v] : out) total += v;
    out["Total"] = total;
    return out;
}

nlohmann::json to_json(const HypernetConfig& cfg) {
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& s : cfg.sites) sites.push_back({{"name", s.name}, {"layer_index", s.layer_index}, {"width", s.width}});
    return {{"encoder_dim", cfg.encoder_dim}, {"adapter_out", cfg.adapter_out}, {"key_dim", cfg.key_dim},
            {"shape_dim", cfg.shape_dim},     {"state_key_dim", cfg.state_key_dim},
            {"decoder_hidden", cfg.decoder_hidden}, {"sites", sites}};
}

HypernetConfig hypernet_config_from_json(const nlohmann::json& j) {
    HypernetConfig cfg;
    cfg.encoder_dim = j.at("encoder_dim");
    cfg.adapter_out = j.at("adapter_out");
    cfg.key_dim = j.at("key_dim");
    cfg.shape_dim = j.at("shape_dim");
    cfg.state_key_dim = j.at("state_key_dim");
    cfg.decoder_hidden = j.at("decoder_hidden").get<std::vector<std::size_t>>();
    for (const auto& s : j.at("sites")) cfg.sites.push_back({s.at("name"), s.at("layer_index"), s.at("width")});
    cfg.validate();
    return cfg;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
    auto p = manifest;
    return p.replace_extension(".bin");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const HypernetState& state) {
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t k = 0; k < state.names.size(); ++k)
        tensors.push_back({{"name", state.names[k]}, {"shape", state.live[k]->shape()}});
    std::vector<std::string> sections{"live", "ema"};
    if (!state.optimizer.m.empty()) {
        sections.push_back("adam_m");
        sections.push_back("adam_v");
    }
    nlohmann::json manifest = {{"kind", "steer.hypernet"},
                               {"config", to_json(state.config)},
                               {"step", state.step},
                               {"optimizer_step", state.optimizer.step},
                               {"dtype", "float64-le"},
                               {"data", blob_path(path).filename().string()},
                               {"sections", sections},
                               {"tensors", tensors}};
    write_json(path, manifest);

    std::ofstream out(blob_path(path), std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + blob_path(path).string());
    auto dump = [&](const Tensor& t) {
        out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    };
    for (const auto& p : state.live) dump(*p);
    for (const auto& p : state.shadow) dump(*p);
    for (const auto& t : state.optimizer.m) dump(t);
    for (const auto& t : state.optimizer.v) dump(t);
    if (!out) throw std::runtime_error("failed writing " + blob_path(path).string());
}

HypernetState load_checkpoint(const std::filesystem::path& path) {
    const nlohmann::json manifest = read_json(path);
    if (manifest.value("kind", "") != "steer.hypernet") throw std::runtime_error(path.string() + " is not a hypernet checkpoint");
    HypernetState st;
    st.config = hypernet_config_from_json(manifest.at("config"));
    st.step = manifest.at("step");
    const auto sections = manifest.at("sections").get<std::vector<std::string>>();

    std::ifstream in(path.parent_path() / manifest.at("data").get<std::string>(), std::ios::binary);
    if (!in) throw std::runtime_error("missing checkpoint data next to " + path.string());
    auto read = [&](const Shape& shape) {
        Tensor t = Tensor::zeros(shape);
        in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint data for " + path.string());
        return t;
    };
    std::vector<Shape> shapes;
    for (const auto& t : manifest.at("tensors")) {
        st.names.push_back(t.at("name"));
        shapes.push_back(t.at("shape").get<Shape>());
    }
    for (const auto& s : shapes) st.live.push_back(std::make_shared<Tensor>(read(s)));
    for (const auto& s : shapes) st.shadow.push_back(std::make_shared<Tensor>(read(s)));
    if (sections.size() == 4) {
        for (const auto& s : shapes) st.optimizer.m.push_back(read(s));
        for (const auto& s : shapes) st.optimizer.v.push_back(read(s));
        st.optimizer.step = manifest.at("optimizer_step");
    }
    in.peek();
    if (!in.eof()) throw std::runtime_error("checkpoint data for " + path.string() + " has trailing bytes");

    // Shapes must agree with what the config implies.
    HypernetState fresh = init_hypernet(st.config, 0);
    if (fresh.names != st.names) throw std::runtime_error("checkpoint parameter list does not match its config");
    for (std::size_t k = 0; k < shapes.size(); ++k)
        if (fresh.live[k]->shape() != shapes[k])
            throw std::runtime_error("checkpoint tensor '" + st.names[k] + "' has shape " + shape_str(shapes[k]));
    return st;
}

}  // namespace steer
