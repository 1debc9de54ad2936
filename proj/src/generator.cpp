#include "steer/generator.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>

#include "steer/json_io.hpp"

namespace steer {

namespace {

std::shared_ptr<const Tensor> share(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

Tensor gaussian(std::mt19937_64& rng, Shape shape, double mean, double sd) {
    std::normal_distribution<double> normal(mean, sd);
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) v = normal(rng);
    return t;
}

const char* to_string(NormKind k) { return k == NormKind::layer ? "layer" : "none"; }
const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

}  // namespace

std::string site_name(std::size_t layer_index, NormKind norm) {
    return "block" + std::to_string(layer_index) + (norm == NormKind::layer ? ".norm" : ".linear");
}

void GeneratorConfig::validate() const {
    if (hidden_dims.size() < 2) throw std::invalid_argument("generator needs at least 2 hidden layers");
    if (input_dim < 2 || output_dim < 2) throw std::invalid_argument("generator dims must be >= 2");
    for (auto h : hidden_dims)
        if (h < 2) throw std::invalid_argument("generator dims must be >= 2");
    if (!(norm_eps > 0.0)) throw std::invalid_argument("norm_eps must be > 0");
}

Generator::Generator(std::vector<GeneratorLayer> layers, std::shared_ptr<const Tensor> readout_weight,
                     std::shared_ptr<const Tensor> readout_bias, double norm_eps, GeneratorConfig config)
    : config_(std::move(config)),
      layers_(std::move(layers)),
      readout_weight_(std::move(readout_weight)),
      readout_bias_(std::move(readout_bias)),
      norm_eps_(norm_eps) {
    if (layers_.empty()) throw std::invalid_argument("generator needs at least one layer");
    std::size_t width = layers_.front().weight->rows();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.weight->rank() != 2 || l.weight->rows() != width || l.bias->numel() != l.weight->cols())
            throw DimensionError("generator layer " + std::to_string(i) + " has inconsistent shapes");
        width = l.weight->cols();
        if (l.norm == NormKind::layer && (!l.gain || !l.shift || l.gain->numel() != width || l.shift->numel() != width))
            throw DimensionError("generator layer " + std::to_string(i) + " norm affine has wrong width");
        sites_.push_back({site_name(i, l.norm), i, width});
    }
    if (readout_weight_) {
        if (readout_weight_->rows() != width || !readout_bias_ || readout_bias_->numel() != readout_weight_->cols())
            throw DimensionError("generator readout has inconsistent shapes");
    }
}

const HookSite& Generator::site(const std::string& name) const {
    for (const auto& s : sites_)
        if (s.name == name) return s;
    throw std::out_of_range("generator has no site '" + name + "'");
}

std::size_t Generator::input_dim() const { return layers_.front().weight->rows(); }

std::size_t Generator::output_dim() const {
    return readout_weight_ ? readout_weight_->cols() : layers_.back().weight->cols();
}

std::size_t Generator::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) {
        n += l.weight->numel() + l.bias->numel();
        if (l.norm == NormKind::layer) n += l.gain->numel() + l.shift->numel();
    }
    if (readout_weight_) n += readout_weight_->numel() + readout_bias_->numel();
    return n;
}

void Generator::check(const InterventionParams& params) const {
    for (const auto& [name, p] : params.sites)
        if (site(name).width != p.w.numel())
            throw DimensionError("site '" + name + "' has width " + std::to_string(site(name).width) +
                                 ", intervention has " + std::to_string(p.w.numel()));
}

void Generator::check(const InterventionNodes& params) const {
    for (const auto& [name, p] : params.sites)
        if (site(name).width != p.w.numel() || p.b.numel() != p.w.numel())
            throw DimensionError("site '" + name + "' has width " + std::to_string(site(name).width) +
                                 ", intervention has " + std::to_string(p.w.numel()));
}

GraphCapture Generator::forward_graph(const ad::Node& inputs, const InterventionNodes* intervention) const {
    if (inputs.value().rank() != 2 || inputs.value().cols() != input_dim())
        throw DimensionError("generator input " + shape_str(inputs.shape()) + " vs input_dim " + std::to_string(input_dim()));
    if (intervention) check(*intervention);
    GraphCapture cap;
    ad::Node h = inputs;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        ad::Node z = ad::add_rows(ad::matmul(h, ad::Node::constant(l.weight)), ad::Node::constant(l.bias));
        if (l.norm == NormKind::layer) {
            z = ad::layer_norm_rows(z, norm_eps_);
            z = ad::add_rows(ad::mul_rows(z, ad::Node::constant(l.gain)), ad::Node::constant(l.shift));
        }
        const std::string& name = sites_[i].name;
        if (intervention && intervention->has_site(name)) z = apply(*intervention, name, z);
        cap.record[name] = z;
        h = l.activation == Activation::tanh ? ad::tanh(z) : z;
    }
    if (readout_weight_)
        h = ad::add_rows(ad::matmul(h, ad::Node::constant(readout_weight_)), ad::Node::constant(readout_bias_));
    cap.outputs = h;
    return cap;
}

ForwardResult Generator::forward_capture(const Tensor& inputs, const InterventionParams* intervention) const {
    std::optional<InterventionNodes> nodes;
    if (intervention) nodes = as_constants(*intervention);
    auto cap = forward_graph(ad::Node::constant(inputs), nodes ? &*nodes : nullptr);
    ForwardResult out;
    out.outputs = cap.outputs.value();
    for (const auto& [name, n] : cap.record) out.record[name] = n.value();
    return out;
}

Tensor Generator::forward(const Tensor& inputs, const InterventionParams* intervention) const {
    return forward_capture(inputs, intervention).outputs;
}

std::vector<double> Generator::flat_weights() const {
    std::vector<double> out;
    auto push = [&](const std::shared_ptr<const Tensor>& t) {
        if (t) out.insert(out.end(), t->data().begin(), t->data().end());
    };
    for (const auto& l : layers_) {
        push(l.weight);
        push(l.bias);
        push(l.gain);
        push(l.shift);
    }
    push(readout_weight_);
    push(readout_bias_);
    return out;
}

Generator build_generator(const GeneratorConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::vector<GeneratorLayer> layers;
    std::size_t in = cfg.input_dim;
    for (auto out : cfg.hidden_dims) {
        GeneratorLayer l;
        l.weight = share(gaussian(rng, {in, out}, 0.0, 1.0 / std::sqrt(double(in))));
        l.bias = share(gaussian(rng, {out}, 0.0, 0.1));
        l.norm = NormKind::layer;
        l.gain = share(gaussian(rng, {out}, 1.0, 0.1));
        l.shift = share(gaussian(rng, {out}, 0.0, 0.1));
        l.activation = Activation::tanh;
        layers.push_back(std::move(l));
        in = out;
    }
    auto rw = share(gaussian(rng, {in, cfg.output_dim}, 0.0, 1.0 / std::sqrt(double(in))));
    auto rb = share(gaussian(rng, {cfg.output_dim}, 0.0, 0.1));
    return Generator(std::move(layers), std::move(rw), std::move(rb), cfg.norm_eps, cfg);
}

Generator make_linear_chain(std::size_t width, const std::vector<double>& gains) {
    std::vector<GeneratorLayer> layers;
    for (double gain : gains) {
        GeneratorLayer l;
        Tensor w = Tensor::zeros({width, width});
        for (std::size_t i = 0; i < width; ++i) w.at(i, i) = gain;
        l.weight = share(std::move(w));
        l.bias = share(Tensor::zeros({width}));
        l.norm = NormKind::none;
        l.activation = Activation::identity;
        layers.push_back(std::move(l));
    }
    GeneratorConfig cfg;
    cfg.input_dim = width;
    cfg.hidden_dims.assign(gains.size(), width);
    cfg.output_dim = width;
    return Generator(std::move(layers), nullptr, nullptr, cfg.norm_eps, cfg);
}

nlohmann::json to_json(const Generator& g) {
    const auto& c = g.config();
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : g.layers()) {
        nlohmann::json lj{{"weight", tensor_to_json(*l.weight)},
                          {"bias", tensor_to_json(*l.bias)},
                          {"norm", to_string(l.norm)},
                          {"activation", to_string(l.activation)}};
        if (l.norm == NormKind::layer) {
            lj["gain"] = tensor_to_json(*l.gain);
            lj["shift"] = tensor_to_json(*l.shift);
        }
        layers.push_back(std::move(lj));
    }
    nlohmann::json j{{"kind", "steer.generator"},
                     {"config",
                      {{"input_dim", c.input_dim},
                       {"hidden_dims", c.hidden_dims},
                       {"output_dim", c.output_dim},
                       {"norm_eps", c.norm_eps},
                       {"seed", c.seed}}},
                     {"layers", std::move(layers)}};
    // Hand-assembled generators may have no readout; the last block is then the output.
    if (g.readout_weight()) {
        j["readout_weight"] = tensor_to_json(*g.readout_weight());
        j["readout_bias"] = tensor_to_json(*g.readout_bias());
    }
    return j;
}

Generator generator_from_json(const nlohmann::json& j) {
    if (j.value("kind", "") != "steer.generator") throw std::runtime_error("not a generator file");
    GeneratorConfig cfg;
    const auto& cj = j.at("config");
    cfg.input_dim = cj.at("input_dim");
    cfg.hidden_dims = cj.at("hidden_dims").get<std::vector<std::size_t>>();
    cfg.output_dim = cj.at("output_dim");
    cfg.norm_eps = cj.at("norm_eps");
    cfg.seed = cj.at("seed");
    std::vector<GeneratorLayer> layers;
    for (const auto& lj : j.at("layers")) {
        GeneratorLayer l;
        l.weight = share(tensor_from_json(lj.at("weight")));
        l.bias = share(tensor_from_json(lj.at("bias")));
        l.norm = lj.at("norm") == "layer" ? NormKind::layer : NormKind::none;
        l.activation = lj.at("activation") == "tanh" ? Activation::tanh : Activation::identity;
        if (l.norm == NormKind::layer) {
            l.gain = share(tensor_from_json(lj.at("gain")));
            l.shift = share(tensor_from_json(lj.at("shift")));
        }
        layers.push_back(std::move(l));
    }
    std::shared_ptr<const Tensor> rw, rb;
    if (j.contains("readout_weight")) {
        rw = share(tensor_from_json(j.at("readout_weight")));
        rb = share(tensor_from_json(j.at("readout_bias")));
    }
    return Generator(std::move(layers), std::move(rw), std::move(rb), cfg.norm_eps, cfg);
}

}  // namespace steer
