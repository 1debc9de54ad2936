#include "steer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

namespace steer {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kDrawTag = 0x64726177;     // "draw"
constexpr std::uint64_t kShuffleTag = 0x73687566;  // "shuf"

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t id, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(tag)};
    return std::mt19937_64(seq);
}

std::vector<std::size_t> with_replacement(std::mt19937_64& rng, std::size_t n, std::size_t k) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> out(k);
    for (auto& v : out) v = pick(rng);
    return out;
}

std::vector<std::size_t> permutation(std::mt19937_64& rng, std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::shuffle(p.begin(), p.end(), rng);
    return p;
}

std::ofstream open_csv(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
    if (!(final_lr_factor > 0.0) || final_lr_factor > 1.0) throw std::invalid_argument("final_lr_factor must be in (0, 1]");
    if (n_workers == 0) throw std::invalid_argument("n_workers must be >= 1");
    if (concepts_per_step == 0) throw std::invalid_argument("concepts_per_step must be >= 1");
    if (cond_subset == 0 || target_subset == 0 || source_subset == 0) throw std::invalid_argument("subset sizes must be >= 1");
    if (source_subset != target_subset)
        throw std::invalid_argument("source_subset must equal target_subset (the loss compares equal-size samples)");
    if (use_ema && !(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("ema_decay must be in [0, 1)");
    loss.validate();
}

ConceptDraw draw_subsets(const World& world, const ConceptSpec& spec, const TrainConfig& cfg, std::uint64_t epoch) {
    const std::size_t n = spec.samples_text.rows();
    const std::size_t m = world.source.samples.rows();
    if (n == 0 || m == 0) throw std::invalid_argument("concept " + std::to_string(spec.id) + " has no samples to draw");
    auto rng = make_rng(cfg.seed, epoch, spec.id, kDrawTag);
    ConceptDraw d;
    if (cfg.cond_subset + cfg.target_subset <= n) {
        auto p = permutation(rng, n);
        d.cond_rows.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(cfg.cond_subset));
        d.target_rows.assign(p.begin() + static_cast<std::ptrdiff_t>(cfg.cond_subset),
                             p.begin() + static_cast<std::ptrdiff_t>(cfg.cond_subset + cfg.target_subset));
    } else {
        d.cond_rows = with_replacement(rng, n, cfg.cond_subset);
        d.target_rows = with_replacement(rng, n, cfg.target_subset);
    }
    if (cfg.source_subset <= m) {
        auto p = permutation(rng, m);
        d.source_rows.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(cfg.source_subset));
    } else {
        d.source_rows = with_replacement(rng, m, cfg.source_subset);
    }
    return d;
}

StepResult train_step(const World& world, const Generator& g, const HypernetState& state, const ConceptSpec& spec,
                      const TrainConfig& cfg, std::uint64_t epoch) {
    if (spec.split != Split::train)
        throw std::invalid_argument("concept " + std::to_string(spec.id) + " is not in the train split");
    const ConceptDraw d = draw_subsets(world, spec, cfg, epoch);
    const Tensor e = encode(select_rows(spec.samples_text, d.cond_rows));
    const ActivationRecord target = g.forward_capture(select_rows(spec.samples_text, d.target_rows)).record;

    auto leaves = as_leaves(state, Weights::live);
    InterventionNodes theta = predict_graph(state.config, leaves, ad::Node::constant(e));
    ad::Node src = ad::Node::constant(select_rows(world.source.samples, d.source_rows));
    ad::Node loss = alignment_loss(g.forward_graph(src, &theta).record, target, cfg.loss);
    ad::backward(loss);

    StepResult out;
    out.loss = loss.item();
    out.grads.reserve(leaves.size());
    for (const auto& l : leaves) out.grads.push_back(l.grad());
    return out;
}

std::vector<Tensor> average_gradients(const std::vector<StepResult>& results) {
    if (results.empty()) throw std::invalid_argument("no gradients to average");
    std::vector<Tensor> avg = results.front().grads;
    for (std::size_t r = 1; r < results.size(); ++r)
        for (std::size_t k = 0; k < avg.size(); ++k) {
            auto dst = avg[k].data();
            auto src = results[r].grads[k].data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
    const double inv = 1.0 / static_cast<double>(results.size());
    for (auto& t : avg)
        for (auto& v : t.data()) v *= inv;
    return avg;
}

std::size_t steps_per_epoch(const World& world, const TrainConfig& cfg) {
    const std::size_t n = world.ids_in(Split::train).size();
    return (n + cfg.concepts_per_step - 1) / cfg.concepts_per_step;
}

TrainLog train(const World& world, const Generator& g, HypernetState& state, const TrainConfig& cfg,
               const EpochCallback& on_epoch) {
    cfg.validate();
    const auto ids = world.ids_in(Split::train);
    if (ids.empty()) throw std::invalid_argument("world has no training concepts");
    if (state.config.encoder_dim != world.config.embed_dim)
        throw DimensionError("hypernet encoder_dim does not match the world's embedding size");

    TrainLog log;
    log.steps_per_epoch = steps_per_epoch(world, cfg);
    const std::size_t total = cfg.epochs * log.steps_per_epoch;
    if (state.step % log.steps_per_epoch != 0 || state.step > total)
        throw std::invalid_argument("state step " + std::to_string(state.step) + " is not an epoch boundary of this run");
    log.first_epoch = state.step / log.steps_per_epoch;

    const auto run_start = Clock::now();
    for (std::size_t epoch = log.first_epoch; epoch < cfg.epochs; ++epoch) {
        const auto epoch_start = Clock::now();
        auto order = ids;
        auto rng = make_rng(cfg.seed, epoch, 0, kShuffleTag);
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        for (std::size_t s = 0; s < log.steps_per_epoch; ++s) {
            const std::size_t begin = s * cfg.concepts_per_step;
            const std::size_t end = std::min(order.size(), begin + cfg.concepts_per_step);
            const std::size_t k = end - begin;
            std::vector<StepResult> results(k);
            std::vector<std::exception_ptr> errors(k);
            auto work = [&](std::size_t w, std::size_t stride) {
                for (std::size_t i = w; i < k; i += stride) {
                    try {
                        results[i] = train_step(world, g, state, world.concept_by_id(order[begin + i]), cfg, epoch);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            };
            const std::size_t n_threads = std::min(cfg.n_workers, k);
            if (n_threads <= 1) {
                work(0, 1);
            } else {
                std::vector<std::jthread> pool;
                for (std::size_t w = 0; w < n_threads; ++w) pool.emplace_back(work, w, n_threads);
            }
            for (std::size_t i = 0; i < k; ++i) {
                if (!errors[i]) continue;
                try {
                    std::rethrow_exception(errors[i]);
                } catch (const std::exception& e) {
                    throw std::runtime_error("epoch " + std::to_string(epoch) + ", step " + std::to_string(state.step) +
                                             ", concept " + std::to_string(order[begin + i]) + ": " + e.what());
                }
            }

            auto grads = average_gradients(results);
            std::vector<ParamRef> refs;
            for (std::size_t p = 0; p < grads.size(); ++p) refs.push_back({state.names[p], state.live[p].get(), &grads[p]});
            const double lr = cosine_lr(state.step, total - 1, cfg.lr, cfg.final_lr_factor);
            try {
                adamw_step(refs, state.optimizer, lr, cfg.adamw);
            } catch (const std::exception& e) {
                throw std::runtime_error("epoch " + std::to_string(epoch) + ", step " + std::to_string(state.step) + ": " +
                                         e.what());
            }
            if (cfg.use_ema) ema_update(state, cfg.ema_decay);
            state.step += 1;
            log.step_lr.push_back(lr);
            for (const auto& r : results) loss_sum += r.loss;
        }
        log.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
        log.epoch_seconds.push_back(std::chrono::duration<double>(Clock::now() - epoch_start).count());
        if (on_epoch) on_epoch(epoch, state);
    }
    log.wall_seconds = std::chrono::duration<double>(Clock::now() - run_start).count();
    return log;
}

HypernetConfig hypernet_config_for(const World& world, const Generator& g) {
    HypernetConfig cfg;
    cfg.encoder_dim = world.config.embed_dim;
    cfg.sites = g.sites();
    return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
    return {{"epochs", cfg.epochs},
            {"lr", cfg.lr},
            {"beta1", cfg.adamw.beta1},
            {"beta2", cfg.adamw.beta2},
            {"eps", cfg.adamw.eps},
            {"weight_decay", cfg.adamw.weight_decay},
            {"final_lr_factor", cfg.final_lr_factor},
            {"ema_decay", cfg.ema_decay},
            {"use_ema", cfg.use_ema},
            {"n_workers", cfg.n_workers},
            {"concepts_per_step", cfg.concepts_per_step},
            {"cond_subset", cfg.cond_subset},
            {"target_subset", cfg.target_subset},
            {"source_subset", cfg.source_subset},
            {"p", cfg.loss.p},
            {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.adamw.beta1 = j.value("beta1", cfg.adamw.beta1);
    cfg.adamw.beta2 = j.value("beta2", cfg.adamw.beta2);
    cfg.adamw.eps = j.value("eps", cfg.adamw.eps);
    cfg.adamw.weight_decay = j.value("weight_decay", cfg.adamw.weight_decay);
    cfg.final_lr_factor = j.value("final_lr_factor", cfg.final_lr_factor);
    cfg.ema_decay = j.value("ema_decay", cfg.ema_decay);
    cfg.use_ema = j.value("use_ema", cfg.use_ema);
    cfg.n_workers = j.value("n_workers", cfg.n_workers);
    cfg.concepts_per_step = j.value("concepts_per_step", cfg.concepts_per_step);
    cfg.cond_subset = j.value("cond_subset", cfg.cond_subset);
    cfg.target_subset = j.value("target_subset", cfg.target_subset);
    cfg.source_subset = j.value("source_subset", cfg.source_subset);
    cfg.loss.p = j.value("p", cfg.loss.p);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.validate();
    return cfg;
}

void write_train_csv(const std::filesystem::path& path, const TrainLog& log) {
    auto out = open_csv(path);
    out << "epoch,mean_loss,lr\n";
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
        const std::size_t last = (e + 1) * log.steps_per_epoch - 1;
        out << log.first_epoch + e << ',' << log.epoch_loss[e] << ',' << log.step_lr.at(last) << '\n';
    }
}

void write_lr_csv(const std::filesystem::path& path, const TrainLog& log) {
    auto out = open_csv(path);
    out << "step,lr\n";
    const std::size_t first = log.first_epoch * log.steps_per_epoch;
    for (std::size_t s = 0; s < log.step_lr.size(); ++s) out << first + s << ',' << log.step_lr[s] << '\n';
}

void write_timing_csv(const std::filesystem::path& path, const TrainLog& log) {
    auto out = open_csv(path);
    out << "epoch,seconds\n";
    for (std::size_t e = 0; e < log.epoch_seconds.size(); ++e)
        out << log.first_epoch + e << ',' << log.epoch_seconds[e] << '\n';
    out << "total," << log.wall_seconds << '\n';
}

}  // namespace steer
