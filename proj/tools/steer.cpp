#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "steer/estimators.hpp"
#include "steer/eval.hpp"
#include "steer/json_io.hpp"
#include "steer/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace steer;

namespace {

json generator_config_json(const GeneratorConfig& c) {
    return {{"input_dim", c.input_dim}, {"hidden_dims", c.hidden_dims}, {"output_dim", c.output_dim},
            {"norm_eps", c.norm_eps},   {"seed", c.seed}};
}

GeneratorConfig generator_config_from(const json& j) {
    GeneratorConfig c;
    c.input_dim = j.at("input_dim");
    c.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
    c.output_dim = j.at("output_dim");
    c.norm_eps = j.at("norm_eps");
    c.seed = j.at("seed");
    return c;
}

// Hypernet sizes the user may override; encoder width and sites come from the world and generator.
json hypernet_sizes_json(const HypernetConfig& c) {
    return {{"adapter_out", c.adapter_out},
            {"key_dim", c.key_dim},
            {"shape_dim", c.shape_dim},
            {"state_key_dim", c.state_key_dim},
            {"decoder_hidden", c.decoder_hidden}};
}

HypernetConfig hypernet_config(const World& world, const Generator& g, const json& sizes) {
    HypernetConfig c = hypernet_config_for(world, g);
    c.adapter_out = sizes.at("adapter_out");
    c.key_dim = sizes.at("key_dim");
    c.shape_dim = sizes.at("shape_dim");
    c.state_key_dim = sizes.at("state_key_dim");
    c.decoder_hidden = sizes.at("decoder_hidden").get<std::vector<std::size_t>>();
    c.validate();
    return c;
}

json eval_json(const EvalConfig& c) {
    json splits = json::array();
    for (auto s : c.splits) splits.push_back(to_string(s));
    return {{"seed", c.seed},
            {"n_workers", c.n_workers},
            {"weights", c.weights == Weights::ema ? "ema" : "live"},
            {"splits", splits},
            {"methods", {"caa", "iti", "linact", "lineas"}},
            {"shots", default_shots()},
            {"lambda_grid", default_lambda_grid()},
            {"p", c.loss.p}};
}

EvalConfig eval_config_from(const json& j, const json& estimator) {
    EvalConfig c;
    c.seed = j.at("seed");
    c.n_workers = j.at("n_workers");
    const std::string w = j.at("weights");
    if (w != "ema" && w != "live") throw std::invalid_argument("weights must be 'ema' or 'live'");
    c.weights = w == "ema" ? Weights::ema : Weights::live;
    c.splits.clear();
    for (const auto& s : j.at("splits")) c.splits.push_back(split_from_string(s));
    c.estimator = estimator_config_from_json(estimator);
    c.loss.p = j.at("p");
    c.validate();
    return c;
}

json default_config() {
    return {{"out", "out"},
            {"world", to_json(WorldConfig{})},
            {"generator", generator_config_json(GeneratorConfig{})},
            {"hypernet", hypernet_sizes_json(HypernetConfig{})},
            {"estimator", to_json(EstimatorConfig{})},
            {"train", to_json(TrainConfig{})},
            {"eval", eval_json(EvalConfig{})}};
}

// Command-line overrides collected before the subcommand runs.
struct Overrides {
    std::string config_file;
    std::string out;
    std::optional<std::uint64_t> seed;
    json patch = json::object();

    template <class T>
    void set(const std::optional<T>& v, const std::string& section, const std::string& key) {
        if (v) patch[section][key] = *v;
    }
};

json resolve(const Overrides& o) {
    json cfg = default_config();
    if (!o.config_file.empty()) {
        json file = read_json(o.config_file);
        for (const auto& [k, v] : file.items())
            if (!cfg.contains(k)) throw std::invalid_argument("config file: unknown section '" + k + "'");
        cfg.merge_patch(file);
    }
    if (o.seed)
        for (const char* s : {"world", "generator", "train", "eval"}) cfg[s]["seed"] = *o.seed;
    cfg.merge_patch(o.patch);
    if (!o.out.empty()) cfg["out"] = o.out;
    // The generator reads the world's embeddings.
    cfg["generator"]["input_dim"] = cfg["world"]["embed_dim"];
    return cfg;
}

fs::path out_dir(const json& cfg) {
    fs::path p = cfg.at("out").get<std::string>();
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void echo_config(const fs::path& dir, const std::string& command, const json& cfg) {
    write_json(dir / ("config-" + command + ".json"), cfg);
}

struct Loaded {
    World world;
    Generator g;
};

Loaded load_world(const fs::path& dir) {
    const fs::path wp = dir / "world.json", gp = dir / "generator.json";
    if (!fs::exists(wp) || !fs::exists(gp))
        throw std::runtime_error("no world in " + dir.string() + " (run the 'world' command first)");
    return {world_from_json(read_json(wp)), generator_from_json(read_json(gp))};
}

fs::path checkpoint_path(const fs::path& dir, const std::string& flag) {
    if (!flag.empty()) {
        if (!fs::exists(flag)) throw std::runtime_error("missing checkpoint " + flag);
        return flag;
    }
    const fs::path latest = dir / "latest-checkpoint.txt";
    if (!fs::exists(latest)) throw std::runtime_error("missing checkpoint: train first or pass --checkpoint");
    std::ifstream in(latest);
    std::string name;
    std::getline(in, name);
    if (!fs::exists(dir / name)) throw std::runtime_error("missing checkpoint " + (dir / name).string());
    return dir / name;
}

std::string ckpt_name(std::size_t step) { return "ckpt-" + std::to_string(step) + ".json"; }

int cmd_world(const json& cfg) {
    const fs::path dir = out_dir(cfg);
    const WorldConfig wc = world_config_from_json(cfg.at("world"));
    const GeneratorConfig gc = generator_config_from(cfg.at("generator"));
    World world = build_world(wc);
    Generator g = build_generator(gc);
    write_json(dir / "world.json", to_json(world));
    write_json(dir / "generator.json", to_json(g));
    echo_config(dir, "world", cfg);

    const auto n_train = world.ids_in(Split::train).size(), n_test = world.ids_in(Split::test).size();
    const auto dist = concept_distance_stats(world.concepts);
    std::ostringstream s;
    s << "concepts: " << world.concepts.size() << "  train: " << n_train << " ("
      << double(n_train) / double(world.concepts.size()) << ")  test: " << n_test << " ("
      << double(n_test) / double(world.concepts.size()) << ")\n"
      << "generator sites: " << g.sites().size() << "  parameters: " << g.param_count() << '\n'
      << format_distances(dist);
    write_text(dir / "world-summary.txt", s.str());
    std::cout << s.str();
    return 0;
}

int cmd_fit(const json& cfg, const std::string& method, std::size_t concept_id) {
    const fs::path dir = out_dir(cfg);
    auto [world, g] = load_world(dir);
    EstimatorConfig ec = estimator_config_from_json(cfg.at("estimator"));
    ec.method = method_from_string(method);
    const auto& spec = world.concept_by_id(concept_id);
    const SourceSplit src = split_source(world, cfg.at("eval").at("seed"));
    FitReport rep = fit_concept(g, src.fit, spec.samples_text, ec);

    json echo = cfg;
    echo["fit"] = {{"method", method}, {"concept", concept_id}};
    echo_config(dir, "fit", echo);
    const std::string stem = method + "-" + std::to_string(concept_id);
    write_json(dir / ("params-" + stem + ".json"), to_json(rep.params));
    write_json(dir / ("fit-" + stem + ".json"), to_json(rep));
    write_json(dir / ("fit-" + stem + ".timing.json"), {{"wall_seconds", rep.wall_seconds}});
    std::cout << "concept " << concept_id << " (" << to_string(spec.split) << "), " << method << ": loss "
              << rep.loss_before() << " -> " << rep.loss_after() << " in " << rep.wall_seconds << " s\n";
    return 0;
}

int cmd_train(const json& cfg, const std::string& resume, std::size_t every) {
    const fs::path dir = out_dir(cfg);
    auto [world, g] = load_world(dir);
    const TrainConfig tc = train_config_from_json(cfg.at("train"));
    const HypernetConfig hc = hypernet_config(world, g, cfg.at("hypernet"));

    HypernetState state = [&] {
        if (resume.empty()) return init_hypernet(hc, tc.seed);
        if (!fs::exists(resume)) throw std::runtime_error("missing checkpoint " + resume);
        HypernetState s = load_checkpoint(resume);
        if (!(s.config == hc))
            throw std::runtime_error("checkpoint " + resume + " was trained with a different hypernet/world configuration");
        return s;
    }();
    echo_config(dir, "train", cfg);

    auto save = [&](const HypernetState& s) {
        save_checkpoint(dir / ckpt_name(s.step), s);
        write_text(dir / "latest-checkpoint.txt", ckpt_name(s.step) + "\n");
    };
    if (resume.empty()) save(state);
    const std::size_t spe = steps_per_epoch(world, tc);
    std::cout << "training " << state.param_count() << " parameters on " << world.ids_in(Split::train).size()
              << " concepts, " << spe << " steps per epoch\n";
    TrainLog log = train(world, g, state, tc, [&](std::size_t epoch, const HypernetState& s) {
        if (every > 0 && (epoch + 1) % every == 0 && epoch + 1 < tc.epochs) save(s);
    });
    save(state);
    write_train_csv(dir / "train.csv", log);
    write_lr_csv(dir / "lr.csv", log);
    write_timing_csv(dir / "train-timing.csv", log);
    if (!log.epoch_loss.empty())
        std::cout << "epochs " << log.first_epoch << ".." << log.first_epoch + log.epoch_loss.size() - 1 << ": loss "
                  << log.epoch_loss.front() << " -> " << log.epoch_loss.back() << " (" << log.wall_seconds << " s)\n";
    std::cout << "checkpoint " << (dir / ckpt_name(state.step)).string() << '\n';
    return 0;
}

int cmd_eval(const json& cfg, const std::string& which, const std::string& checkpoint) {
    const fs::path dir = out_dir(cfg);
    auto [world, g] = load_world(dir);
    const json& ej = cfg.at("eval");
    const EvalConfig ec = eval_config_from(ej, cfg.at("estimator"));
    auto hypernet = [&] { return load_checkpoint(checkpoint_path(dir, checkpoint)); };
    echo_config(dir, "eval-" + which, cfg);

    std::string text;
    if (which == "table") {
        std::vector<Method> methods;
        for (const auto& m : ej.at("methods")) methods.push_back(method_from_string(m));
        const auto h = hypernet();
        const auto rep = compare_methods(world, g, methods, &h, ec);
        write_table_csv(dir / "report-table.csv", rep);
        write_concepts_csv(dir / "report-table-concepts.csv", rep);
        write_timing_csv(dir / "report-table-timing.csv", rep);
        text = format_table(rep, false);
        write_text(dir / "report-table-timing.txt", format_table(rep, true));
        std::cout << format_table(rep, true);
    } else if (which == "lambda") {
        const auto grid = ej.at("lambda_grid").get<std::vector<double>>();
        std::optional<HypernetState> h;
        if (!checkpoint.empty() || fs::exists(dir / "latest-checkpoint.txt")) h = hypernet();
        const auto rep = lambda_sweep_concepts(world, g, h ? &*h : nullptr, ec, grid);
        write_lambda_csv(dir / "report-lambda.csv", rep);
        text = format_lambda(rep);
    } else if (which == "nshot") {
        const auto h = hypernet();
        const auto rep = nshot_sweep(world, g, h, ej.at("shots").get<std::vector<std::size_t>>(), ec);
        write_nshot_csv(dir / "report-nshot.csv", rep);
        text = format_nshot(rep);
    } else if (which == "crossmodal") {
        const auto h = hypernet();
        const auto rep = crossmodal_eval(world, g, h, ec);
        write_crossmodal_csv(dir / "report-crossmodal.csv", rep);
        text = format_crossmodal(rep);
    } else {
        const auto rep = concept_distance_stats(world.concepts);
        write_distances_csv(dir / "report-distances.csv", rep);
        text = format_distances(rep);
    }
    write_text(dir / ("report-" + which + ".txt"), text);
    if (which != "table") std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Activation steering: per-concept fits, amortized hypernetwork training and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    Overrides o;
    app.add_option("--config", o.config_file, "JSON config file (sections: world, generator, hypernet, estimator, train, eval)")
        ->check(CLI::ExistingFile);
    app.add_option("--out", o.out, "Output directory (default: out)");
    app.add_option("--seed", o.seed, "Seed applied to world, generator, training and evaluation");

    auto* world = app.add_subcommand("world", "Build and save a synthetic world and generator");
    std::optional<std::size_t> concepts, samples, embed_dim, output_dim, pool;
    std::optional<double> gap;
    std::optional<std::vector<std::size_t>> hidden;
    world->add_option("--concepts", concepts, "Number of concepts");
    world->add_option("--samples", samples, "Samples per concept");
    world->add_option("--embed-dim", embed_dim, "Embedding width");
    world->add_option("--source-pool", pool, "Source pool size");
    world->add_option("--modality-gap", gap, "Image/text modality gap");
    world->add_option("--hidden", hidden, "Generator hidden widths");
    world->add_option("--output-dim", output_dim, "Generator output width");

    auto* fit = app.add_subcommand("fit", "Fit one concept with one per-concept method");
    std::string method = "linact";
    std::size_t concept_id = 0;
    fit->add_option("--method", method, "caa | iti | linact | lineas");
    fit->add_option("--concept", concept_id, "Concept id")->required();

    auto* train = app.add_subcommand("train", "Train the hypernetwork");
    std::optional<std::size_t> epochs, workers, group;
    std::optional<int> p;
    std::optional<double> lr;
    std::string resume;
    std::size_t every = 0;
    train->add_option("--epochs", epochs, "Epochs");
    train->add_option("--workers", workers, "Worker threads");
    train->add_option("--concepts-per-step", group, "Concepts averaged per optimizer step");
    train->add_option("--lr", lr, "Peak learning rate");
    train->add_option("--p", p, "Transport cost exponent (1 or 2)");
    train->add_option("--resume", resume, "Checkpoint to resume from");
    train->add_option("--checkpoint-every", every, "Save a checkpoint every N epochs");

    auto* eval = app.add_subcommand("eval", "Run an evaluation and write reports");
    std::string which = "table", checkpoint;
    std::optional<std::string> weights;
    std::optional<std::size_t> eval_workers;
    eval->add_option("--which", which, "table | lambda | nshot | crossmodal | distances")
        ->check(CLI::IsMember({"table", "lambda", "nshot", "crossmodal", "distances"}));
    eval->add_option("--checkpoint", checkpoint, "Hypernet checkpoint (default: latest in the output directory)");
    eval->add_option("--weights", weights, "ema | live");
    eval->add_option("--workers", eval_workers, "Worker threads");

    CLI11_PARSE(app, argc, argv);
    try {
        o.set(concepts, "world", "n_concepts");
        o.set(samples, "world", "samples_per_concept");
        o.set(embed_dim, "world", "embed_dim");
        o.set(pool, "world", "source_pool_size");
        o.set(gap, "world", "modality_gap");
        o.set(hidden, "generator", "hidden_dims");
        o.set(output_dim, "generator", "output_dim");
        o.set(epochs, "train", "epochs");
        o.set(workers, "train", "n_workers");
        o.set(group, "train", "concepts_per_step");
        o.set(lr, "train", "lr");
        o.set(p, "train", "p");
        o.set(weights, "eval", "weights");
        o.set(eval_workers, "eval", "n_workers");
        const json cfg = resolve(o);
        if (*world) return cmd_world(cfg);
        if (*fit) return cmd_fit(cfg, method, concept_id);
        if (*train) return cmd_train(cfg, resume, every);
        return cmd_eval(cfg, which, checkpoint);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
