#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "steer/trainer.hpp"
#include "test_util.hpp"

using namespace steer;

namespace {

struct Fixture {
    World world;
    Generator g;
    HypernetConfig hcfg;
    TrainConfig tcfg;
};

Fixture small_setup(std::uint64_t seed = 0) {
    WorldConfig wc;
    wc.embed_dim = 8;
    wc.n_concepts = 12;
    wc.samples_per_concept = 8;
    wc.source_pool_size = 32;
    wc.seed = seed;
    GeneratorConfig gc;
    gc.input_dim = 8;
    gc.hidden_dims = {6, 5};
    gc.output_dim = 4;
    gc.seed = seed;
    Fixture f{build_world(wc), build_generator(gc), {}, {}};
    f.hcfg = hypernet_config_for(f.world, f.g);
    f.hcfg.adapter_out = 4;
    f.hcfg.key_dim = 3;
    f.hcfg.shape_dim = 2;
    f.hcfg.state_key_dim = 2;
    f.hcfg.decoder_hidden = {8};
    f.tcfg.epochs = 2;
    f.tcfg.lr = 1e-2;
    f.tcfg.cond_subset = 4;
    f.tcfg.target_subset = 4;
    f.tcfg.source_subset = 4;
    f.tcfg.concepts_per_step = 2;
    f.tcfg.n_workers = 1;
    return f;
}

std::vector<Tensor> snapshot(const std::vector<std::shared_ptr<Tensor>>& ps) {
    std::vector<Tensor> out;
    for (const auto& p : ps) out.push_back(*p);
    return out;
}

const ConceptSpec& first_train(const World& w) { return w.concept_by_id(w.ids_in(Split::train).front()); }

}  // namespace

TEST(DrawSubsets, DisjointWithoutReplacementWhenPossible) {
    auto f = small_setup();
    const auto& c = first_train(f.world);
    auto d = draw_subsets(f.world, c, f.tcfg, 3);
    EXPECT_EQ(d.cond_rows.size(), 4u);
    EXPECT_EQ(d.target_rows.size(), 4u);
    EXPECT_EQ(d.source_rows.size(), 4u);
    std::set<std::size_t> all(d.cond_rows.begin(), d.cond_rows.end());
    all.insert(d.target_rows.begin(), d.target_rows.end());
    EXPECT_EQ(all.size(), 8u);
    EXPECT_EQ(std::set<std::size_t>(d.source_rows.begin(), d.source_rows.end()).size(), 4u);
    auto again = draw_subsets(f.world, c, f.tcfg, 3);
    EXPECT_EQ(again.cond_rows, d.cond_rows);
    EXPECT_EQ(again.source_rows, d.source_rows);
    EXPECT_NE(draw_subsets(f.world, c, f.tcfg, 4).cond_rows, d.cond_rows);
}

TEST(DrawSubsets, FallsBackToReplacement) {
    auto f = small_setup();
    f.tcfg.cond_subset = 6;
    f.tcfg.target_subset = 6;
    f.tcfg.source_subset = 6;
    auto d = draw_subsets(f.world, first_train(f.world), f.tcfg, 0);
    EXPECT_EQ(d.cond_rows.size(), 6u);
    EXPECT_EQ(d.target_rows.size(), 6u);
    for (auto r : d.cond_rows) EXPECT_LT(r, 8u);
}

TEST(TrainStep, ReproducibleAndSideEffectFree) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 1);
    auto before = snapshot(st.live);
    const auto& c = first_train(f.world);
    auto a = train_step(f.world, f.g, st, c, f.tcfg, 0);
    auto b = train_step(f.world, f.g, st, c, f.tcfg, 0);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grads, b.grads);
    EXPECT_EQ(snapshot(st.live), before);
    EXPECT_EQ(st.step, 0u);
}

TEST(TrainStep, FreshStateLossIsUnsteeredLoss) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 1);
    for (auto id : f.world.ids_in(Split::train)) {
        const auto& c = f.world.concept_by_id(id);
        auto d = draw_subsets(f.world, c, f.tcfg, 0);
        double expect = alignment_loss(f.g.forward_capture(select_rows(f.world.source.samples, d.source_rows)).record,
                                       f.g.forward_capture(select_rows(c.samples_text, d.target_rows)).record);
        EXPECT_EQ(train_step(f.world, f.g, st, c, f.tcfg, 0).loss, expect);
    }
}

TEST(TrainStep, NullConceptLossIsSamplingNoise) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 1);
    ConceptSpec null_concept = first_train(f.world);
    std::vector<std::size_t> rows(8);
    std::iota(rows.begin(), rows.end(), std::size_t{16});
    null_concept.samples_text = select_rows(f.world.source.samples, rows);
    double null_loss = 0.0, real_loss = 0.0;
    for (std::uint64_t e = 0; e < 20; ++e) {
        null_loss += train_step(f.world, f.g, st, null_concept, f.tcfg, e).loss;
        real_loss += train_step(f.world, f.g, st, first_train(f.world), f.tcfg, e).loss;
    }
    EXPECT_LT(null_loss, real_loss);
}

TEST(TrainStep, RejectsHeldOutConcept) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 1);
    const auto& test_concept = f.world.concept_by_id(f.world.ids_in(Split::test).front());
    EXPECT_THROW(train_step(f.world, f.g, st, test_concept, f.tcfg, 0), std::invalid_argument);
}

TEST(TrainStep, GradientReachesEveryParameter) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 1);
    f.tcfg.epochs = 1;
    train(f.world, f.g, st, f.tcfg);
    auto r = train_step(f.world, f.g, st, first_train(f.world), f.tcfg, 5);
    for (std::size_t k = 0; k < r.grads.size(); ++k) {
        double norm = 0.0;
        for (double v : r.grads[k].data()) norm += v * v;
        EXPECT_GT(norm, 0.0) << st.names[k];
    }
}

TEST(AverageGradients, ExactMeanInOrder) {
    std::mt19937_64 rng(1);
    std::vector<StepResult> rs(3);
    for (auto& r : rs) r.grads = {test::gaussian_tensor(rng, {2, 3}), test::gaussian_tensor(rng, {4})};
    auto avg = average_gradients(rs);
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < avg[k].numel(); ++i)
            EXPECT_EQ(avg[k][i], ((rs[0].grads[k][i] + rs[1].grads[k][i]) + rs[2].grads[k][i]) * (1.0 / 3.0));
}

TEST(Train, ZeroEpochsLeavesStateUnchanged) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 2);
    auto before = snapshot(st.live);
    f.tcfg.epochs = 0;
    auto log = train(f.world, f.g, st, f.tcfg);
    EXPECT_TRUE(log.epoch_loss.empty());
    EXPECT_EQ(snapshot(st.live), before);
    EXPECT_EQ(snapshot(st.shadow), before);
}

TEST(Train, WorkerCountDoesNotChangeTrajectory) {
    auto f = small_setup();
    auto a = init_hypernet(f.hcfg, 3), b = init_hypernet(f.hcfg, 3);
    f.tcfg.n_workers = 1;
    auto la = train(f.world, f.g, a, f.tcfg);
    f.tcfg.n_workers = 2;
    auto lb = train(f.world, f.g, b, f.tcfg);
    EXPECT_EQ(snapshot(a.live), snapshot(b.live));
    EXPECT_EQ(snapshot(a.shadow), snapshot(b.shadow));
    EXPECT_EQ(la.epoch_loss, lb.epoch_loss);
}

TEST(Train, OneStepUsesMeanOfConceptGradients) {
    auto f = small_setup();
    const auto ids = f.world.ids_in(Split::train);
    f.tcfg.epochs = 1;
    f.tcfg.concepts_per_step = ids.size();
    auto st = init_hypernet(f.hcfg, 4);
    auto ref = init_hypernet(f.hcfg, 4);
    std::vector<StepResult> rs;
    for (auto id : ids) rs.push_back(train_step(f.world, f.g, ref, f.world.concept_by_id(id), f.tcfg, 0));
    auto grads = average_gradients(rs);
    std::vector<ParamRef> refs;
    for (std::size_t k = 0; k < grads.size(); ++k) refs.push_back({ref.names[k], ref.live[k].get(), &grads[k]});
    adamw_step(refs, ref.optimizer, f.tcfg.lr, f.tcfg.adamw);
    ema_update(ref, f.tcfg.ema_decay);

    auto log = train(f.world, f.g, st, f.tcfg);
    ASSERT_EQ(log.step_lr.size(), 1u);
    EXPECT_EQ(log.step_lr[0], f.tcfg.lr);
    for (std::size_t k = 0; k < st.live.size(); ++k) {
        EXPECT_LT(test::max_abs_diff(*st.live[k], *ref.live[k]), 1e-12) << st.names[k];
        EXPECT_LT(test::max_abs_diff(*st.shadow[k], *ref.shadow[k]), 1e-12) << st.names[k];
    }
    double mean = 0.0;
    for (const auto& r : rs) mean += r.loss;
    EXPECT_NEAR(log.epoch_loss[0], mean / double(rs.size()), 1e-12);
}

TEST(Train, LrTraceFollowsCosineExactly) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 5);
    f.tcfg.lr = 1e-4;
    f.tcfg.epochs = 3;
    auto log = train(f.world, f.g, st, f.tcfg);
    const std::size_t total = 3 * log.steps_per_epoch;
    ASSERT_EQ(log.step_lr.size(), total);
    for (std::size_t s = 0; s < total; ++s) EXPECT_EQ(log.step_lr[s], cosine_lr(s, total - 1, 1e-4, 1e-3));
    EXPECT_EQ(log.step_lr.front(), 1e-4);
    EXPECT_NEAR(log.step_lr.back(), 1e-7, 1e-22);
}

TEST(Train, EmaDoesNotAffectLiveTrajectory) {
    auto f = small_setup();
    auto a = init_hypernet(f.hcfg, 6), b = init_hypernet(f.hcfg, 6);
    train(f.world, f.g, a, f.tcfg);
    f.tcfg.use_ema = false;
    train(f.world, f.g, b, f.tcfg);
    EXPECT_EQ(snapshot(a.live), snapshot(b.live));
    EXPECT_NE(snapshot(a.shadow), snapshot(b.shadow));
}

TEST(Train, GeneratorStaysFrozen) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 7);
    auto before = f.g.flat_weights();
    train(f.world, f.g, st, f.tcfg);
    EXPECT_EQ(f.g.flat_weights(), before);
}

TEST(Train, LossDecreases) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 8);
    f.tcfg.epochs = 30;
    auto log = train(f.world, f.g, st, f.tcfg);
    EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
}

TEST(Train, ResumeFromCheckpointMatchesUninterruptedRun) {
    auto f = small_setup();
    f.tcfg.epochs = 3;
    auto full = init_hypernet(f.hcfg, 9);
    train(f.world, f.g, full, f.tcfg);

    auto dir = std::filesystem::temp_directory_path() / "steer-trainer-resume";
    std::filesystem::remove_all(dir);
    auto part = init_hypernet(f.hcfg, 9);
    train(f.world, f.g, part, f.tcfg, [&](std::size_t epoch, const HypernetState& s) {
        if (epoch == 0) save_checkpoint(dir / "ckpt.json", s);
    });
    auto resumed = load_checkpoint(dir / "ckpt.json");
    auto log = train(f.world, f.g, resumed, f.tcfg);
    EXPECT_EQ(log.first_epoch, 1u);
    EXPECT_EQ(snapshot(resumed.live), snapshot(full.live));
    EXPECT_EQ(snapshot(resumed.shadow), snapshot(full.shadow));
}

TEST(Train, CsvLogs) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 10);
    auto log = train(f.world, f.g, st, f.tcfg);
    auto dir = std::filesystem::temp_directory_path() / "steer-trainer-csv";
    write_train_csv(dir / "train.csv", log);
    write_lr_csv(dir / "lr.csv", log);
    std::ifstream in(dir / "train.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "epoch,mean_loss,lr");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 2);
    EXPECT_EQ(to_json(train_config_from_json(to_json(f.tcfg))), to_json(f.tcfg));
}

TEST(Train, RejectsBadConfig) {
    auto f = small_setup();
    auto st = init_hypernet(f.hcfg, 11);
    f.tcfg.source_subset = 3;
    EXPECT_THROW(train(f.world, f.g, st, f.tcfg), std::invalid_argument);
    f.tcfg.source_subset = 4;
    f.tcfg.n_workers = 0;
    EXPECT_THROW(train(f.world, f.g, st, f.tcfg), std::invalid_argument);
}
