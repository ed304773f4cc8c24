#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "bikevol/errors.hpp"
#include "bikevol/rng.hpp"
#include "bikevol/targets.hpp"
#include "bikevol/train.hpp"

using namespace bikevol;
using core::DenseMatrix;

namespace {

// Two feature clusters with volumes that differ by an order of magnitude, so
// both heads have real signal. Twenty labeled nodes out of sixty.
struct PipelineFixture {
    graph::RoadGraph g;
    graph::LabelSet labels;

    static PipelineFixture make(std::uint64_t seed) {
        constexpr std::size_t half = 30;
        DenseMatrix features(2 * half, 4);
        std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
        std::vector<std::string> ids;
        core::RngStream noise(seed);
        for (std::size_t i = 0; i < 2 * half; ++i) {
            const bool first = i < half;
            double base[4] = {first ? 0.85 : 0.05, first ? 0.05 : 0.85, 0.05, 0.05};
            for (std::size_t c = 0; c < 4; ++c)
                features(i, c) = std::clamp(base[c] + 0.03 * (2.0 * noise.uniform() - 1.0), 0.0, 1.0);
            ids.push_back("seg_" + std::to_string(i));
            if (i + 1 < half || (i >= half && i + 1 < 2 * half))
                edges.emplace_back(static_cast<std::uint32_t>(i),
                                   static_cast<std::uint32_t>(i + 1));
        }

        std::vector<std::uint32_t> idx;
        std::vector<double> adb;
        for (std::uint32_t i = 0; i < 10; ++i) {
            idx.push_back(3 * i);  // cluster one
            adb.push_back(40.0 + 6.0 * i);
        }
        for (std::uint32_t i = 0; i < 10; ++i) {
            idx.push_back(30 + 3 * i);  // cluster two
            adb.push_back(300.0 + 30.0 * i);
        }
        std::vector<int> cls = graph::quantile_classes(adb, 5);
        return PipelineFixture{graph::RoadGraph(edges, features, ids),
                               graph::make_label_set(idx, adb, cls, 2 * half)};
    }
};

train::TrainConfig small_config() {
    train::TrainConfig cfg;
    cfg.seed = 7;
    cfg.folds = 3;
    cfg.model.hidden = 8;
    cfg.model.sample_size = 5;
    cfg.optim.lr = 0.02;
    cfg.optim.max_epochs = 40;
    cfg.optim.patience = 15;
    cfg.vae.latent = 2;
    cfg.vae.enc_h1 = 12;
    cfg.vae.enc_h2 = 6;
    cfg.vae.epochs = 10;
    cfg.augment.count = 8;
    cfg.augment.tau = 0.5;
    return cfg;
}

graph::LabelSet mock_labels(std::size_t k) {
    std::vector<std::uint32_t> idx(k);
    std::vector<double> adb(k);
    for (std::size_t i = 0; i < k; ++i) {
        idx[i] = static_cast<std::uint32_t>(i);
        adb[i] = 2.0 + 4.0 * static_cast<double>(i) + static_cast<double>(i % 7);
    }
    std::vector<int> cls = graph::quantile_classes(adb, 5);
    return graph::make_label_set(idx, adb, cls, k);
}

}  // namespace

TEST_CASE("regression metrics match hand-computed fixtures") {
    auto m = train::regression_metrics({10.0, 20.0}, {12.0, 16.0});
    CHECK(m.mae == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(m.rmse == doctest::Approx(std::sqrt(10.0)).epsilon(1e-12));
    CHECK(m.mape_pct == doctest::Approx(100.0 * (2.0 / 12.0 + 4.0 / 16.0) / 2.0).epsilon(1e-12));
    CHECK(m.mape_excluded == 0);
    // truths have mean 14, so the total sum of squares is 8.
    CHECK(m.r2 == doctest::Approx(1.0 - 20.0 / 8.0).epsilon(1e-12));

    auto perfect = train::regression_metrics({12.0, 16.0}, {12.0, 16.0});
    CHECK(perfect.mae == 0.0);
    CHECK(perfect.rmse == 0.0);
    CHECK(perfect.mape_pct == 0.0);
    CHECK(perfect.r2 == doctest::Approx(1.0).epsilon(1e-15));

    // Predicting the truth mean scores exactly zero.
    auto constant = train::regression_metrics({15.0, 15.0}, {10.0, 20.0});
    CHECK(constant.r2 == doctest::Approx(0.0).epsilon(1e-15));

    auto excl = train::regression_metrics({5.0, 12.0}, {0.0, 10.0});
    CHECK(excl.mape_excluded == 1);
    CHECK(excl.mape_pct == doctest::Approx(20.0).epsilon(1e-12));

    CHECK_THROWS_AS(train::regression_metrics({1.0}, {1.0, 2.0}), ContractError);
    CHECK_THROWS_AS(train::regression_metrics({}, {}), ContractError);
}

TEST_CASE("mae never exceeds rmse") {
    core::RngStream rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> p(8), t(8);
        for (std::size_t i = 0; i < 8; ++i) {
            p[i] = 100.0 * rng.normal();
            t[i] = 100.0 * rng.normal();
        }
        auto m = train::regression_metrics(p, t);
        CHECK(m.mae <= m.rmse + 1e-12);
    }
}

TEST_CASE("classification metrics match a hand confusion table") {
    auto m = train::classification_metrics({1, 2, 2, 3}, {1, 2, 3, 3}, 5);
    CHECK(m.accuracy == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(m.macro_precision == doctest::Approx((1.0 + 0.5 + 1.0) / 5.0).epsilon(1e-12));
    CHECK(m.macro_recall == doctest::Approx((1.0 + 1.0 + 0.5) / 5.0).epsilon(1e-12));
    CHECK(m.macro_f1 == doctest::Approx((1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 5.0).epsilon(1e-12));

    auto perfect = train::classification_metrics({1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}, 5);
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.macro_f1 == doctest::Approx(1.0).epsilon(1e-15));

    // Every prediction wrong, and absent classes contribute zero, not NaN.
    auto wrong = train::classification_metrics({1, 1}, {2, 2}, 5);
    CHECK(wrong.accuracy == 0.0);
    CHECK(wrong.macro_precision == 0.0);
    CHECK(wrong.macro_recall == 0.0);
    CHECK(wrong.macro_f1 == 0.0);

    CHECK_THROWS_AS(train::classification_metrics({0}, {1}, 5), ContractError);
    CHECK_THROWS_AS(train::classification_metrics({6}, {1}, 5), ContractError);
}

TEST_CASE("stratified splits partition each fold with proportional classes") {
    graph::LabelSet labels = mock_labels(141);
    train::SplitConfig scfg;
    auto folds = train::split_folds(labels, 5, scfg, 42);
    REQUIRE(folds.size() == 5);

    std::map<int, std::size_t> class_total;
    for (int c : labels.traffic_class) ++class_total[c];

    for (const auto& sp : folds) {
        // Partition property: every label position exactly once.
        std::vector<std::uint32_t> all;
        all.insert(all.end(), sp.train.begin(), sp.train.end());
        all.insert(all.end(), sp.val.begin(), sp.val.end());
        all.insert(all.end(), sp.test.begin(), sp.test.end());
        REQUIRE(all.size() == labels.size());
        std::sort(all.begin(), all.end());
        for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);

        CHECK(sp.train.size() + sp.val.size() >= 99);
        CHECK(sp.train.size() + sp.val.size() <= 101);
        CHECK(!sp.val.empty());

        // Per-class proportionality of the training partition, within one.
        std::map<int, std::size_t> class_train;
        for (std::uint32_t p : sp.train) ++class_train[labels.traffic_class[p]];
        for (std::uint32_t p : sp.val) ++class_train[labels.traffic_class[p]];
        for (const auto& [cls, total] : class_total) {
            const double want = 0.7 * static_cast<double>(total);
            CHECK(std::abs(static_cast<double>(class_train[cls]) - want) <= 1.0);
        }
    }

    // Folds are independent draws, not copies.
    CHECK(folds[0].train != folds[1].train);

    auto again = train::split_folds(labels, 5, scfg, 42);
    for (std::size_t f = 0; f < 5; ++f) {
        CHECK(again[f].train == folds[f].train);
        CHECK(again[f].val == folds[f].val);
        CHECK(again[f].test == folds[f].test);
    }
    auto other = train::split_folds(labels, 5, scfg, 43);
    CHECK(other[0].train != folds[0].train);
}

TEST_CASE("splitting requires two labels per class") {
    std::vector<std::uint32_t> idx{0, 1, 2, 3, 4, 5};
    std::vector<double> adb{10, 20, 30, 40, 50, 60};
    std::vector<int> cls{1, 1, 2, 2, 3, 4};  // classes 3 and 4 are singletons
    auto labels = graph::make_label_set(idx, adb, cls, 10);
    CHECK_THROWS_AS(train::split_folds(labels, 3, train::SplitConfig{}, 1), DataError);
}

TEST_CASE("config round-trips through flat json and rejects bad input") {
    train::TrainConfig cfg = small_config();
    cfg.model.mode = gnn::FusionMode::sequential;
    cfg.model.mask.gat = false;
    cfg.alpha = 0.25;

    nlohmann::json j = train::config_to_json(cfg);
    CHECK(j["model.mode"] == "sequential");
    CHECK(j["model.gat"] == false);
    train::TrainConfig back = train::config_from_json(j);
    CHECK(train::config_to_json(back).dump() == j.dump());

    nlohmann::json bad = j;
    bad["model.depth"] = 3;
    CHECK_THROWS_AS(train::config_from_json(bad), ConfigError);
    nlohmann::json wrong = j;
    wrong["optim.lr"] = "fast";
    CHECK_THROWS_AS(train::config_from_json(wrong), ConfigError);
    nlohmann::json range = j;
    range["loss.alpha"] = 1.5;
    CHECK_THROWS_AS(train::config_from_json(range), ConfigError);
}

TEST_CASE("overrides parse typed values and fingerprints track content") {
    train::TrainConfig cfg;
    const std::string base_print = cfg.fingerprint();
    CHECK(base_print.size() == 16);
    CHECK(cfg.fingerprint() == base_print);

    train::apply_override(cfg, "loss.alpha", "0.25");
    CHECK(cfg.alpha == 0.25);
    train::apply_override(cfg, "model.mode", "sequential");
    CHECK(cfg.model.mode == gnn::FusionMode::sequential);
    train::apply_override(cfg, "model.gat", "false");
    CHECK_FALSE(cfg.model.mask.gat);
    train::apply_override(cfg, "folds", "2");
    CHECK(cfg.folds == 2);
    CHECK(cfg.fingerprint() != base_print);

    CHECK_THROWS_AS(train::apply_override(cfg, "nope", "1"), ConfigError);
    CHECK_THROWS_AS(train::apply_override(cfg, "loss.alpha", "2.0"), ConfigError);

    // Two configs differing only in fusion mode have distinct fingerprints.
    train::TrainConfig a, b;
    b.model.mode = gnn::FusionMode::sequential;
    CHECK(a.fingerprint() != b.fingerprint());
}

TEST_CASE("early stopping restores the best validation epoch") {
    PipelineFixture fx = PipelineFixture::make(21);
    train::TrainConfig cfg = small_config();
    auto folds = train::split_folds(fx.labels, 1, cfg.split, cfg.seed);
    const auto& sp = folds[0];

    std::vector<double> train_adb;
    for (std::uint32_t p : sp.train) train_adb.push_back(fx.labels.adb[p]);
    for (std::uint32_t p : sp.val) train_adb.push_back(fx.labels.adb[p]);
    graph::TargetScaler scaler = graph::TargetScaler::fit(train_adb);
    auto train_sup = train::supervision_from_labels(fx.labels, sp.train, scaler, 1.0);
    auto val_sup = train::supervision_from_labels(fx.labels, sp.val, scaler, 1.0);

    train::TrainedGnn trained = train::train_gnn(fx.g, train_sup, val_sup, cfg.model, cfg.optim,
                                                 cfg.alpha, cfg.seed, "t0", nullptr);
    REQUIRE(trained.epochs_run >= 1);
    CHECK(trained.curve.train_loss.size() == trained.epochs_run);
    CHECK(trained.curve.val_loss.size() == trained.epochs_run);
    CHECK(trained.best_epoch >= 1);
    CHECK(trained.best_epoch <= trained.epochs_run);
    if (trained.epochs_run < cfg.optim.max_epochs)
        CHECK(trained.epochs_run == trained.best_epoch + cfg.optim.patience);

    // The curve's minimum is the reported best value, and the restored
    // parameters reproduce it exactly.
    const double curve_min =
        *std::min_element(trained.curve.val_loss.begin(), trained.curve.val_loss.end());
    CHECK(trained.best_val_loss == curve_min);
    core::Tape tape;
    gnn::HybridOutput out = gnn::hybrid_forward(tape, fx.g, trained.model, nullptr, nullptr, false);
    CHECK(gnn::joint_loss(tape, out, val_sup, cfg.alpha).scalar() == trained.best_val_loss);
}

TEST_CASE("pipeline reports are deterministic and thread-count independent") {
    PipelineFixture fx = PipelineFixture::make(33);
    train::TrainConfig cfg = small_config();

    train::PipelineResult a = train::run_pipeline(fx.g, fx.labels, cfg);
    train::PipelineResult b = train::run_pipeline(fx.g, fx.labels, cfg);
    CHECK(train::report_to_json(a.report).dump() == train::report_to_json(b.report).dump());
    CHECK(train::report_to_csv(a.report) == train::report_to_csv(b.report));

    train::TrainConfig threaded = cfg;
    threaded.jobs = 3;
    train::PipelineResult c = train::run_pipeline(fx.g, fx.labels, threaded);
    CHECK(train::report_to_json(a.report).dump() == train::report_to_json(c.report).dump());

    REQUIRE(a.report.folds.size() == cfg.folds);
    for (const auto& f : a.report.folds) {
        CHECK(f.synthetic_requested == cfg.augment.count);
        CHECK(f.synthetic_survivors <= f.synthetic_requested);
        CHECK(std::isfinite(f.metrics.reg.mae));
        CHECK(f.metrics.clf.accuracy >= 0.0);
        CHECK(f.metrics.clf.accuracy <= 1.0);
    }
    CHECK(a.best_fold < cfg.folds);
    CHECK(a.folds[a.best_fold].test_nodes.size() > 0);
}

TEST_CASE("disabling synthesis reports the pretrained model unchanged") {
    PipelineFixture fx = PipelineFixture::make(55);
    train::TrainConfig cfg = small_config();
    cfg.folds = 1;
    cfg.augment.use_vae = false;

    train::PipelineResult res = train::run_pipeline(fx.g, fx.labels, cfg);
    REQUIRE(res.report.folds.size() == 1);
    const auto& fr = res.report.folds[0];
    CHECK(fr.synthetic_requested == 0);
    CHECK(fr.synthetic_survivors == 0);
    CHECK(fr.pretrain_best == fr.final_best);
    CHECK(fr.pretrain_epochs == fr.final_epochs);

    // Reproduce the fold by hand with the same seeded streams; the reported
    // metrics must match bit for bit.
    auto folds = train::split_folds(fx.labels, 1, cfg.split, cfg.seed);
    const auto& sp = folds[0];
    std::vector<double> train_adb;
    for (std::uint32_t p : sp.train) train_adb.push_back(fx.labels.adb[p]);
    for (std::uint32_t p : sp.val) train_adb.push_back(fx.labels.adb[p]);
    graph::TargetScaler scaler = graph::TargetScaler::fit(train_adb);
    auto train_sup = train::supervision_from_labels(fx.labels, sp.train, scaler, 1.0);
    auto val_sup = train::supervision_from_labels(fx.labels, sp.val, scaler, 1.0);
    train::TrainedGnn manual = train::train_gnn(fx.g, train_sup, val_sup, cfg.model, cfg.optim,
                                                cfg.alpha, cfg.seed, "fold0.pre", nullptr);
    std::vector<std::uint32_t> test_nodes;
    for (std::uint32_t p : sp.test) test_nodes.push_back(fx.labels.indices[p]);
    train::Metrics manual_metrics =
        train::evaluate_fold(fx.g, manual.model, scaler, fx.labels, test_nodes);
    CHECK(manual_metrics.reg.mae == fr.metrics.reg.mae);
    CHECK(manual_metrics.reg.rmse == fr.metrics.reg.rmse);
    CHECK(manual_metrics.reg.r2 == fr.metrics.reg.r2);
    CHECK(manual_metrics.clf.accuracy == fr.metrics.clf.accuracy);
}

TEST_CASE("fold artifacts evaluate to the reported metrics") {
    PipelineFixture fx = PipelineFixture::make(77);
    train::TrainConfig cfg = small_config();
    cfg.folds = 2;

    train::PipelineResult res = train::run_pipeline(fx.g, fx.labels, cfg);
    for (std::size_t f = 0; f < res.folds.size(); ++f) {
        const auto& art = res.folds[f];
        graph::RoadGraph combined = art.aug.combined();
        train::Metrics again =
            train::evaluate_fold(combined, art.model, art.scaler, fx.labels, art.test_nodes);
        CHECK(again.reg.mae == res.report.folds[f].metrics.reg.mae);
        CHECK(again.reg.rmse == res.report.folds[f].metrics.reg.rmse);
        CHECK(again.clf.accuracy == res.report.folds[f].metrics.clf.accuracy);
        CHECK(again.clf.macro_f1 == res.report.folds[f].metrics.clf.macro_f1);
    }
}

TEST_CASE("report serialization carries folds and means") {
    train::RunReport r;
    r.config_fingerprint = "00ff00ff00ff00ff";
    r.seed = 9;
    train::FoldResult f0;
    f0.fold = 0;
    f0.metrics.reg = train::regression_metrics({10.0, 20.0}, {12.0, 16.0});
    f0.metrics.clf = train::classification_metrics({1, 2}, {1, 2}, 5);
    r.folds.push_back(f0);
    r.mean = f0.metrics;

    nlohmann::json j = train::report_to_json(r);
    CHECK(j["config_fingerprint"] == "00ff00ff00ff00ff");
    CHECK(j["seed"] == 9);
    REQUIRE(j["folds"].size() == 1);
    CHECK(j["folds"][0]["mae"] == 3.0);
    CHECK(j["mean"]["mae"] == 3.0);

    std::string csv = train::report_to_csv(r);
    CHECK(csv.find("fold,mae,rmse") == 0);
    CHECK(csv.find("\n0,3,") != std::string::npos);
    CHECK(csv.find("\nmean,3,") != std::string::npos);
}
