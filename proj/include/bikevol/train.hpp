#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bikevol/hybrid.hpp"
#include "bikevol/matrix.hpp"
#include "bikevol/road_graph.hpp"
#include "bikevol/targets.hpp"
#include "bikevol/vae.hpp"

namespace bikevol::train {

struct SplitConfig {
    double train_fraction = 0.7;  // labeled nodes per fold that train the model
    double val_fraction = 0.15;   // share of the training partition held out
};

struct OptimConfig {
    double lr = 0.01;
    std::size_t max_epochs = 500;
    std::size_t patience = 50;  // epochs without validation improvement
};

struct AugmentSettings {
    bool use_vae = true;
    std::size_t count = 0;  // requested synthetic nodes; 0 means one per training label
    double tau = 0.7;
    std::size_t k = 5;
    double pseudo_weight = 1.0;  // loss weight of pseudo-labeled nodes
};

// Every knob of a run. Serializes to a flat JSON object with dotted keys;
// unknown keys are rejected on load so typos fail fast.
struct TrainConfig {
    std::uint64_t seed = 42;
    std::size_t folds = 5;
    std::size_t jobs = 1;
    SplitConfig split;
    gnn::HybridConfig model;
    double alpha = 0.5;
    OptimConfig optim;
    vae::VaeConfig vae;
    AugmentSettings augment;

    void validate() const;       // throws ConfigError
    std::string fingerprint() const;  // 16 hex digits over the canonical JSON
};

nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);
// Parse "key=value" as one JSON field (value falls back to a string literal).
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);

// Positions into a LabelSet. train is the gradient set; val steers early
// stopping; test is untouched until final evaluation.
struct FoldSplit {
    std::vector<std::uint32_t> train;
    std::vector<std::uint32_t> val;
    std::vector<std::uint32_t> test;
};

// Independent stratified Monte-Carlo splits: per fold and class, a seeded
// shuffle then a round-half-up train_fraction cut, with val carved from the
// training side the same way (at least one validation node overall).
std::vector<FoldSplit> split_folds(const graph::LabelSet& labels, std::size_t folds,
                                   const SplitConfig& cfg, std::uint64_t seed);

// Supervision rows for the given label positions, normalized by the scaler.
gnn::SupervisionSet supervision_from_labels(const graph::LabelSet& labels,
                                            const std::vector<std::uint32_t>& positions,
                                            const graph::TargetScaler& scaler, double weight);

struct TrainCurve {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
};

struct TrainedGnn {
    gnn::HybridModel model;
    std::size_t best_epoch = 0;  // 1-based epoch of the restored parameters
    std::size_t epochs_run = 0;
    double best_val_loss = 0.0;
    TrainCurve curve;
};

using LogFn = std::function<void(const std::string&)>;

// Full-batch Adam with early stopping on the validation joint loss; the
// parameters from the best epoch are restored before returning. ns isolates
// this run's random streams under the master seed. Non-finite losses raise
// TrainingError with the offending epoch in the message.
TrainedGnn train_gnn(const graph::RoadGraph& g, const gnn::SupervisionSet& train_sup,
                     const gnn::SupervisionSet& val_sup, const gnn::HybridConfig& mcfg,
                     const OptimConfig& ocfg, double alpha, std::uint64_t seed,
                     const std::string& ns, const LogFn& log = nullptr);

// Deterministic inference pass: dropout off, full neighborhoods.
void eval_forward(const graph::RoadGraph& g, const gnn::HybridModel& model,
                  core::DenseMatrix* reg, core::DenseMatrix* clf);

struct RegressionMetrics {
    double mae = 0.0;
    double rmse = 0.0;
    double mape_pct = 0.0;       // zero-truth rows excluded
    std::size_t mape_excluded = 0;
    double r2 = 0.0;
};

struct ClassificationMetrics {
    double accuracy = 0.0;
    double macro_precision = 0.0;  // zero denominators contribute 0
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
};

struct Metrics {
    RegressionMetrics reg;
    ClassificationMetrics clf;
};

RegressionMetrics regression_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& truth);
ClassificationMetrics classification_metrics(const std::vector<int>& pred,
                                             const std::vector<int>& truth, int n_classes);

struct FoldResult {
    std::size_t fold = 0;
    Metrics metrics;
    std::size_t pretrain_best = 0;
    std::size_t pretrain_epochs = 0;
    std::size_t final_best = 0;
    std::size_t final_epochs = 0;
    double final_val_loss = 0.0;
    std::size_t synthetic_requested = 0;
    std::size_t synthetic_survivors = 0;
};

struct RunReport {
    std::string config_fingerprint;
    std::uint64_t seed = 0;
    std::vector<FoldResult> folds;
    Metrics mean;  // arithmetic mean of the per-fold metrics
};

nlohmann::json report_to_json(const RunReport& report);
std::string report_to_csv(const RunReport& report);

// Everything needed to persist and re-evaluate one fold's final model.
struct FoldArtifacts {
    FoldResult result;
    gnn::HybridModel model;
    graph::TargetScaler scaler;
    std::vector<std::uint32_t> test_nodes;  // node indices
    vae::AugmentedGraph aug;
};

struct PipelineResult {
    RunReport report;
    std::size_t best_fold = 0;  // lowest final validation loss
    std::vector<FoldArtifacts> folds;
};

// The full loop per fold: pretrain, train the VAE, augment, retrain from a
// fresh init on the enriched graph, evaluate on held-out test labels only.
// With the VAE disabled (or nothing surviving attachment) the pretrained
// model is the final model, so those runs report its metrics unchanged.
// Folds run on cfg.jobs threads; results do not depend on the thread count.
PipelineResult run_pipeline(const graph::RoadGraph& g, const graph::LabelSet& labels,
                            const TrainConfig& cfg, const LogFn& log = nullptr);

// Test-set metrics of one stored model, the exact computation the pipeline
// runs after training.
Metrics evaluate_fold(const graph::RoadGraph& combined, const gnn::HybridModel& model,
                      const graph::TargetScaler& scaler, const graph::LabelSet& labels,
                      const std::vector<std::uint32_t>& test_nodes);

}  // namespace bikevol::train
