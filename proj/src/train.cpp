#include "bikevol/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "bikevol/adam.hpp"
#include "bikevol/errors.hpp"
#include "bikevol/rng.hpp"

namespace bikevol::train {

using core::DenseMatrix;
using nlohmann::json;

namespace {

std::string mode_name(gnn::FusionMode m) {
    return m == gnn::FusionMode::parallel ? "parallel" : "sequential";
}

gnn::FusionMode mode_from_name(const std::string& s) {
    if (s == "parallel") return gnn::FusionMode::parallel;
    if (s == "sequential") return gnn::FusionMode::sequential;
    throw ConfigError("model.mode must be 'parallel' or 'sequential', got '" + s + "'");
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    if (folds == 0) throw ConfigError("folds must be positive");
    if (jobs == 0) throw ConfigError("jobs must be positive");
    if (!(split.train_fraction > 0.0 && split.train_fraction < 1.0))
        throw ConfigError("split.train_fraction must lie in (0, 1)");
    if (!(split.val_fraction >= 0.0 && split.val_fraction < 1.0))
        throw ConfigError("split.val_fraction must lie in [0, 1)");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("loss.alpha must lie in [0, 1]");
    if (model.mask.enabled_count() == 0) throw ConfigError("all model branches are disabled");
    if (model.hidden == 0) throw ConfigError("model.hidden must be positive");
    if (model.n_classes < 2) throw ConfigError("model.classes must be at least 2");
    if (model.sample_size == 0) throw ConfigError("model.sample_size must be positive");
    if (!(model.dropout_rate >= 0.0 && model.dropout_rate < 1.0))
        throw ConfigError("model.dropout must lie in [0, 1)");
    if (!(model.leaky_slope > 0.0)) throw ConfigError("model.leaky_slope must be positive");
    if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
    if (optim.max_epochs == 0) throw ConfigError("optim.max_epochs must be positive");
    if (optim.patience == 0) throw ConfigError("optim.patience must be positive");
    if (vae.latent == 0 || vae.enc_h1 == 0 || vae.enc_h2 == 0)
        throw ConfigError("vae layer widths must be positive");
    if (!(vae.beta >= 0.0) || !(vae.gamma >= 0.0))
        throw ConfigError("vae.beta and vae.gamma must be non-negative");
    if (!(vae.learning_rate > 0.0)) throw ConfigError("vae.lr must be positive");
    if (vae.epochs == 0 || vae.batch_size == 0)
        throw ConfigError("vae.epochs and vae.batch must be positive");
    if (!std::isfinite(augment.tau)) throw ConfigError("augment.tau must be finite");
    if (augment.k == 0) throw ConfigError("augment.k must be positive");
    if (!(augment.pseudo_weight > 0.0)) throw ConfigError("augment.pseudo_weight must be positive");
}

json config_to_json(const TrainConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["folds"] = cfg.folds;
    j["jobs"] = cfg.jobs;
    j["split.train_fraction"] = cfg.split.train_fraction;
    j["split.val_fraction"] = cfg.split.val_fraction;
    j["model.mode"] = mode_name(cfg.model.mode);
    j["model.gcn"] = cfg.model.mask.gcn;
    j["model.gat"] = cfg.model.mask.gat;
    j["model.sage"] = cfg.model.mask.sage;
    j["model.hidden"] = cfg.model.hidden;
    j["model.classes"] = cfg.model.n_classes;
    j["model.sample_size"] = cfg.model.sample_size;
    j["model.leaky_slope"] = cfg.model.leaky_slope;
    j["model.dropout"] = cfg.model.dropout_rate;
    j["model.learned_gate"] = cfg.model.learned_gate;
    j["loss.alpha"] = cfg.alpha;
    j["optim.lr"] = cfg.optim.lr;
    j["optim.max_epochs"] = cfg.optim.max_epochs;
    j["optim.patience"] = cfg.optim.patience;
    j["vae.enabled"] = cfg.augment.use_vae;
    j["vae.latent"] = cfg.vae.latent;
    j["vae.hidden1"] = cfg.vae.enc_h1;
    j["vae.hidden2"] = cfg.vae.enc_h2;
    j["vae.beta"] = cfg.vae.beta;
    j["vae.gamma"] = cfg.vae.gamma;
    j["vae.lr"] = cfg.vae.learning_rate;
    j["vae.epochs"] = cfg.vae.epochs;
    j["vae.batch"] = cfg.vae.batch_size;
    j["augment.count"] = cfg.augment.count;
    j["augment.tau"] = cfg.augment.tau;
    j["augment.k"] = cfg.augment.k;
    j["augment.pseudo_weight"] = cfg.augment.pseudo_weight;
    return j;
}

TrainConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    TrainConfig cfg;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "seed") cfg.seed = value.get<std::uint64_t>();
            else if (key == "folds") cfg.folds = value.get<std::size_t>();
            else if (key == "jobs") cfg.jobs = value.get<std::size_t>();
            else if (key == "split.train_fraction") cfg.split.train_fraction = value.get<double>();
            else if (key == "split.val_fraction") cfg.split.val_fraction = value.get<double>();
            else if (key == "model.mode") cfg.model.mode = mode_from_name(value.get<std::string>());
            else if (key == "model.gcn") cfg.model.mask.gcn = value.get<bool>();
            else if (key == "model.gat") cfg.model.mask.gat = value.get<bool>();
            else if (key == "model.sage") cfg.model.mask.sage = value.get<bool>();
            else if (key == "model.hidden") cfg.model.hidden = value.get<std::size_t>();
            else if (key == "model.classes") cfg.model.n_classes = value.get<std::size_t>();
            else if (key == "model.sample_size") cfg.model.sample_size = value.get<std::size_t>();
            else if (key == "model.leaky_slope") cfg.model.leaky_slope = value.get<double>();
            else if (key == "model.dropout") cfg.model.dropout_rate = value.get<double>();
            else if (key == "model.learned_gate") cfg.model.learned_gate = value.get<bool>();
            else if (key == "loss.alpha") cfg.alpha = value.get<double>();
            else if (key == "optim.lr") cfg.optim.lr = value.get<double>();
            else if (key == "optim.max_epochs") cfg.optim.max_epochs = value.get<std::size_t>();
            else if (key == "optim.patience") cfg.optim.patience = value.get<std::size_t>();
            else if (key == "vae.enabled") cfg.augment.use_vae = value.get<bool>();
            else if (key == "vae.latent") cfg.vae.latent = value.get<std::size_t>();
            else if (key == "vae.hidden1") cfg.vae.enc_h1 = value.get<std::size_t>();
            else if (key == "vae.hidden2") cfg.vae.enc_h2 = value.get<std::size_t>();
            else if (key == "vae.beta") cfg.vae.beta = value.get<double>();
            else if (key == "vae.gamma") cfg.vae.gamma = value.get<double>();
            else if (key == "vae.lr") cfg.vae.learning_rate = value.get<double>();
            else if (key == "vae.epochs") cfg.vae.epochs = value.get<std::size_t>();
            else if (key == "vae.batch") cfg.vae.batch_size = value.get<std::size_t>();
            else if (key == "augment.count") cfg.augment.count = value.get<std::size_t>();
            else if (key == "augment.tau") cfg.augment.tau = value.get<double>();
            else if (key == "augment.k") cfg.augment.k = value.get<std::size_t>();
            else if (key == "augment.pseudo_weight")
                cfg.augment.pseudo_weight = value.get<double>();
            else throw ConfigError("unknown config key: " + key);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config value has the wrong type: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
    json j = config_to_json(cfg);
    if (!j.contains(key)) throw ConfigError("unknown config key: " + key);
    json parsed = json::parse(value, nullptr, false);
    j[key] = parsed.is_discarded() ? json(value) : parsed;
    cfg = config_from_json(j);
}

std::string TrainConfig::fingerprint() const {
    // jobs only schedules work across threads; results are identical either
    // way, so it stays out of the fingerprint.
    json j = config_to_json(*this);
    j.erase("jobs");
    const std::uint64_t h = core::fnv1a64(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<FoldSplit> split_folds(const graph::LabelSet& labels, std::size_t folds,
                                   const SplitConfig& cfg, std::uint64_t seed) {
    if (labels.size() == 0) throw ContractError("split: empty label set");
    if (folds == 0) throw ContractError("split: fold count must be positive");

    std::map<int, std::vector<std::uint32_t>> by_class;
    for (std::size_t p = 0; p < labels.size(); ++p)
        by_class[labels.traffic_class[p]].push_back(static_cast<std::uint32_t>(p));
    for (const auto& [cls, members] : by_class)
        if (members.size() < 2)
            throw DataError("split: class " + std::to_string(cls) +
                            " has fewer than two labels, cannot stratify");

    std::vector<FoldSplit> out(folds);
    for (std::size_t f = 0; f < folds; ++f) {
        core::RngStream stream = core::derive_stream(seed, "split.fold" + std::to_string(f));
        FoldSplit& sp = out[f];
        for (const auto& [cls, members] : by_class) {
            std::vector<std::uint32_t> idx = members;
            stream.shuffle(idx);
            const std::size_t n_train = round_half_up(cfg.train_fraction * idx.size());
            const std::size_t n_val = round_half_up(cfg.val_fraction * n_train);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                if (i < n_val) sp.val.push_back(idx[i]);
                else if (i < n_train) sp.train.push_back(idx[i]);
                else sp.test.push_back(idx[i]);
            }
        }
        if (sp.val.empty()) {
            // Guarantee an early-stopping signal even for tiny label sets.
            if (sp.train.size() < 2) throw DataError("split: too few labels to carve validation");
            sp.val.push_back(sp.train.back());
            sp.train.pop_back();
        }
        std::sort(sp.train.begin(), sp.train.end());
        std::sort(sp.val.begin(), sp.val.end());
        std::sort(sp.test.begin(), sp.test.end());
    }
    return out;
}

gnn::SupervisionSet supervision_from_labels(const graph::LabelSet& labels,
                                            const std::vector<std::uint32_t>& positions,
                                            const graph::TargetScaler& scaler, double weight) {
    gnn::SupervisionSet sup;
    sup.indices.reserve(positions.size());
    for (std::uint32_t p : positions) {
        if (p >= labels.size()) throw ContractError("supervision: label position out of range");
        sup.indices.push_back(labels.indices[p]);
        sup.target_norm.push_back(scaler.normalize(labels.adb[p]));
        sup.class_idx.push_back(static_cast<std::uint32_t>(labels.traffic_class[p] - 1));
        sup.weight.push_back(weight);
    }
    return sup;
}

TrainedGnn train_gnn(const graph::RoadGraph& g, const gnn::SupervisionSet& train_sup,
                     const gnn::SupervisionSet& val_sup, const gnn::HybridConfig& mcfg,
                     const OptimConfig& ocfg, double alpha, std::uint64_t seed,
                     const std::string& ns, const LogFn& log) {
    if (train_sup.size() == 0 || val_sup.size() == 0)
        throw ContractError("training needs non-empty train and validation supervision");

    TrainedGnn out;
    out.model = gnn::HybridModel::init(mcfg, g.feature_dim(), core::derive_seed(seed, ns + ".init"));
    core::RngStream dropout_rng = core::derive_stream(seed, ns + ".dropout");
    core::RngStream sample_rng = core::derive_stream(seed, ns + ".sample");
    core::AdamOptimizer adam(ocfg.lr);
    auto params = out.model.parameters();

    std::vector<DenseMatrix> best;
    double best_val = std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 1; epoch <= ocfg.max_epochs; ++epoch) {
        core::Tape tape;
        gnn::HybridOutput fwd =
            gnn::hybrid_forward(tape, g, out.model, &dropout_rng, &sample_rng, true);
        core::Value loss = gnn::joint_loss(tape, fwd, train_sup, alpha);
        const double train_loss = loss.scalar();
        if (!std::isfinite(train_loss))
            throw TrainingError(ns + ": training loss diverged at epoch " +
                                std::to_string(epoch) + " (" + fmt(train_loss) + ")");
        tape.backward(loss);
        std::vector<DenseMatrix> grads;
        grads.reserve(fwd.params.size());
        for (const core::Value& p : fwd.params) grads.push_back(tape.grad(p));
        std::vector<const DenseMatrix*> gptr;
        gptr.reserve(grads.size());
        for (const DenseMatrix& m : grads) gptr.push_back(&m);
        adam.step(params, gptr);

        core::Tape vtape;
        gnn::HybridOutput vfwd = gnn::hybrid_forward(vtape, g, out.model, nullptr, nullptr, false);
        const double val_loss = gnn::joint_loss(vtape, vfwd, val_sup, alpha).scalar();
        if (!std::isfinite(val_loss))
            throw TrainingError(ns + ": validation loss diverged at epoch " +
                                std::to_string(epoch) + " (" + fmt(val_loss) + ")");

        out.curve.train_loss.push_back(train_loss);
        out.curve.val_loss.push_back(val_loss);
        if (val_loss < best_val) {
            best_val = val_loss;
            out.best_epoch = epoch;
            best.clear();
            for (const DenseMatrix* p : params) best.push_back(*p);
        }
        out.epochs_run = epoch;
        if (log && epoch % 10 == 0)
            log("[" + ns + "] epoch " + std::to_string(epoch) + " train " + fmt(train_loss) +
                " val " + fmt(val_loss));
        if (epoch - out.best_epoch >= ocfg.patience) break;
    }
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = best[i];
    out.best_val_loss = best_val;
    return out;
}

void eval_forward(const graph::RoadGraph& g, const gnn::HybridModel& model, DenseMatrix* reg,
                  DenseMatrix* clf) {
    core::Tape tape;
    gnn::HybridOutput fwd = gnn::hybrid_forward(tape, g, model, nullptr, nullptr, false);
    if (reg != nullptr) *reg = fwd.reg.matrix();
    if (clf != nullptr) *clf = fwd.clf.matrix();
}

RegressionMetrics regression_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw ContractError("regression metrics: prediction and truth must align");
    RegressionMetrics m;
    double se = 0.0, ape = 0.0, tmean = 0.0;
    std::size_t ape_n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double err = pred[i] - truth[i];
        m.mae += std::abs(err);
        se += err * err;
        tmean += truth[i];
        if (truth[i] != 0.0) {
            ape += std::abs(err) / std::abs(truth[i]);
            ++ape_n;
        } else {
            ++m.mape_excluded;
        }
    }
    const double n = static_cast<double>(pred.size());
    m.mae /= n;
    m.rmse = std::sqrt(se / n);
    m.mape_pct = ape_n > 0 ? 100.0 * ape / static_cast<double>(ape_n) : 0.0;
    tmean /= n;
    double sst = 0.0;
    for (double t : truth) sst += (t - tmean) * (t - tmean);
    if (sst == 0.0) m.r2 = (se == 0.0) ? 1.0 : 0.0;
    else m.r2 = 1.0 - se / sst;
    return m;
}

ClassificationMetrics classification_metrics(const std::vector<int>& pred,
                                             const std::vector<int>& truth, int n_classes) {
    if (pred.size() != truth.size() || pred.empty())
        throw ContractError("classification metrics: prediction and truth must align");
    if (n_classes < 2) throw ContractError("classification metrics: need at least two classes");
    std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 1 || pred[i] > n_classes || truth[i] < 1 || truth[i] > n_classes)
            throw ContractError("classification metrics: class outside 1.." +
                                std::to_string(n_classes));
        if (pred[i] == truth[i]) {
            ++hits;
            ++tp[pred[i] - 1];
        } else {
            ++fp[pred[i] - 1];
            ++fn[truth[i] - 1];
        }
    }
    ClassificationMetrics m;
    m.accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
    for (int c = 0; c < n_classes; ++c) {
        const double p_den = static_cast<double>(tp[c] + fp[c]);
        const double r_den = static_cast<double>(tp[c] + fn[c]);
        const double p = p_den > 0.0 ? tp[c] / p_den : 0.0;
        const double r = r_den > 0.0 ? tp[c] / r_den : 0.0;
        const double f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
        m.macro_precision += p;
        m.macro_recall += r;
        m.macro_f1 += f1;
    }
    m.macro_precision /= n_classes;
    m.macro_recall /= n_classes;
    m.macro_f1 /= n_classes;
    return m;
}

namespace {

json metrics_to_json(const Metrics& m) {
    json j;
    j["mae"] = m.reg.mae;
    j["rmse"] = m.reg.rmse;
    j["mape_pct"] = m.reg.mape_pct;
    j["mape_excluded"] = m.reg.mape_excluded;
    j["r2"] = m.reg.r2;
    j["accuracy"] = m.clf.accuracy;
    j["macro_precision"] = m.clf.macro_precision;
    j["macro_recall"] = m.clf.macro_recall;
    j["macro_f1"] = m.clf.macro_f1;
    return j;
}

Metrics mean_metrics(const std::vector<FoldResult>& folds) {
    Metrics mean;
    for (const FoldResult& f : folds) {
        mean.reg.mae += f.metrics.reg.mae;
        mean.reg.rmse += f.metrics.reg.rmse;
        mean.reg.mape_pct += f.metrics.reg.mape_pct;
        mean.reg.mape_excluded += f.metrics.reg.mape_excluded;
        mean.reg.r2 += f.metrics.reg.r2;
        mean.clf.accuracy += f.metrics.clf.accuracy;
        mean.clf.macro_precision += f.metrics.clf.macro_precision;
        mean.clf.macro_recall += f.metrics.clf.macro_recall;
        mean.clf.macro_f1 += f.metrics.clf.macro_f1;
    }
    const double n = static_cast<double>(folds.size());
    mean.reg.mae /= n;
    mean.reg.rmse /= n;
    mean.reg.mape_pct /= n;
    mean.reg.r2 /= n;
    mean.clf.accuracy /= n;
    mean.clf.macro_precision /= n;
    mean.clf.macro_recall /= n;
    mean.clf.macro_f1 /= n;
    return mean;
}

}  // namespace

json report_to_json(const RunReport& report) {
    json j;
    j["config_fingerprint"] = report.config_fingerprint;
    j["seed"] = report.seed;
    json folds = json::array();
    for (const FoldResult& f : report.folds) {
        json jf = metrics_to_json(f.metrics);
        jf["fold"] = f.fold;
        jf["pretrain_best"] = f.pretrain_best;
        jf["pretrain_epochs"] = f.pretrain_epochs;
        jf["final_best"] = f.final_best;
        jf["final_epochs"] = f.final_epochs;
        jf["final_val_loss"] = f.final_val_loss;
        jf["synthetic_requested"] = f.synthetic_requested;
        jf["synthetic_survivors"] = f.synthetic_survivors;
        folds.push_back(std::move(jf));
    }
    j["folds"] = std::move(folds);
    j["mean"] = metrics_to_json(report.mean);
    return j;
}

std::string report_to_csv(const RunReport& report) {
    std::string out =
        "fold,mae,rmse,mape_pct,mape_excluded,r2,accuracy,macro_precision,macro_recall,"
        "macro_f1,synthetic_requested,synthetic_survivors\n";
    auto row = [&](const std::string& label, const Metrics& m, std::size_t req, std::size_t sur) {
        out += label + "," + fmt(m.reg.mae) + "," + fmt(m.reg.rmse) + "," + fmt(m.reg.mape_pct) +
               "," + std::to_string(m.reg.mape_excluded) + "," + fmt(m.reg.r2) + "," +
               fmt(m.clf.accuracy) + "," + fmt(m.clf.macro_precision) + "," +
               fmt(m.clf.macro_recall) + "," + fmt(m.clf.macro_f1) + "," + std::to_string(req) +
               "," + std::to_string(sur) + "\n";
    };
    for (const FoldResult& f : report.folds)
        row(std::to_string(f.fold), f.metrics, f.synthetic_requested, f.synthetic_survivors);
    std::size_t req = 0, sur = 0;
    for (const FoldResult& f : report.folds) {
        req += f.synthetic_requested;
        sur += f.synthetic_survivors;
    }
    row("mean", report.mean, req, sur);
    return out;
}

Metrics evaluate_fold(const graph::RoadGraph& combined, const gnn::HybridModel& model,
                      const graph::TargetScaler& scaler, const graph::LabelSet& labels,
                      const std::vector<std::uint32_t>& test_nodes) {
    if (test_nodes.empty()) throw ContractError("evaluate: empty test set");
    DenseMatrix reg, clf;
    eval_forward(combined, model, &reg, &clf);

    std::vector<double> pred_adb, true_adb;
    std::vector<int> pred_cls, true_cls;
    for (std::uint32_t node : test_nodes) {
        auto it = std::lower_bound(labels.indices.begin(), labels.indices.end(), node);
        if (it == labels.indices.end() || *it != node)
            throw AuditError("evaluate: test node " + std::to_string(node) + " has no label");
        const std::size_t pos = static_cast<std::size_t>(it - labels.indices.begin());
        pred_adb.push_back(scaler.denormalize(reg(node, 0)));
        true_adb.push_back(labels.adb[pos]);
        std::size_t best = 0;
        for (std::size_t c = 1; c < clf.cols; ++c)
            if (clf(node, c) > clf(node, best)) best = c;
        pred_cls.push_back(static_cast<int>(best) + 1);
        true_cls.push_back(labels.traffic_class[pos]);
    }
    Metrics m;
    m.reg = regression_metrics(pred_adb, true_adb);
    m.clf = classification_metrics(pred_cls, true_cls, static_cast<int>(clf.cols));
    return m;
}

namespace {

// Throws AuditError unless a and b are disjoint.
void assert_disjoint(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b,
                     const char* what) {
    std::vector<std::uint32_t> sa = a, sb = b;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    for (std::uint32_t v : sb)
        if (std::binary_search(sa.begin(), sa.end(), v))
            throw AuditError(std::string("leakage audit failed: ") + what);
}

std::vector<std::uint32_t> to_node_indices(const graph::LabelSet& labels,
                                           const std::vector<std::uint32_t>& positions) {
    std::vector<std::uint32_t> out;
    out.reserve(positions.size());
    for (std::uint32_t p : positions) out.push_back(labels.indices[p]);
    return out;
}

FoldArtifacts run_fold(const graph::RoadGraph& g, const graph::LabelSet& labels,
                       const TrainConfig& cfg, const FoldSplit& sp, std::size_t fold,
                       const LogFn& log) {
    const std::string tag = "fold" + std::to_string(fold);

    const auto train_nodes = to_node_indices(labels, sp.train);
    const auto val_nodes = to_node_indices(labels, sp.val);
    const auto test_nodes = to_node_indices(labels, sp.test);
    assert_disjoint(train_nodes, test_nodes, "train and test overlap");
    assert_disjoint(val_nodes, test_nodes, "validation and test overlap");
    assert_disjoint(train_nodes, val_nodes, "train and validation overlap");
    if (sp.train.size() + sp.val.size() + sp.test.size() != labels.size())
        throw AuditError("leakage audit failed: split does not partition the label set");

    // Normalization statistics come from the training partition only.
    std::vector<double> train_adb;
    for (std::uint32_t p : sp.train) train_adb.push_back(labels.adb[p]);
    for (std::uint32_t p : sp.val) train_adb.push_back(labels.adb[p]);
    graph::TargetScaler scaler = graph::TargetScaler::fit(train_adb);

    gnn::SupervisionSet train_sup = supervision_from_labels(labels, sp.train, scaler, 1.0);
    gnn::SupervisionSet val_sup = supervision_from_labels(labels, sp.val, scaler, 1.0);

    TrainedGnn pre = train_gnn(g, train_sup, val_sup, cfg.model, cfg.optim, cfg.alpha, cfg.seed,
                               tag + ".pre", log);

    std::size_t requested = 0;
    if (cfg.augment.use_vae)
        requested = cfg.augment.count > 0 ? cfg.augment.count : sp.train.size();

    vae::VaeModel vae_model;  // left untouched when no synthesis is requested
    vae::AugmentConfig acfg;
    acfg.m = requested;
    acfg.tau = cfg.augment.tau;
    acfg.k = cfg.augment.k;
    acfg.seed = core::derive_seed(cfg.seed, tag + ".aug");
    if (requested > 0) {
        if (log) log("[" + tag + "] training feature synthesizer");
        vae_model = vae::train_vae(g, cfg.vae, core::derive_seed(cfg.seed, tag + ".vae"));
    }
    vae::AugmentedGraph aug = vae::augment(g, train_nodes, vae_model, pre.model, scaler, acfg);
    for (const auto& [s, anchor] : aug.synthetic_edges)
        if (std::find(train_nodes.begin(), train_nodes.end(), anchor) == train_nodes.end())
            throw AuditError("leakage audit failed: synthetic edge outside the training anchors");

    graph::RoadGraph combined = aug.combined();
    TrainedGnn final_model;
    if (aug.survivors() > 0) {
        gnn::SupervisionSet sup2 = train_sup;
        const std::size_t n = g.n_nodes();
        for (std::size_t s = 0; s < aug.survivors(); ++s) {
            sup2.indices.push_back(static_cast<std::uint32_t>(n + s));
            sup2.target_norm.push_back(scaler.normalize(aug.pseudo_adb[s]));
            sup2.class_idx.push_back(static_cast<std::uint32_t>(aug.pseudo_class[s] - 1));
            sup2.weight.push_back(cfg.augment.pseudo_weight);
        }
        assert_disjoint(sup2.indices, test_nodes, "supervision touches test nodes");
        final_model = train_gnn(combined, sup2, val_sup, cfg.model, cfg.optim, cfg.alpha,
                                cfg.seed, tag + ".fin", log);
    } else {
        final_model = std::move(pre);
    }

    FoldArtifacts art{FoldResult{}, std::move(final_model.model), scaler, test_nodes,
                      std::move(aug)};
    art.result.fold = fold;
    art.result.metrics = evaluate_fold(combined, art.model, scaler, labels, test_nodes);
    art.result.pretrain_best = aug.survivors() > 0 ? pre.best_epoch : final_model.best_epoch;
    art.result.pretrain_epochs = aug.survivors() > 0 ? pre.epochs_run : final_model.epochs_run;
    art.result.final_best = final_model.best_epoch;
    art.result.final_epochs = final_model.epochs_run;
    art.result.final_val_loss = final_model.best_val_loss;
    art.result.synthetic_requested = requested;
    art.result.synthetic_survivors = aug.survivors();
    if (log)
        log("[" + tag + "] test mae " + fmt(art.result.metrics.reg.mae) + " r2 " +
            fmt(art.result.metrics.reg.r2) + " accuracy " +
            fmt(art.result.metrics.clf.accuracy));
    return art;
}

}  // namespace

PipelineResult run_pipeline(const graph::RoadGraph& g, const graph::LabelSet& labels,
                            const TrainConfig& cfg, const LogFn& log) {
    cfg.validate();
    for (int cls : labels.traffic_class)
        if (cls > static_cast<int>(cfg.model.n_classes))
            throw ConfigError("label class exceeds model.classes");

    const auto splits = split_folds(labels, cfg.folds, cfg.split, cfg.seed);
    std::vector<std::optional<FoldArtifacts>> slots(cfg.folds);

    const std::size_t workers = std::min(cfg.jobs, cfg.folds);
    if (workers <= 1) {
        for (std::size_t f = 0; f < cfg.folds; ++f)
            slots[f].emplace(run_fold(g, labels, cfg, splits[f], f, log));
    } else {
        std::atomic<std::size_t> next{0};
        std::mutex err_mutex;
        std::exception_ptr error;
        auto body = [&]() {
            for (;;) {
                const std::size_t f = next.fetch_add(1);
                if (f >= cfg.folds) return;
                try {
                    slots[f].emplace(run_fold(g, labels, cfg, splits[f], f, log));
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
        for (std::thread& t : pool) t.join();
        if (error) std::rethrow_exception(error);
    }

    PipelineResult result;
    result.report.config_fingerprint = cfg.fingerprint();
    result.report.seed = cfg.seed;
    for (std::size_t f = 0; f < cfg.folds; ++f) {
        result.report.folds.push_back(slots[f]->result);
        result.folds.push_back(std::move(*slots[f]));
    }
    result.report.mean = mean_metrics(result.report.folds);
    result.best_fold = 0;
    for (std::size_t f = 1; f < result.report.folds.size(); ++f)
        if (result.report.folds[f].final_val_loss <
            result.report.folds[result.best_fold].final_val_loss)
            result.best_fold = f;
    return result;
}

}  // namespace bikevol::train
