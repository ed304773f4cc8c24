#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bikevol/errors.hpp"
#include "bikevol/hybrid.hpp"
#include "bikevol/io.hpp"
#include "bikevol/matrix.hpp"
#include "bikevol/targets.hpp"
#include "bikevol/train.hpp"
#include "bikevol/vae.hpp"

namespace fs = std::filesystem;
using namespace bikevol;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("failed while writing " + path);
}

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

struct CheckpointedRun {
    io::Checkpoint ckpt;
    io::Dataset data;
    gnn::HybridModel model;
    graph::RoadGraph combined;
    graph::TargetScaler scaler;
};

CheckpointedRun reopen(const std::string& ckpt_path, const std::string& data_dir) {
    io::Checkpoint ck = io::load_checkpoint(ckpt_path);
    io::Dataset ds = io::load_dataset(data_dir);
    if (ds.schema.fingerprint() != ck.schema_fingerprint)
        throw DataError("dataset schema does not match the checkpoint");
    gnn::HybridModel model = io::model_from_checkpoint(ck);
    graph::RoadGraph combined = io::augmented_from_checkpoint(ck, ds.graph).combined();
    graph::TargetScaler scaler(ck.scaler_lo, ck.scaler_hi);
    return CheckpointedRun{std::move(ck), std::move(ds), std::move(model), std::move(combined),
                           std::move(scaler)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bikevol: bicycle volume estimation on road-segment graphs"};
    app.require_subcommand(1);

    // generate ------------------------------------------------------------
    auto* gen = app.add_subcommand("generate", "Write a synthetic street dataset");
    io::GeneratorConfig gen_cfg;
    std::string gen_out;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--nodes", gen_cfg.n_nodes, "number of road segments");
    gen->add_option("--label-fraction", gen_cfg.label_fraction,
                    "fraction of segments with count stations");
    gen->add_option("--days", gen_cfg.days, "days of counts per station (1..28)");
    gen->add_option("--seed", gen_cfg.seed, "generator seed");
    gen->callback([&] {
        io::generate_dataset(gen_out, gen_cfg);
        std::cout << "dataset with " << gen_cfg.n_nodes << " segments written to " << gen_out
                  << "\n";
    });

    // train ---------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "Run the full cross-validated pipeline");
    std::string tr_data, tr_out, tr_config, tr_mode;
    bool no_gat = false, no_sage = false, no_vae = false;
    double tr_alpha = 0.0, tr_tau = 0.0;
    std::size_t tr_count = 0, tr_jobs = 0, tr_folds = 0;
    std::uint64_t tr_seed = 0;
    std::vector<std::string> tr_sets;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory for reports and checkpoint")->required();
    tr->add_option("--config", tr_config, "JSON config file to start from");
    auto* o_mode = tr->add_option("--mode", tr_mode, "branch fusion: parallel or sequential");
    tr->add_flag("--no-gat", no_gat, "disable the attention branch");
    tr->add_flag("--no-sage", no_sage, "disable the sampling branch");
    tr->add_flag("--no-vae", no_vae, "disable synthetic augmentation");
    auto* o_alpha = tr->add_option("--alpha", tr_alpha, "regression weight in the joint loss");
    auto* o_tau = tr->add_option("--tau", tr_tau, "cosine threshold for synthetic attachment");
    auto* o_count = tr->add_option("--synthetic-count", tr_count, "synthetic nodes per fold");
    auto* o_jobs = tr->add_option("--jobs", tr_jobs, "folds trained in parallel");
    auto* o_seed = tr->add_option("--seed", tr_seed, "master seed");
    auto* o_folds = tr->add_option("--folds", tr_folds, "number of Monte-Carlo folds");
    tr->add_option("--set", tr_sets, "dotted-key override, e.g. --set optim.lr=0.02");
    tr->callback([&] {
        train::TrainConfig cfg;
        if (!tr_config.empty()) {
            std::ifstream in(tr_config, std::ios::binary);
            if (!in) throw IoError("cannot open " + tr_config);
            nlohmann::json parsed;
            try {
                parsed = nlohmann::json::parse(in);
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(tr_config, e.what());
            }
            cfg = train::config_from_json(parsed);
        }
        if (o_mode->count()) train::apply_override(cfg, "model.mode", tr_mode);
        if (no_gat) cfg.model.mask.gat = false;
        if (no_sage) cfg.model.mask.sage = false;
        if (no_vae) cfg.augment.use_vae = false;
        if (o_alpha->count()) cfg.alpha = tr_alpha;
        if (o_tau->count()) cfg.augment.tau = tr_tau;
        if (o_count->count()) cfg.augment.count = tr_count;
        if (o_jobs->count()) cfg.jobs = tr_jobs;
        if (o_seed->count()) cfg.seed = tr_seed;
        if (o_folds->count()) cfg.folds = tr_folds;
        for (const std::string& kv : tr_sets) {
            const std::size_t eq = kv.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ConfigError("--set expects key=value, got '" + kv + "'");
            train::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();

        io::Dataset ds = io::load_dataset(tr_data);
        fs::create_directories(tr_out);
        const auto started = std::chrono::steady_clock::now();
        train::PipelineResult res = train::run_pipeline(
            ds.graph, ds.labels, cfg, [](const std::string& line) { std::cerr << line << "\n"; });
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        std::cerr << "pipeline finished in " << fmt("%.1f", secs) << "s\n";

        const fs::path out(tr_out);
        write_text((out / "config.json").string(), train::config_to_json(cfg).dump(2) + "\n");
        write_text((out / "report.json").string(), train::report_to_json(res.report).dump(2) + "\n");
        write_text((out / "report.csv").string(), train::report_to_csv(res.report));
        io::save_checkpoint((out / "checkpoint.ckpt").string(),
                            io::make_checkpoint(cfg, ds.schema.fingerprint(),
                                                res.folds[res.best_fold]));

        const train::Metrics& m = res.report.mean;
        std::cout << "config " << res.report.config_fingerprint << ", " << res.report.folds.size()
                  << " folds, best fold " << res.best_fold << "\n";
        std::cout << "mean MAE " << fmt("%.4f", m.reg.mae) << ", RMSE " << fmt("%.4f", m.reg.rmse)
                  << ", R2 " << fmt("%.4f", m.reg.r2) << ", accuracy "
                  << fmt("%.4f", m.clf.accuracy) << ", macro F1 " << fmt("%.4f", m.clf.macro_f1)
                  << "\n";
        std::cout << "report written to " << (out / "report.json").string() << "\n";
    });

    // evaluate ------------------------------------------------------------
    auto* ev = app.add_subcommand("evaluate", "Re-run a checkpoint's held-out evaluation");
    std::string ev_data, ev_ckpt;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->callback([&] {
        CheckpointedRun run = reopen(ev_ckpt, ev_data);
        train::Metrics m = train::evaluate_fold(run.combined, run.model, run.scaler,
                                                run.data.labels, run.ckpt.test_nodes);
        nlohmann::json j{{"fold", run.ckpt.fold},
                         {"test_nodes", run.ckpt.test_nodes.size()},
                         {"mae", m.reg.mae},
                         {"rmse", m.reg.rmse},
                         {"mape_pct", m.reg.mape_pct},
                         {"mape_excluded", m.reg.mape_excluded},
                         {"r2", m.reg.r2},
                         {"accuracy", m.clf.accuracy},
                         {"macro_precision", m.clf.macro_precision},
                         {"macro_recall", m.clf.macro_recall},
                         {"macro_f1", m.clf.macro_f1}};
        std::cout << j.dump(2) << "\n";
    });

    // predict -------------------------------------------------------------
    auto* pr = app.add_subcommand("predict", "Estimate volume and class for every segment");
    std::string pr_data, pr_ckpt, pr_out;
    pr->add_option("--data", pr_data, "dataset directory")->required();
    pr->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
    pr->add_option("--out", pr_out, "output CSV path")->required();
    pr->callback([&] {
        CheckpointedRun run = reopen(pr_ckpt, pr_data);
        core::DenseMatrix reg, clf;
        train::eval_forward(run.combined, run.model, &reg, &clf);

        const std::size_t n = run.data.graph.n_nodes();
        io::CsvTable out;
        out.header = {"segment_id", "adb_pred", "class_pred"};
        std::vector<double> adb(n);
        for (std::size_t i = 0; i < n; ++i) {
            adb[i] = std::max(0.0, run.scaler.denormalize(reg(i, 0)));
            std::size_t best = 0;
            for (std::size_t c = 1; c < clf.cols; ++c)
                if (clf(i, c) > clf(i, best)) best = c;
            out.rows.push_back({run.data.graph.node_ids()[i], fmt("%.4f", adb[i]),
                                std::to_string(best + 1)});
        }
        io::write_csv(pr_out, out);
        std::cout << "predictions for " << n << " segments written to " << pr_out << "\n";

        if (!run.data.oracle_adb.empty()) {
            std::vector<char> labeled(n, 0);
            for (std::uint32_t idx : run.data.labels.indices) labeled[idx] = 1;
            double err = 0.0;
            std::size_t cnt = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (labeled[i]) continue;
                err += std::abs(adb[i] - run.data.oracle_adb[i]);
                ++cnt;
            }
            if (cnt > 0)
                std::cout << "oracle MAE over " << cnt << " unlabeled segments: "
                          << fmt("%.4f", err / static_cast<double>(cnt)) << "\n";
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
