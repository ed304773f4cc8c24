#include "bikevol/hybrid.hpp"

#include <algorithm>
#include <cmath>

#include "bikevol/errors.hpp"

namespace bikevol::gnn {

namespace {

core::DenseMatrix glorot(std::size_t rows, std::size_t cols, core::RngStream& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    core::DenseMatrix m(rows, cols);
    for (double& v : m.data) {
        v = limit * (2.0 * rng.uniform() - 1.0);
    }
    return m;
}

core::DenseMatrix init_param(std::size_t rows, std::size_t cols, std::uint64_t seed,
                             std::string_view name) {
    core::RngStream rng = core::derive_stream(seed, name);
    return glorot(rows, cols, rng);
}

void check_rows(const graph::RoadGraph& g, const core::Value& h, const char* who) {
    if (h.rows() != g.n_nodes()) {
        throw ShapeError(std::string(who) + ": feature rows do not match node count");
    }
}

}  // namespace

std::size_t HybridModel::fused_width() const {
    if (cfg.mode == FusionMode::parallel) {
        return cfg.hidden * static_cast<std::size_t>(cfg.mask.enabled_count());
    }
    return cfg.hidden;
}

std::vector<std::pair<std::string, core::DenseMatrix*>> HybridModel::named_parameters() {
    std::vector<std::pair<std::string, core::DenseMatrix*>> out;
    if (cfg.mask.gcn) {
        out.emplace_back("gcn.w", &w_gcn);
    }
    if (cfg.mask.gat) {
        out.emplace_back("gat.w", &w_gat);
        out.emplace_back("gat.a", &a_gat);
    }
    if (cfg.mask.sage) {
        out.emplace_back("sage.w", &w_sage);
    }
    if (cfg.learned_gate && cfg.mode == FusionMode::parallel) {
        out.emplace_back("gate", &gate);
    }
    out.emplace_back("head.reg", &w_reg);
    out.emplace_back("head.clf", &w_clf);
    return out;
}

std::vector<std::pair<std::string, const core::DenseMatrix*>> HybridModel::named_parameters()
    const {
    auto mutable_view = const_cast<HybridModel*>(this)->named_parameters();
    std::vector<std::pair<std::string, const core::DenseMatrix*>> out;
    out.reserve(mutable_view.size());
    for (auto& [name, m] : mutable_view) {
        out.emplace_back(name, m);
    }
    return out;
}

std::vector<core::DenseMatrix*> HybridModel::parameters() {
    std::vector<core::DenseMatrix*> out;
    for (auto& [name, m] : named_parameters()) {
        out.push_back(m);
    }
    return out;
}

HybridModel HybridModel::init(const HybridConfig& cfg, std::size_t in_dim, std::uint64_t seed) {
    if (cfg.mask.enabled_count() == 0) {
        throw ContractError("hybrid: all branches disabled");
    }
    if (cfg.hidden == 0 || in_dim == 0) {
        throw ContractError("hybrid: zero width");
    }
    HybridModel m;
    m.cfg = cfg;
    m.in_dim = in_dim;

    const std::size_t h = cfg.hidden;
    if (cfg.mode == FusionMode::parallel) {
        if (cfg.mask.gcn) {
            m.w_gcn = init_param(in_dim, h, seed, "init.gcn.w");
        }
        if (cfg.mask.gat) {
            m.w_gat = init_param(in_dim, h, seed, "init.gat.w");
            m.a_gat = init_param(2 * h, 1, seed, "init.gat.a");
        }
        if (cfg.mask.sage) {
            m.w_sage = init_param(2 * in_dim, h, seed, "init.sage.w");
        }
    } else {
        std::size_t cur = in_dim;
        if (cfg.mask.gcn) {
            m.w_gcn = init_param(cur, h, seed, "init.gcn.w");
            cur = h;
        }
        if (cfg.mask.gat) {
            m.w_gat = init_param(cur, h, seed, "init.gat.w");
            m.a_gat = init_param(2 * h, 1, seed, "init.gat.a");
            cur = h;
        }
        if (cfg.mask.sage) {
            m.w_sage = init_param(2 * cur, h, seed, "init.sage.w");
        }
    }
    if (cfg.learned_gate && cfg.mode == FusionMode::parallel) {
        m.gate = core::DenseMatrix::zeros(1, static_cast<std::size_t>(cfg.mask.enabled_count()));
    }
    const std::size_t fused = m.fused_width();
    m.w_reg = init_param(fused, 1, seed, "init.head.reg");
    m.w_clf = init_param(fused, cfg.n_classes, seed, "init.head.clf");
    return m;
}

core::Value gcn_forward(core::Tape& tape, const graph::RoadGraph& g, core::Value h,
                        core::Value w) {
    check_rows(g, h, "gcn");
    if (w.rows() != h.cols()) {
        throw ShapeError("gcn: weight rows do not match input width");
    }
    core::Value wh = core::matmul(h, w);
    core::Value coeff = tape.constant(g.conv_coefficients());
    return core::relu(core::edge_weighted_sum(coeff, wh, g.self_loop_groups()));
}

core::Value gat_forward(core::Tape& tape, const graph::RoadGraph& g, core::Value h, core::Value w,
                        core::Value a, double leaky_slope) {
    check_rows(g, h, "gat");
    if (w.rows() != h.cols()) {
        throw ShapeError("gat: weight rows do not match input width");
    }
    const std::size_t d_out = w.cols();
    if (a.rows() != 2 * d_out || a.cols() != 1) {
        throw ShapeError("gat: attention vector must be (2*d_out) x 1");
    }
    core::Value wh = core::matmul(h, w);
    core::Value self_score = core::matmul(wh, core::slice_rows(a, 0, d_out));
    core::Value nbr_score = core::matmul(wh, core::slice_rows(a, d_out, 2 * d_out));
    auto groups = g.self_loop_groups();
    core::Value e = core::leaky_relu(core::pair_sum(self_score, nbr_score, groups), leaky_slope);
    core::Value alpha = core::segment_softmax(e, groups);
    return core::relu(core::edge_weighted_sum(alpha, wh, groups));
}

core::Value sage_forward(core::Tape& tape, const graph::RoadGraph& g, core::Value h, core::Value w,
                         std::size_t sample_size, core::RngStream* sampler) {
    check_rows(g, h, "sage");
    if (w.rows() != 2 * h.cols()) {
        throw ShapeError("sage: weight rows must be twice the input width");
    }
    if (sample_size == 0) {
        throw ContractError("sage: sample size must be positive");
    }

    auto groups = std::make_shared<core::EdgeGroups>();
    const std::size_t n = g.n_nodes();
    groups->offsets.reserve(n + 1);
    groups->offsets.push_back(0);
    std::vector<double> weights;
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto& nbrs = g.neighbors(i);
        if (sampler != nullptr && nbrs.size() > sample_size) {
            auto picks = sampler->sample_without_replacement(
                static_cast<std::uint32_t>(nbrs.size()), static_cast<std::uint32_t>(sample_size));
            std::sort(picks.begin(), picks.end());
            for (std::uint32_t p : picks) {
                groups->target.push_back(i);
                groups->source.push_back(nbrs[p]);
            }
        } else {
            for (std::uint32_t j : nbrs) {
                groups->target.push_back(i);
                groups->source.push_back(j);
            }
        }
        const std::size_t count = groups->target.size() - groups->offsets.back();
        for (std::size_t k = 0; k < count; ++k) {
            weights.push_back(1.0 / static_cast<double>(count));
        }
        groups->offsets.push_back(static_cast<std::uint32_t>(groups->target.size()));
    }

    core::DenseMatrix coeff(weights.size(), 1);
    coeff.data = std::move(weights);
    core::Value mean = core::edge_weighted_sum(tape.constant(coeff), h, groups);
    std::vector<core::Value> parts = {mean, h};
    return core::relu(core::matmul(core::concat_cols(parts), w));
}

HybridOutput hybrid_forward(core::Tape& tape, const graph::RoadGraph& g, const HybridModel& model,
                            core::RngStream* dropout_rng, core::RngStream* sample_rng,
                            bool training) {
    if (model.cfg.mask.enabled_count() == 0) {
        throw ContractError("hybrid: all branches disabled");
    }
    if (g.feature_dim() != model.in_dim) {
        throw ShapeError("hybrid: graph feature width does not match the model");
    }
    if (training && (dropout_rng == nullptr || sample_rng == nullptr)) {
        throw ContractError("hybrid: training mode requires rng streams");
    }

    const HybridConfig& cfg = model.cfg;
    core::Value x = tape.constant(g.features());

    HybridOutput out;
    core::Value v_gcn, v_gat_w, v_gat_a, v_sage, v_gate, v_reg, v_clf;
    if (cfg.mask.gcn) {
        v_gcn = tape.leaf(model.w_gcn);
        out.params.push_back(v_gcn);
    }
    if (cfg.mask.gat) {
        v_gat_w = tape.leaf(model.w_gat);
        v_gat_a = tape.leaf(model.a_gat);
        out.params.push_back(v_gat_w);
        out.params.push_back(v_gat_a);
    }
    if (cfg.mask.sage) {
        v_sage = tape.leaf(model.w_sage);
        out.params.push_back(v_sage);
    }
    const bool gated = cfg.learned_gate && cfg.mode == FusionMode::parallel;
    if (gated) {
        v_gate = tape.leaf(model.gate);
        out.params.push_back(v_gate);
    }
    v_reg = tape.leaf(model.w_reg);
    v_clf = tape.leaf(model.w_clf);
    out.params.push_back(v_reg);
    out.params.push_back(v_clf);

    core::RngStream* sampler = training ? sample_rng : nullptr;

    core::Value rep;
    if (cfg.mode == FusionMode::parallel) {
        std::vector<core::Value> branches;
        if (cfg.mask.gcn) {
            branches.push_back(gcn_forward(tape, g, x, v_gcn));
        }
        if (cfg.mask.gat) {
            branches.push_back(gat_forward(tape, g, x, v_gat_w, v_gat_a, cfg.leaky_slope));
        }
        if (cfg.mask.sage) {
            branches.push_back(sage_forward(tape, g, x, v_sage, cfg.sample_size, sampler));
        }
        if (gated) {
            core::Value weights = core::softmax_rows(v_gate);
            for (std::size_t b = 0; b < branches.size(); ++b) {
                branches[b] =
                    core::mul_by_scalar_node(branches[b], core::slice_cols(weights, b, b + 1));
            }
        }
        rep = branches.size() == 1 ? branches[0] : core::concat_cols(branches);
    } else {
        core::Value cur = x;
        if (cfg.mask.gcn) {
            cur = gcn_forward(tape, g, cur, v_gcn);
        }
        if (cfg.mask.gat) {
            cur = gat_forward(tape, g, cur, v_gat_w, v_gat_a, cfg.leaky_slope);
        }
        if (cfg.mask.sage) {
            cur = sage_forward(tape, g, cur, v_sage, cfg.sample_size, sampler);
        }
        rep = cur;
    }

    if (training && cfg.dropout_rate > 0.0) {
        rep = core::dropout(rep, cfg.dropout_rate, *dropout_rng, true);
    }

    out.reg = core::matmul(rep, v_reg);
    out.clf = core::softmax_rows(core::matmul(rep, v_clf));
    return out;
}

core::Value joint_loss(core::Tape& tape, const HybridOutput& out, const SupervisionSet& sup,
                       double alpha) {
    if (sup.size() == 0) {
        throw ContractError("joint loss: empty supervision set");
    }
    if (sup.target_norm.size() != sup.size() || sup.class_idx.size() != sup.size() ||
        sup.weight.size() != sup.size()) {
        throw ContractError("joint loss: supervision columns misaligned");
    }
    if (alpha < 0.0 || alpha > 1.0) {
        throw ContractError("joint loss: alpha outside [0,1]");
    }
    const std::size_t n_classes = out.clf.cols();
    double total_w = 0.0;
    for (std::size_t k = 0; k < sup.size(); ++k) {
        if (!(sup.weight[k] > 0.0)) {
            throw ContractError("joint loss: non-positive supervision weight");
        }
        if (sup.class_idx[k] >= n_classes) {
            throw ContractError("joint loss: class index out of range");
        }
        total_w += sup.weight[k];
    }

    core::DenseMatrix targets(sup.size(), 1);
    core::DenseMatrix wnorm(sup.size(), 1);
    for (std::size_t k = 0; k < sup.size(); ++k) {
        targets(k, 0) = sup.target_norm[k];
        wnorm(k, 0) = sup.weight[k] / total_w;
    }
    core::Value t = tape.constant(targets);
    core::Value wn = tape.constant(wnorm);

    core::Value reg_k = core::gather_rows(out.reg, sup.indices);
    core::Value diff = core::sub(reg_k, t);
    core::Value mse = core::sum_all(core::mul(core::mul(diff, diff), wn));

    core::Value probs_k = core::gather_rows(out.clf, sup.indices);
    core::Value p_true = core::select_col_per_row(probs_k, sup.class_idx);
    core::Value ce = core::scale(core::sum_all(core::mul(core::log_elem(p_true), wn)), -1.0);

    return core::add(core::scale(mse, alpha), core::scale(ce, 1.0 - alpha));
}

}  // namespace bikevol::gnn
