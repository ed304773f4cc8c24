#include "bikevol/vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bikevol/adam.hpp"
#include "bikevol/errors.hpp"

namespace bikevol::vae {

using core::DenseMatrix;
using core::RngStream;
using core::Tape;
using core::Value;

namespace {

DenseMatrix glorot(std::size_t rows, std::size_t cols, std::uint64_t seed,
                   const std::string& name) {
    RngStream stream = core::derive_stream(seed, name);
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    DenseMatrix m(rows, cols);
    for (double& v : m.data) v = limit * (2.0 * stream.uniform() - 1.0);
    return m;
}

}  // namespace

std::vector<std::pair<std::string, DenseMatrix*>> VaeModel::named_parameters() {
    return {
        {"enc.w1", &enc_w1}, {"enc.b1", &enc_b1},
        {"enc.w2", &enc_w2}, {"enc.b2", &enc_b2},
        {"mu.w", &w_mu},     {"mu.b", &b_mu},
        {"logvar.w", &w_logvar}, {"logvar.b", &b_logvar},
        {"dec.w1", &dec_w1}, {"dec.b1", &dec_b1},
        {"dec.w2", &dec_w2}, {"dec.b2", &dec_b2},
        {"dec.w3", &dec_w3}, {"dec.b3", &dec_b3},
        {"edge.w", &w_edge},
    };
}

std::vector<std::pair<std::string, const DenseMatrix*>> VaeModel::named_parameters() const {
    auto mutable_list = const_cast<VaeModel*>(this)->named_parameters();
    std::vector<std::pair<std::string, const DenseMatrix*>> out;
    out.reserve(mutable_list.size());
    for (auto& [name, ptr] : mutable_list) out.emplace_back(name, ptr);
    return out;
}

std::vector<DenseMatrix*> VaeModel::parameters() {
    std::vector<DenseMatrix*> out;
    for (auto& [name, ptr] : named_parameters()) out.push_back(ptr);
    return out;
}

VaeModel VaeModel::init(const VaeConfig& cfg, std::size_t in_dim, std::uint64_t seed) {
    if (in_dim == 0) throw ContractError("vae init: zero input width");
    if (cfg.latent == 0 || cfg.enc_h1 == 0 || cfg.enc_h2 == 0)
        throw ContractError("vae init: zero layer width");
    VaeModel m;
    m.cfg = cfg;
    m.in_dim = in_dim;
    m.enc_w1 = glorot(in_dim, cfg.enc_h1, seed, "init.vae.enc.w1");
    m.enc_b1 = DenseMatrix(1, cfg.enc_h1);
    m.enc_w2 = glorot(cfg.enc_h1, cfg.enc_h2, seed, "init.vae.enc.w2");
    m.enc_b2 = DenseMatrix(1, cfg.enc_h2);
    m.w_mu = glorot(cfg.enc_h2, cfg.latent, seed, "init.vae.mu.w");
    m.b_mu = DenseMatrix(1, cfg.latent);
    m.w_logvar = glorot(cfg.enc_h2, cfg.latent, seed, "init.vae.logvar.w");
    m.b_logvar = DenseMatrix(1, cfg.latent);
    m.dec_w1 = glorot(cfg.latent, cfg.enc_h2, seed, "init.vae.dec.w1");
    m.dec_b1 = DenseMatrix(1, cfg.enc_h2);
    m.dec_w2 = glorot(cfg.enc_h2, cfg.enc_h1, seed, "init.vae.dec.w2");
    m.dec_b2 = DenseMatrix(1, cfg.enc_h1);
    m.dec_w3 = glorot(cfg.enc_h1, in_dim, seed, "init.vae.dec.w3");
    m.dec_b3 = DenseMatrix(1, in_dim);
    m.w_edge = glorot(cfg.latent, cfg.latent, seed, "init.vae.edge.w");
    return m;
}

VaeBinding bind_vae(Tape& tape, const VaeModel& model) {
    VaeBinding b;
    auto named = model.named_parameters();
    b.params.reserve(named.size());
    for (auto& [name, ptr] : named) b.params.push_back(tape.leaf(*ptr));
    std::size_t i = 0;
    b.enc_w1 = b.params[i++];
    b.enc_b1 = b.params[i++];
    b.enc_w2 = b.params[i++];
    b.enc_b2 = b.params[i++];
    b.w_mu = b.params[i++];
    b.b_mu = b.params[i++];
    b.w_logvar = b.params[i++];
    b.b_logvar = b.params[i++];
    b.dec_w1 = b.params[i++];
    b.dec_b1 = b.params[i++];
    b.dec_w2 = b.params[i++];
    b.dec_b2 = b.params[i++];
    b.dec_w3 = b.params[i++];
    b.dec_b3 = b.params[i++];
    b.w_edge = b.params[i++];
    return b;
}

VaeEncode vae_encode(Tape& tape, const VaeBinding& b, Value x, const DenseMatrix* eps) {
    Value h1 = core::relu(core::add_rowvec(core::matmul(x, b.enc_w1), b.enc_b1));
    Value h2 = core::relu(core::add_rowvec(core::matmul(h1, b.enc_w2), b.enc_b2));
    VaeEncode out;
    out.mu = core::add_rowvec(core::matmul(h2, b.w_mu), b.b_mu);
    out.logvar = core::add_rowvec(core::matmul(h2, b.w_logvar), b.b_logvar);
    out.sigma = core::exp_elem(core::scale(out.logvar, 0.5));
    if (eps == nullptr) {
        out.z = out.mu;
    } else {
        if (eps->rows != out.mu.rows() || eps->cols != out.mu.cols())
            throw ShapeError("vae encode: noise shape does not match the code");
        out.z = core::add(out.mu, core::mul(out.sigma, tape.constant(*eps)));
    }
    return out;
}

Value vae_decode(Tape& tape, const VaeBinding& b, Value z) {
    (void)tape;
    Value d1 = core::relu(core::add_rowvec(core::matmul(z, b.dec_w1), b.dec_b1));
    Value d2 = core::relu(core::add_rowvec(core::matmul(d1, b.dec_w2), b.dec_b2));
    return core::sigmoid(core::add_rowvec(core::matmul(d2, b.dec_w3), b.dec_b3));
}

Value edge_logits(Tape& tape, const VaeBinding& b, Value z, const std::vector<std::uint32_t>& i,
                  const std::vector<std::uint32_t>& j) {
    (void)tape;
    if (i.empty() || i.size() != j.size())
        throw ContractError("edge logits: index lists must be non-empty and aligned");
    Value zi = core::gather_rows(z, i);
    Value zj = core::gather_rows(z, j);
    return core::rowwise_dot(core::matmul(zi, b.w_edge), zj);
}

Value kl_term(Tape& tape, Value mu, Value logvar) {
    Value inner = core::sub(core::add(core::mul(mu, mu), core::exp_elem(logvar)), logvar);
    inner = core::sub(inner, tape.constant(DenseMatrix(mu.rows(), mu.cols(), 1.0)));
    return core::scale(core::sum_all(inner), 0.5 / static_cast<double>(mu.rows()));
}

VaeLoss vae_loss(Tape& tape, const VaeBinding& b, const DenseMatrix& x_batch,
                 const DenseMatrix& eps, const std::vector<std::uint32_t>& pair_i,
                 const std::vector<std::uint32_t>& pair_j, const DenseMatrix& pair_targets,
                 double beta, double gamma) {
    if (x_batch.rows == 0) throw ContractError("vae loss: empty batch");
    if (pair_i.size() != pair_j.size() || pair_i.size() != pair_targets.rows)
        throw ContractError("vae loss: pair lists and targets must align");
    Value x = tape.constant(x_batch);
    VaeEncode enc = vae_encode(tape, b, x, &eps);
    Value xhat = vae_decode(tape, b, enc.z);

    Value diff = core::sub(xhat, x);
    Value recon = core::scale(core::sum_all(core::mul(diff, diff)),
                              1.0 / static_cast<double>(x_batch.rows));
    Value kl = kl_term(tape, enc.mu, enc.logvar);

    VaeLoss out;
    out.recon = recon.scalar();
    out.kl = kl.scalar();
    out.total = core::add(recon, core::scale(kl, beta));
    if (!pair_i.empty()) {
        Value bce = core::bce_with_logits_mean(edge_logits(tape, b, enc.z, pair_i, pair_j),
                                               pair_targets);
        out.bce = bce.scalar();
        out.total = core::add(out.total, core::scale(bce, gamma));
    }
    return out;
}

VaeModel train_vae(const graph::RoadGraph& g, const VaeConfig& cfg, std::uint64_t seed,
                   VaeHistory* history) {
    if (cfg.batch_size == 0) throw ContractError("vae train: batch size must be positive");
    if (cfg.epochs == 0) throw ContractError("vae train: epoch count must be positive");
    const DenseMatrix& features = g.features();
    const std::size_t n = features.rows;

    VaeModel model = VaeModel::init(cfg, features.cols, seed);
    auto params = model.parameters();
    core::AdamOptimizer adam(cfg.learning_rate);

    RngStream shuffle_rng = core::derive_stream(seed, "vae.shuffle");
    RngStream eps_rng = core::derive_stream(seed, "vae.eps");
    RngStream neg_rng = core::derive_stream(seed, "vae.negpairs");

    std::unordered_set<std::uint64_t> adjacent;
    adjacent.reserve(g.n_edges() * 2);
    for (const auto& [a, bnode] : g.edges())
        adjacent.insert(static_cast<std::uint64_t>(a) * n + bnode);
    auto is_adjacent = [&](std::uint32_t a, std::uint32_t c) {
        std::uint32_t lo = std::min(a, c), hi = std::max(a, c);
        return adjacent.count(static_cast<std::uint64_t>(lo) * n + hi) != 0;
    };

    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::vector<std::int64_t> batch_pos(n, -1);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const std::size_t bsz = stop - start;

            DenseMatrix x_batch(bsz, features.cols);
            for (std::size_t r = 0; r < bsz; ++r) {
                const double* src = features.row_ptr(order[start + r]);
                std::copy(src, src + features.cols, x_batch.row_ptr(r));
                batch_pos[order[start + r]] = static_cast<std::int64_t>(r);
            }
            DenseMatrix eps(bsz, cfg.latent);
            for (double& v : eps.data) v = eps_rng.normal();

            // Positive pairs: graph edges with both ends in the batch.
            std::vector<std::uint32_t> pi, pj;
            for (std::size_t r = 0; r < bsz; ++r) {
                const std::uint32_t node = order[start + r];
                for (std::uint32_t nb : g.neighbors(node)) {
                    if (nb > node && batch_pos[nb] >= 0) {
                        pi.push_back(static_cast<std::uint32_t>(r));
                        pj.push_back(static_cast<std::uint32_t>(batch_pos[nb]));
                    }
                }
            }
            const std::size_t n_pos = pi.size();

            // Matched negatives: uniformly sampled in-batch non-adjacent pairs.
            if (n_pos > 0 && bsz > 1) {
                std::unordered_set<std::uint64_t> chosen;
                std::size_t found = 0, attempts = 0;
                const std::size_t attempt_cap = 50 * n_pos + 50;
                while (found < n_pos && attempts < attempt_cap) {
                    ++attempts;
                    auto u = static_cast<std::uint32_t>(neg_rng.uniform_int(bsz));
                    auto v = static_cast<std::uint32_t>(neg_rng.uniform_int(bsz));
                    if (u == v) continue;
                    std::uint32_t lo = std::min(u, v), hi = std::max(u, v);
                    std::uint64_t key = static_cast<std::uint64_t>(lo) * bsz + hi;
                    if (chosen.count(key)) continue;
                    if (is_adjacent(order[start + lo], order[start + hi])) continue;
                    chosen.insert(key);
                    pi.push_back(lo);
                    pj.push_back(hi);
                    ++found;
                }
            }
            DenseMatrix pair_targets(pi.size(), 1);
            for (std::size_t p = 0; p < n_pos; ++p) pair_targets(p, 0) = 1.0;

            Tape tape;
            VaeBinding bound = bind_vae(tape, model);
            VaeLoss loss =
                vae_loss(tape, bound, x_batch, eps, pi, pj, pair_targets, cfg.beta, cfg.gamma);
            tape.backward(loss.total);

            std::vector<DenseMatrix> grads;
            grads.reserve(params.size());
            for (const Value& p : bound.params) grads.push_back(tape.grad(p));
            std::vector<const DenseMatrix*> grad_ptrs;
            grad_ptrs.reserve(grads.size());
            for (const DenseMatrix& gm : grads) grad_ptrs.push_back(&gm);
            adam.step(params, grad_ptrs);

            epoch_total += loss.total.scalar();
            ++batches;
            for (std::size_t r = 0; r < bsz; ++r) batch_pos[order[start + r]] = -1;
        }
        if (history != nullptr)
            history->epoch_loss.push_back(epoch_total / static_cast<double>(batches));
    }
    return model;
}

DenseMatrix generate_synthetic(const VaeModel& model, std::size_t count, RngStream& rng) {
    if (count == 0) return DenseMatrix(0, model.in_dim);
    DenseMatrix z(count, model.cfg.latent);
    for (double& v : z.data) v = rng.normal();
    Tape tape;
    VaeBinding bound = bind_vae(tape, model);
    DenseMatrix out = vae_decode(tape, bound, tape.constant(z)).matrix();
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

std::vector<std::vector<std::uint32_t>> attach_edges(const DenseMatrix& synthetic,
                                                     const graph::RoadGraph& g,
                                                     const std::vector<std::uint32_t>& labeled_indices,
                                                     double tau, std::size_t k) {
    if (synthetic.cols != g.feature_dim() && synthetic.rows > 0)
        throw ShapeError("attach: synthetic feature width does not match the graph");
    if (k == 0) throw ContractError("attach: top-k must be positive");
    if (!std::isfinite(tau)) throw ContractError("attach: threshold must be finite");
    for (std::uint32_t idx : labeled_indices)
        if (idx >= g.n_nodes()) throw ContractError("attach: labeled index out of range");

    const DenseMatrix& features = g.features();
    std::vector<double> anchor_norm(labeled_indices.size());
    for (std::size_t a = 0; a < labeled_indices.size(); ++a) {
        const double* row = features.row_ptr(labeled_indices[a]);
        double acc = 0.0;
        for (std::size_t c = 0; c < features.cols; ++c) acc += row[c] * row[c];
        anchor_norm[a] = std::sqrt(acc);
    }

    std::vector<std::vector<std::uint32_t>> out(synthetic.rows);
    std::vector<std::pair<double, std::uint32_t>> cand;
    for (std::size_t s = 0; s < synthetic.rows; ++s) {
        const double* srow = synthetic.row_ptr(s);
        double snorm = 0.0;
        for (std::size_t c = 0; c < synthetic.cols; ++c) snorm += srow[c] * srow[c];
        snorm = std::sqrt(snorm);

        cand.clear();
        for (std::size_t a = 0; a < labeled_indices.size(); ++a) {
            double sim = 0.0;
            if (snorm > 0.0 && anchor_norm[a] > 0.0) {
                const double* row = features.row_ptr(labeled_indices[a]);
                double dot = 0.0;
                for (std::size_t c = 0; c < synthetic.cols; ++c) dot += srow[c] * row[c];
                sim = dot / (snorm * anchor_norm[a]);
            }
            if (sim > tau) cand.emplace_back(sim, labeled_indices[a]);
        }
        std::sort(cand.begin(), cand.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return x.second < y.second;
        });
        if (cand.size() > k) cand.resize(k);
        for (const auto& [sim, idx] : cand) out[s].push_back(idx);
    }
    return out;
}

graph::RoadGraph AugmentedGraph::combined() const {
    const std::size_t n = base.n_nodes();
    auto edges = base.edges();
    edges.reserve(edges.size() + synthetic_edges.size());
    for (const auto& [s, b] : synthetic_edges)
        edges.emplace_back(static_cast<std::uint32_t>(n + s), b);

    DenseMatrix features(n + synthetic_features.rows, base.feature_dim());
    std::copy(base.features().data.begin(), base.features().data.end(), features.data.begin());
    std::copy(synthetic_features.data.begin(), synthetic_features.data.end(),
              features.data.begin() + static_cast<std::ptrdiff_t>(n * base.feature_dim()));

    std::vector<std::string> ids = base.node_ids();
    ids.reserve(n + synthetic_features.rows);
    for (std::size_t s = 0; s < synthetic_features.rows; ++s)
        ids.push_back("syn_" + std::to_string(s));
    return graph::RoadGraph(std::move(edges), std::move(features), std::move(ids));
}

AugmentedGraph augment(const graph::RoadGraph& g, const std::vector<std::uint32_t>& anchors,
                       const VaeModel& vae, const gnn::HybridModel& pretrained,
                       const graph::TargetScaler& scaler, const AugmentConfig& cfg) {
    AugmentedGraph out{g, DenseMatrix(0, g.feature_dim()), {}, {}, {}, cfg.m};
    if (cfg.m == 0) return out;

    RngStream latent_rng = core::derive_stream(cfg.seed, "augment.latent");
    DenseMatrix raw = generate_synthetic(vae, cfg.m, latent_rng);
    auto anchors_per_row = attach_edges(raw, g, anchors, cfg.tau, cfg.k);

    std::size_t survivors = 0;
    for (const auto& list : anchors_per_row)
        if (!list.empty()) ++survivors;
    out.synthetic_features = DenseMatrix(survivors, g.feature_dim());
    std::size_t next = 0;
    for (std::size_t s = 0; s < raw.rows; ++s) {
        if (anchors_per_row[s].empty()) continue;
        std::copy(raw.row_ptr(s), raw.row_ptr(s) + raw.cols, out.synthetic_features.row_ptr(next));
        for (std::uint32_t anchor : anchors_per_row[s])
            out.synthetic_edges.emplace_back(static_cast<std::uint32_t>(next), anchor);
        ++next;
    }
    if (survivors == 0) return out;

    graph::RoadGraph enriched = out.combined();
    Tape tape;
    gnn::HybridOutput pred = gnn::hybrid_forward(tape, enriched, pretrained, nullptr, nullptr, false);
    const DenseMatrix& reg = pred.reg.matrix();
    const DenseMatrix& clf = pred.clf.matrix();

    const std::size_t n = g.n_nodes();
    out.pseudo_adb.resize(survivors);
    out.pseudo_class.resize(survivors);
    for (std::size_t s = 0; s < survivors; ++s) {
        double adb = scaler.denormalize(reg(n + s, 0));
        out.pseudo_adb[s] = std::max(0.0, adb);
        std::size_t best = 0;
        for (std::size_t c = 1; c < clf.cols; ++c)
            if (clf(n + s, c) > clf(n + s, best)) best = c;
        out.pseudo_class[s] = static_cast<int>(best) + 1;
    }
    return out;
}

}  // namespace bikevol::vae
