#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "bikevol/errors.hpp"
#include "bikevol/hybrid.hpp"
#include "bikevol/matrix.hpp"
#include "bikevol/rng.hpp"
#include "bikevol/road_graph.hpp"

using namespace bikevol;
using namespace bikevol::gnn;
using core::DenseMatrix;
using core::RngStream;
using core::Tape;
using core::Value;
using graph::RoadGraph;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, RngStream& rng, double lo = -1.0,
                          double hi = 1.0) {
    DenseMatrix m(r, c);
    for (double& v : m.data) {
        v = lo + (hi - lo) * rng.uniform();
    }
    return m;
}

RoadGraph random_graph(std::size_t n, std::size_t d, RngStream& rng, double p = 0.2) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::uint32_t j = i + 1; j < n; ++j) {
            if (rng.uniform() < p) {
                edges.emplace_back(i, j);
            }
        }
    }
    return RoadGraph(std::move(edges), random_matrix(n, d, rng, 0.0, 1.0), {});
}

DenseMatrix gcn_oracle(const RoadGraph& g, const DenseMatrix& h, const DenseMatrix& w) {
    const std::size_t n = g.n_nodes();
    DenseMatrix norm(n, n);
    for (auto [a, b] : g.edges()) {
        norm(a, b) = 1.0;
        norm(b, a) = 1.0;
    }
    for (std::size_t i = 0; i < n; ++i) {
        norm(i, i) = 1.0;
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (norm(i, j) != 0.0) {
                const double di = static_cast<double>(g.degree(i)) + 1.0;
                const double dj = static_cast<double>(g.degree(j)) + 1.0;
                norm(i, j) /= std::sqrt(di * dj);
            }
        }
    }
    DenseMatrix out = matmul_plain(matmul_plain(norm, h), w);
    for (double& v : out.data) {
        v = std::max(v, 0.0);
    }
    return out;
}

DenseMatrix gat_oracle(const RoadGraph& g, const DenseMatrix& h, const DenseMatrix& w,
                       const DenseMatrix& a, double slope) {
    const std::size_t n = g.n_nodes();
    const std::size_t d_out = w.cols;
    DenseMatrix wh = matmul_plain(h, w);
    DenseMatrix out(n, d_out);
    for (std::uint32_t i = 0; i < n; ++i) {
        std::vector<std::uint32_t> nbhd(g.neighbors(i));
        nbhd.push_back(i);
        std::sort(nbhd.begin(), nbhd.end());
        std::vector<double> e;
        for (std::uint32_t j : nbhd) {
            double s = 0.0;
            for (std::size_t c = 0; c < d_out; ++c) {
                s += a(c, 0) * wh(i, c) + a(d_out + c, 0) * wh(j, c);
            }
            e.push_back(s > 0.0 ? s : slope * s);
        }
        double mx = e[0];
        for (double v : e) {
            mx = std::max(mx, v);
        }
        double z = 0.0;
        for (double& v : e) {
            v = std::exp(v - mx);
            z += v;
        }
        for (std::size_t k = 0; k < nbhd.size(); ++k) {
            const double alpha = e[k] / z;
            for (std::size_t c = 0; c < d_out; ++c) {
                out(i, c) += alpha * wh(nbhd[k], c);
            }
        }
        for (std::size_t c = 0; c < d_out; ++c) {
            out(i, c) = std::max(out(i, c), 0.0);
        }
    }
    return out;
}

DenseMatrix sage_full_oracle(const RoadGraph& g, const DenseMatrix& h, const DenseMatrix& w) {
    const std::size_t n = g.n_nodes();
    const std::size_t d = h.cols;
    DenseMatrix out(n, w.cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        std::vector<double> cat(2 * d, 0.0);
        const auto& nbrs = g.neighbors(i);
        for (std::uint32_t j : nbrs) {
            for (std::size_t c = 0; c < d; ++c) {
                cat[c] += h(j, c) / static_cast<double>(nbrs.size());
            }
        }
        for (std::size_t c = 0; c < d; ++c) {
            cat[d + c] = h(i, c);
        }
        for (std::size_t o = 0; o < w.cols; ++o) {
            double acc = 0.0;
            for (std::size_t c = 0; c < 2 * d; ++c) {
                acc += cat[c] * w(c, o);
            }
            out(i, o) = std::max(acc, 0.0);
        }
    }
    return out;
}

SupervisionSet tiny_supervision() {
    SupervisionSet s;
    s.indices = {0, 1};
    s.target_norm = {0.2, 0.8};
    s.class_idx = {0, 2};
    s.weight = {1.0, 1.0};
    return s;
}

// Central differences through hybrid_forward + joint_loss in inference mode.
double fd_hybrid_check(const RoadGraph& g, HybridModel& model, const SupervisionSet& sup,
                       double alpha) {
    std::vector<DenseMatrix> analytic;
    {
        Tape tape;
        HybridOutput out = hybrid_forward(tape, g, model, nullptr, nullptr, false);
        Value loss = joint_loss(tape, out, sup, alpha);
        tape.backward(loss);
        for (const Value& p : out.params) {
            analytic.push_back(tape.grad(p));
        }
    }
    auto eval = [&]() {
        Tape tape;
        HybridOutput out = hybrid_forward(tape, g, model, nullptr, nullptr, false);
        return joint_loss(tape, out, sup, alpha).scalar();
    };
    auto named = model.named_parameters();
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t p = 0; p < named.size(); ++p) {
        DenseMatrix& mat = *named[p].second;
        for (std::size_t k = 0; k < mat.data.size(); ++k) {
            const double keep = mat.data[k];
            mat.data[k] = keep + h;
            const double up = eval();
            mat.data[k] = keep - h;
            const double dn = eval();
            mat.data[k] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double an = analytic[p].data[k];
            const double denom = std::max({std::fabs(an), std::fabs(fd), 1e-3});
            worst = std::max(worst, std::fabs(an - fd) / denom);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("gcn on an isolated node with identity weights is the identity") {
    DenseMatrix feats{{0.3, 0.7}};
    RoadGraph g({}, feats, {});
    Tape t;
    Value w = t.leaf(DenseMatrix{{1, 0}, {0, 1}});
    DenseMatrix out = gcn_forward(t, g, t.constant(feats), w).matrix();
    CHECK(max_abs_diff(out, feats) < 1e-15);
}

TEST_CASE("gcn two-node hand case") {
    DenseMatrix feats{{1, 0}, {0, 1}};
    RoadGraph g({{0, 1}}, feats, {});
    Tape t;
    Value w = t.leaf(DenseMatrix{{1, 0}, {0, 1}});
    DenseMatrix out = gcn_forward(t, g, t.constant(feats), w).matrix();
    CHECK(out(0, 0) == doctest::Approx(0.5));
    CHECK(out(0, 1) == doctest::Approx(0.5));
    CHECK(out(1, 0) == doctest::Approx(0.5));
    CHECK(out(1, 1) == doctest::Approx(0.5));
}

TEST_CASE("gcn matches the dense normalized-adjacency oracle on random graphs") {
    RngStream rng(core::derive_seed(31, "test.gcn.oracle"));
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(31);
        RoadGraph g = random_graph(n, 5, rng);
        DenseMatrix w = random_matrix(5, 4, rng);
        Tape t;
        DenseMatrix got = gcn_forward(t, g, t.constant(g.features()), t.leaf(w)).matrix();
        CHECK(max_abs_diff(got, gcn_oracle(g, g.features(), w)) < 1e-10);
    }
}

TEST_CASE("gat on an isolated node reduces to relu of its projection") {
    RngStream rng(core::derive_seed(31, "test.gat.iso"));
    DenseMatrix feats = random_matrix(1, 3, rng);
    RoadGraph g({}, feats, {});
    DenseMatrix w = random_matrix(3, 4, rng);
    DenseMatrix a = random_matrix(8, 1, rng);
    Tape t;
    DenseMatrix got =
        gat_forward(t, g, t.constant(feats), t.leaf(w), t.leaf(a), 0.2).matrix();
    DenseMatrix wh = matmul_plain(feats, w);
    for (double& v : wh.data) {
        v = std::max(v, 0.0);
    }
    CHECK(max_abs_diff(got, wh) < 1e-12);
}

TEST_CASE("gat splits attention evenly between identical features") {
    DenseMatrix feats{{0.4, 0.6}, {0.4, 0.6}};
    RoadGraph g({{0, 1}}, feats, {});
    RngStream rng(core::derive_seed(31, "test.gat.sym"));
    DenseMatrix w = random_matrix(2, 3, rng);
    DenseMatrix a = random_matrix(6, 1, rng);
    Tape t;
    Value wh = core::matmul(t.constant(feats), t.leaf(w));
    Value self_s = core::matmul(wh, core::slice_rows(t.leaf(a), 0, 3));
    Value nbr_s = core::matmul(wh, core::slice_rows(t.leaf(a), 3, 6));
    auto groups = g.self_loop_groups();
    Value e = core::leaky_relu(core::pair_sum(self_s, nbr_s, groups), 0.2);
    DenseMatrix alpha = core::segment_softmax(e, groups).matrix();
    for (std::size_t p = 0; p < alpha.rows; ++p) {
        CHECK(alpha(p, 0) == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("gat matches the per-node brute-force oracle") {
    RngStream rng(core::derive_seed(31, "test.gat.oracle"));
    // 4-node path graph first, then random graphs.
    {
        DenseMatrix feats = random_matrix(4, 3, rng);
        RoadGraph g({{0, 1}, {1, 2}, {2, 3}}, feats, {});
        DenseMatrix w = random_matrix(3, 4, rng);
        DenseMatrix a = random_matrix(8, 1, rng);
        Tape t;
        DenseMatrix got =
            gat_forward(t, g, t.constant(feats), t.leaf(w), t.leaf(a), 0.2).matrix();
        CHECK(max_abs_diff(got, gat_oracle(g, feats, w, a, 0.2)) < 1e-10);
    }
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(20);
        RoadGraph g = random_graph(n, 4, rng);
        DenseMatrix w = random_matrix(4, 3, rng);
        DenseMatrix a = random_matrix(6, 1, rng);
        Tape t;
        DenseMatrix got =
            gat_forward(t, g, t.constant(g.features()), t.leaf(w), t.leaf(a), 0.2).matrix();
        CHECK(max_abs_diff(got, gat_oracle(g, g.features(), w, a, 0.2)) < 1e-10);
    }
}

TEST_CASE("sage isolated node uses a zero neighbor mean") {
    RngStream rng(core::derive_seed(31, "test.sage.iso"));
    DenseMatrix feats = random_matrix(1, 3, rng);
    RoadGraph g({}, feats, {});
    DenseMatrix w = random_matrix(6, 2, rng);
    Tape t;
    DenseMatrix got = sage_forward(t, g, t.constant(feats), t.leaf(w), 10, nullptr).matrix();

    DenseMatrix cat(1, 6);
    for (std::size_t c = 0; c < 3; ++c) {
        cat(0, 3 + c) = feats(0, c);
    }
    DenseMatrix expect = matmul_plain(cat, w);
    for (double& v : expect.data) {
        v = std::max(v, 0.0);
    }
    CHECK(max_abs_diff(got, expect) < 1e-12);
}

TEST_CASE("sage with ample sample size equals the full-neighborhood mean") {
    RngStream rng(core::derive_seed(31, "test.sage.full"));
    for (int trial = 0; trial < 6; ++trial) {
        const std::size_t n = 3 + rng.uniform_int(16);
        RoadGraph g = random_graph(n, 4, rng, 0.3);
        DenseMatrix w = random_matrix(8, 3, rng);
        Tape t;
        RngStream sampler(core::derive_seed(31, "test.sage.sampler"));
        DenseMatrix got =
            sage_forward(t, g, t.constant(g.features()), t.leaf(w), n, &sampler).matrix();
        CHECK(max_abs_diff(got, sage_full_oracle(g, g.features(), w)) < 1e-10);
    }
}

TEST_CASE("sage sampling is deterministic under a fixed seed") {
    RngStream rng(core::derive_seed(31, "test.sage.det"));
    RoadGraph g = random_graph(20, 4, rng, 0.5);
    DenseMatrix w = random_matrix(8, 3, rng);
    auto run = [&]() {
        Tape t;
        RngStream sampler(core::derive_seed(77, "sampler"));
        return sage_forward(t, g, t.constant(g.features()), t.leaf(w), 2, &sampler).matrix();
    };
    CHECK(max_abs_diff(run(), run()) == 0.0);
}

TEST_CASE("node order equivariance of the branch forwards") {
    RngStream rng(core::derive_seed(31, "test.equivariance"));
    const std::size_t n = 12;
    RoadGraph g = random_graph(n, 4, rng, 0.3);

    std::vector<std::uint32_t> perm(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        perm[i] = i;
    }
    rng.shuffle(perm);

    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges2;
    for (auto [a, b] : g.edges()) {
        edges2.emplace_back(perm[a], perm[b]);
    }
    DenseMatrix feats2(n, 4);
    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 4; ++c) {
            feats2(perm[i], c) = g.features()(i, c);
        }
    }
    RoadGraph g2(std::move(edges2), feats2, {});

    DenseMatrix w = random_matrix(4, 3, rng);
    DenseMatrix a = random_matrix(6, 1, rng);
    DenseMatrix ws = random_matrix(8, 3, rng);

    Tape t1, t2;
    DenseMatrix gcn1 = gcn_forward(t1, g, t1.constant(g.features()), t1.leaf(w)).matrix();
    DenseMatrix gcn2 = gcn_forward(t2, g2, t2.constant(feats2), t2.leaf(w)).matrix();
    DenseMatrix gat1 =
        gat_forward(t1, g, t1.constant(g.features()), t1.leaf(w), t1.leaf(a), 0.2).matrix();
    DenseMatrix gat2 =
        gat_forward(t2, g2, t2.constant(feats2), t2.leaf(w), t2.leaf(a), 0.2).matrix();
    DenseMatrix sage1 =
        sage_forward(t1, g, t1.constant(g.features()), t1.leaf(ws), n, nullptr).matrix();
    DenseMatrix sage2 = sage_forward(t2, g2, t2.constant(feats2), t2.leaf(ws), n, nullptr).matrix();

    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(gcn2(perm[i], c) == doctest::Approx(gcn1(i, c)).epsilon(1e-12));
            CHECK(gat2(perm[i], c) == doctest::Approx(gat1(i, c)).epsilon(1e-12));
            CHECK(sage2(perm[i], c) == doctest::Approx(sage1(i, c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("parallel fusion width accounting") {
    HybridConfig cfg;
    cfg.hidden = 64;
    HybridModel m = HybridModel::init(cfg, 10, 123);
    CHECK(m.fused_width() == 192);
    CHECK(m.w_reg.rows == 192);
    CHECK(m.w_clf.cols == 5);

    cfg.mask.gat = false;
    HybridModel m2 = HybridModel::init(cfg, 10, 123);
    CHECK(m2.fused_width() == 128);
    CHECK(m2.w_reg.rows == 128);

    cfg.mask.sage = false;
    HybridModel m3 = HybridModel::init(cfg, 10, 123);
    CHECK(m3.fused_width() == 64);

    cfg.mask.gcn = false;
    CHECK_THROWS_AS(HybridModel::init(cfg, 10, 123), ContractError);
}

TEST_CASE("ablation leaves the surviving branch initialization untouched") {
    HybridConfig all;
    HybridConfig no_gat;
    no_gat.mask.gat = false;
    HybridModel m1 = HybridModel::init(all, 10, 123);
    HybridModel m2 = HybridModel::init(no_gat, 10, 123);
    CHECK(max_abs_diff(m1.w_gcn, m2.w_gcn) == 0.0);
    CHECK(max_abs_diff(m1.w_sage, m2.w_sage) == 0.0);
}

TEST_CASE("hybrid forward output shapes and probability rows") {
    RngStream rng(core::derive_seed(31, "test.hybrid.shape"));
    RoadGraph g = random_graph(15, 6, rng, 0.3);

    for (FusionMode mode : {FusionMode::parallel, FusionMode::sequential}) {
        HybridConfig cfg;
        cfg.mode = mode;
        cfg.hidden = 8;
        HybridModel m = HybridModel::init(cfg, 6, 5);
        Tape t;
        HybridOutput out = hybrid_forward(t, g, m, nullptr, nullptr, false);
        CHECK(out.reg.rows() == 15);
        CHECK(out.reg.cols() == 1);
        CHECK(out.clf.rows() == 15);
        CHECK(out.clf.cols() == 5);
        const DenseMatrix& probs = out.clf.matrix();
        for (std::size_t r = 0; r < probs.rows; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < probs.cols; ++c) {
                CHECK(probs(r, c) > 0.0);
                sum += probs(r, c);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("hybrid training forward is reproducible under fixed streams") {
    RngStream rng(core::derive_seed(31, "test.hybrid.det"));
    RoadGraph g = random_graph(15, 6, rng, 0.4);
    HybridConfig cfg;
    cfg.hidden = 8;
    cfg.sample_size = 2;
    HybridModel m = HybridModel::init(cfg, 6, 5);
    SupervisionSet sup = tiny_supervision();

    auto run = [&]() {
        Tape t;
        RngStream drop = core::derive_stream(9, "drop");
        RngStream sample = core::derive_stream(9, "sample");
        HybridOutput out = hybrid_forward(t, g, m, &drop, &sample, true);
        return joint_loss(t, out, sup, 0.5).scalar();
    };
    CHECK(run() == run());
}

TEST_CASE("finite differences through the full composition") {
    RngStream rng(core::derive_seed(31, "test.hybrid.fd"));
    RoadGraph g = random_graph(7, 3, rng, 0.4);
    SupervisionSet sup;
    sup.indices = {0, 2, 5};
    sup.target_norm = {0.2, 0.7, 0.4};
    sup.class_idx = {0, 2, 4};
    sup.weight = {1.0, 1.0, 0.5};

    HybridConfig parallel;
    parallel.hidden = 4;
    HybridModel mp = HybridModel::init(parallel, 3, 17);
    CHECK(fd_hybrid_check(g, mp, sup, 0.5) < 1e-4);

    HybridConfig sequential;
    sequential.mode = FusionMode::sequential;
    sequential.hidden = 4;
    HybridModel ms = HybridModel::init(sequential, 3, 18);
    CHECK(fd_hybrid_check(g, ms, sup, 0.3) < 1e-4);

    HybridConfig gated;
    gated.hidden = 4;
    gated.learned_gate = true;
    HybridModel mg = HybridModel::init(gated, 3, 19);
    mg.gate = random_matrix(1, 3, rng, -0.5, 0.5);
    CHECK(fd_hybrid_check(g, mg, sup, 0.5) < 1e-4);

    HybridConfig ablated;
    ablated.hidden = 4;
    ablated.mask.gat = false;
    HybridModel ma = HybridModel::init(ablated, 3, 20);
    CHECK(fd_hybrid_check(g, ma, sup, 0.5) < 1e-4);
}

TEST_CASE("joint loss matches a hand computation") {
    Tape t;
    HybridOutput out;
    out.reg = t.leaf(DenseMatrix{{0.3}, {0.6}, {9.0}, {9.0}});
    out.clf = t.leaf(DenseMatrix{{0.7, 0.1, 0.1, 0.05, 0.05},
                                 {0.1, 0.2, 0.4, 0.2, 0.1},
                                 {0.2, 0.2, 0.2, 0.2, 0.2},
                                 {0.2, 0.2, 0.2, 0.2, 0.2}});
    SupervisionSet sup = tiny_supervision();

    const double mse = (0.1 * 0.1 + 0.2 * 0.2) / 2.0;
    const double ce = (-std::log(0.7) - std::log(0.4)) / 2.0;
    CHECK(joint_loss(t, out, sup, 0.5).scalar() ==
          doctest::Approx(0.5 * mse + 0.5 * ce).epsilon(1e-12));
    CHECK(joint_loss(t, out, sup, 1.0).scalar() == doctest::Approx(mse).epsilon(1e-12));
    CHECK(joint_loss(t, out, sup, 0.0).scalar() == doctest::Approx(ce).epsilon(1e-12));

    SupervisionSet weighted = sup;
    weighted.weight = {2.0, 1.0};
    const double wmse = (2.0 * 0.01 + 1.0 * 0.04) / 3.0;
    const double wce = (2.0 * -std::log(0.7) + 1.0 * -std::log(0.4)) / 3.0;
    CHECK(joint_loss(t, out, weighted, 0.5).scalar() ==
          doctest::Approx(0.5 * wmse + 0.5 * wce).epsilon(1e-12));
}

TEST_CASE("joint loss of perfect regression keeps a positive entropy term") {
    Tape t;
    HybridOutput out;
    out.reg = t.leaf(DenseMatrix{{0.2}, {0.8}});
    out.clf = t.leaf(DenseMatrix{{0.9, 0.025, 0.025, 0.025, 0.025},
                                 {0.025, 0.025, 0.9, 0.025, 0.025}});
    SupervisionSet sup = tiny_supervision();
    const double loss = joint_loss(t, out, sup, 0.5).scalar();
    CHECK(loss == doctest::Approx(0.5 * -std::log(0.9)).epsilon(1e-12));
    CHECK(loss > 0.0);
}

TEST_CASE("joint loss contract errors") {
    Tape t;
    HybridOutput out;
    out.reg = t.leaf(DenseMatrix{{0.3}, {0.6}});
    out.clf = t.leaf(DenseMatrix{{0.5, 0.5, 0.0, 0.0, 0.0}, {0.5, 0.5, 0.0, 0.0, 0.0}});
    SupervisionSet empty;
    CHECK_THROWS_AS(joint_loss(t, out, empty, 0.5), ContractError);

    SupervisionSet sup = tiny_supervision();
    CHECK_THROWS_AS(joint_loss(t, out, sup, 1.5), ContractError);
    SupervisionSet bad = sup;
    bad.class_idx = {0, 9};
    CHECK_THROWS_AS(joint_loss(t, out, bad, 0.5), ContractError);
    SupervisionSet zero_w = sup;
    zero_w.weight = {1.0, 0.0};
    CHECK_THROWS_AS(joint_loss(t, out, zero_w, 0.5), ContractError);
}
