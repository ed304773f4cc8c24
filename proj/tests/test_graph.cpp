#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "bikevol/errors.hpp"
#include "bikevol/features.hpp"
#include "bikevol/rng.hpp"
#include "bikevol/road_graph.hpp"
#include "bikevol/targets.hpp"

using namespace bikevol;
using namespace bikevol::graph;
using core::DenseMatrix;

TEST_CASE("adb is the ceiling of the daily mean") {
    CHECK(compute_adb({10, 20, 31}) == 21);
    CHECK(compute_adb({5}) == 5);
    CHECK(compute_adb({1, 1, 1}) == 1);
    CHECK_THROWS_AS(compute_adb({}), DataError);
    CHECK_THROWS_AS(compute_adb({3, -1}), DataError);
}

TEST_CASE("adb bounds its mean from above by less than one") {
    core::RngStream rng(core::derive_seed(21, "test.adb"));
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t days = 1 + rng.uniform_int(30);
        std::vector<std::int64_t> counts(days);
        double mean = 0.0;
        for (auto& c : counts) {
            c = static_cast<std::int64_t>(rng.uniform_int(900));
            mean += static_cast<double>(c);
        }
        mean /= static_cast<double>(days);
        const double adb = static_cast<double>(compute_adb(counts));
        CHECK(adb >= mean);
        CHECK(adb < mean + 1.0);
    }
}

TEST_CASE("quantile classes on uniform ranks") {
    std::vector<double> values(100);
    for (int i = 0; i < 100; ++i) {
        values[i] = static_cast<double>(i + 1);
    }
    auto classes = quantile_classes(values);
    CHECK(classes[9] == 1);    // value 10
    CHECK(classes[49] == 3);   // value 50
    CHECK(classes[94] == 5);   // value 95
}

TEST_CASE("quantile classes stay balanced on 141 distinct labels") {
    core::RngStream rng(core::derive_seed(21, "test.quantile"));
    std::vector<double> values;
    std::vector<double> pool;
    for (int v = 2; v <= 818; ++v) {
        pool.push_back(static_cast<double>(v));
    }
    rng.shuffle(pool);
    values.assign(pool.begin(), pool.begin() + 141);

    auto classes = quantile_classes(values);
    std::map<int, int> sizes;
    for (int c : classes) {
        sizes[c]++;
    }
    CHECK(sizes.size() == 5);
    int lo = 141, hi = 0;
    for (auto& [cls, n] : sizes) {
        lo = std::min(lo, n);
        hi = std::max(hi, n);
    }
    CHECK(hi - lo <= 1);
}

TEST_CASE("quantile classes are monotone in the value") {
    core::RngStream rng(core::derive_seed(21, "test.quantile.mono"));
    std::vector<double> values;
    for (int i = 0; i < 60; ++i) {
        values.push_back(1.0 + 817.0 * rng.uniform());
    }
    auto classes = quantile_classes(values);
    for (std::size_t i = 0; i < values.size(); ++i) {
        for (std::size_t j = 0; j < values.size(); ++j) {
            if (values[i] <= values[j]) {
                CHECK(classes[i] <= classes[j]);
            }
        }
    }
}

TEST_CASE("quantile boundary ties fall to the lower class") {
    // 20th-percentile cut of 1..10 is 2; a second 2 must also land in class 1.
    std::vector<double> values = {1, 2, 2, 3, 4, 5, 6, 7, 8, 9};
    auto classes = quantile_classes(values);
    CHECK(classes[1] == 1);
    CHECK(classes[2] == 1);
}

TEST_CASE("quantile classes reject degenerate inputs") {
    CHECK_THROWS_AS(quantile_classes({7, 7, 7, 7, 7, 7}), DataError);
    CHECK_THROWS_AS(quantile_classes({1, 2, 3, 4}), DataError);
    CHECK_THROWS_AS(quantile_classes({1, 2, 3, 4, 0.0}), DataError);
}

TEST_CASE("min-max encoding of a continuous column") {
    RawTable t;
    t.column_names = {"slope_pct"};
    t.rows = {{"0"}, {"5"}, {"10"}};
    FeatureSchema s = infer_schema(t);
    REQUIRE(s.columns.size() == 1);
    CHECK(s.columns[0].kind == FeatureColumn::Kind::continuous);
    DenseMatrix x = encode_features(t, s);
    CHECK(x(0, 0) == doctest::Approx(0.0));
    CHECK(x(1, 0) == doctest::Approx(0.5));
    CHECK(x(2, 0) == doctest::Approx(1.0));
}

TEST_CASE("one-hot encoding follows the schema level order") {
    FeatureSchema s;
    s.columns.push_back({"road_type", FeatureColumn::Kind::categorical, {"local", "arterial"}, ""});
    RawTable t;
    t.column_names = {"road_type"};
    t.rows = {{"arterial"}, {"local"}};
    DenseMatrix x = encode_features(t, s);
    CHECK(x(0, 0) == 0.0);
    CHECK(x(0, 1) == 1.0);
    CHECK(x(1, 0) == 1.0);
    CHECK(x(1, 1) == 0.0);
    CHECK(s.encoded_width() == 2);
}

TEST_CASE("constant continuous column encodes to one half") {
    RawTable t;
    t.column_names = {"speed_limit_kmh"};
    t.rows = {{"30"}, {"30"}, {"30"}};
    DenseMatrix x = encode_features(t, infer_schema(t));
    for (double v : x.data) {
        CHECK(v == 0.5);
    }
}

TEST_CASE("encoded features stay inside the unit interval") {
    core::RngStream rng(core::derive_seed(21, "test.encode"));
    RawTable t;
    t.column_names = {"slope_pct", "road_type", "lts"};
    const char* kinds[] = {"residential", "arterial", "path", "collector"};
    for (int r = 0; r < 60; ++r) {
        t.rows.push_back({std::to_string(rng.uniform() * 14.0 - 2.0),
                          kinds[rng.uniform_int(4)],
                          std::to_string(1 + rng.uniform_int(4))});
    }
    FeatureSchema s = infer_schema(t);
    DenseMatrix x = encode_features(t, s);
    CHECK(x.cols == s.encoded_width());
    for (double v : x.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("encoding rejects unknown levels and bad numbers") {
    FeatureSchema s;
    s.columns.push_back({"road_type", FeatureColumn::Kind::categorical, {"local"}, ""});
    RawTable t;
    t.column_names = {"road_type"};
    t.rows = {{"motorway"}};
    CHECK_THROWS_AS(encode_features(t, s), DataError);

    FeatureSchema s2;
    s2.columns.push_back({"slope_pct", FeatureColumn::Kind::continuous, {}, ""});
    RawTable t2;
    t2.column_names = {"slope_pct"};
    t2.rows = {{"abc"}};
    CHECK_THROWS_AS(encode_features(t2, s2), DataError);
}

TEST_CASE("schema fingerprint tracks structure") {
    RawTable t;
    t.column_names = {"a", "b"};
    t.rows = {{"1", "x"}, {"2", "y"}};
    FeatureSchema s1 = infer_schema(t);
    FeatureSchema s2 = infer_schema(t);
    CHECK(s1.fingerprint() == s2.fingerprint());
    t.rows.push_back({"3", "z"});
    FeatureSchema s3 = infer_schema(t);
    CHECK(s1.fingerprint() != s3.fingerprint());
}

TEST_CASE("target scaler maps the label range onto the unit interval") {
    TargetScaler sc = TargetScaler::fit({2.0, 818.0, 300.0});
    CHECK(sc.normalize(2.0) == doctest::Approx(0.0));
    CHECK(sc.normalize(818.0) == doctest::Approx(1.0));
    for (double x : {2.0, 17.5, 211.0, 818.0}) {
        CHECK(sc.denormalize(sc.normalize(x)) == doctest::Approx(x).epsilon(1e-12));
    }
}

TEST_CASE("target scaler is fit on training labels only") {
    TargetScaler sc = TargetScaler::fit({10.0, 20.0});
    CHECK(sc.normalize(25.0) == doctest::Approx(1.5));
    CHECK(sc.normalize(5.0) == doctest::Approx(-0.5));
    CHECK_THROWS_AS(TargetScaler::fit({7.0, 7.0}), DataError);
    CHECK_THROWS_AS(TargetScaler::fit({}), DataError);
}

TEST_CASE("road graph canonicalizes and symmetrizes edges") {
    DenseMatrix feats(4, 2, 0.1);
    RoadGraph g({{2, 1}, {1, 2}, {0, 1}, {3, 0}}, feats, {});
    CHECK(g.n_nodes() == 4);
    CHECK(g.n_edges() == 3);

    for (std::uint32_t i = 0; i < 4; ++i) {
        for (std::uint32_t j : g.neighbors(i)) {
            const auto& back = g.neighbors(j);
            CHECK(std::find(back.begin(), back.end(), i) != back.end());
        }
    }
}

TEST_CASE("road graph rejects malformed edges") {
    DenseMatrix feats(3, 1, 0.0);
    CHECK_THROWS_AS(RoadGraph({{0, 3}}, feats, {}), ContractError);
    CHECK_THROWS_AS(RoadGraph({{1, 1}}, feats, {}), ContractError);
}

TEST_CASE("self-loop groups cover neighbors plus self, sorted by source") {
    DenseMatrix feats(4, 1, 0.0);
    RoadGraph g({{0, 1}, {1, 2}, {2, 3}}, feats, {});
    const core::EdgeGroups& eg = *g.self_loop_groups();
    CHECK(eg.group_count() == 4);
    CHECK(eg.pair_count() == 2 * 3 + 4);

    // Node 1 neighbors {0, 2}; its group must be sources {0, 1, 2} in order.
    std::vector<std::uint32_t> group1(eg.source.begin() + eg.offsets[1],
                                      eg.source.begin() + eg.offsets[2]);
    CHECK(group1 == std::vector<std::uint32_t>({0, 1, 2}));
}

TEST_CASE("convolution coefficients follow symmetric normalization") {
    DenseMatrix feats(3, 1, 0.0);
    RoadGraph g({{0, 1}, {1, 2}}, feats, {});
    const core::EdgeGroups& eg = *g.self_loop_groups();
    const DenseMatrix& coeff = g.conv_coefficients();
    for (std::size_t p = 0; p < eg.pair_count(); ++p) {
        const double di = static_cast<double>(g.degree(eg.target[p])) + 1.0;
        const double dj = static_cast<double>(g.degree(eg.source[p])) + 1.0;
        CHECK(coeff(p, 0) == doctest::Approx(1.0 / std::sqrt(di * dj)).epsilon(1e-15));
    }
}

TEST_CASE("isolated node keeps a self pair") {
    DenseMatrix feats(3, 1, 0.0);
    RoadGraph g({{0, 1}}, feats, {});
    const core::EdgeGroups& eg = *g.self_loop_groups();
    CHECK(eg.offsets[3] - eg.offsets[2] == 1);
    CHECK(eg.source[eg.offsets[2]] == 2);
    CHECK(g.degree(2) == 0);
}

TEST_CASE("label set validates and sorts by node index") {
    LabelSet ls = make_label_set({5, 1, 3}, {10.0, 20.0, 30.0}, {2, 1, 3}, 8);
    CHECK(ls.indices == std::vector<std::uint32_t>({1, 3, 5}));
    CHECK(ls.adb == std::vector<double>({20.0, 30.0, 10.0}));
    CHECK(ls.traffic_class == std::vector<int>({1, 3, 2}));

    CHECK_THROWS_AS(make_label_set({9}, {1.0}, {1}, 8), ContractError);
    CHECK_THROWS_AS(make_label_set({1, 1}, {1.0, 2.0}, {1, 2}, 8), ContractError);
    CHECK_THROWS_AS(make_label_set({1}, {0.0}, {1}, 8), DataError);
    CHECK_THROWS_AS(make_label_set({1}, {1.0}, {6}, 8), DataError);
}
