#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bikevol/autodiff.hpp"
#include "bikevol/matrix.hpp"
#include "bikevol/rng.hpp"
#include "bikevol/road_graph.hpp"

namespace bikevol::gnn {

enum class FusionMode { parallel, sequential };

struct BranchMask {
    bool gcn = true;
    bool gat = true;
    bool sage = true;

    int enabled_count() const { return (gcn ? 1 : 0) + (gat ? 1 : 0) + (sage ? 1 : 0); }
};

struct HybridConfig {
    FusionMode mode = FusionMode::parallel;
    BranchMask mask;
    std::size_t hidden = 64;
    std::size_t n_classes = 5;
    std::size_t sample_size = 10;
    double leaky_slope = 0.2;
    double dropout_rate = 0.5;
    // Learned softmax scalar gate over branches in parallel fusion; plain
    // concatenation when off (the default).
    bool learned_gate = false;
};

// One layer per branch plus the two task heads. Parallel mode concatenates
// branch outputs (order: convolution, attention, sampling) before the heads;
// sequential mode stacks the enabled branches in that order. Disabled
// branches allocate no parameters and the heads shrink to match.
struct HybridModel {
    HybridConfig cfg;
    std::size_t in_dim = 0;

    core::DenseMatrix w_gcn;
    core::DenseMatrix w_gat;
    core::DenseMatrix a_gat;  // (2*hidden) x 1 attention vector
    core::DenseMatrix w_sage; // (2*d_in) x hidden
    core::DenseMatrix gate;   // 1 x enabled-count, learned_gate only
    core::DenseMatrix w_reg;  // fused x 1
    core::DenseMatrix w_clf;  // fused x n_classes

    // Width of the representation entering the heads.
    std::size_t fused_width() const;

    // Stable name/matrix pairs, enabled parameters only. Order is the
    // optimizer and checkpoint order.
    std::vector<std::pair<std::string, core::DenseMatrix*>> named_parameters();
    std::vector<std::pair<std::string, const core::DenseMatrix*>> named_parameters() const;
    std::vector<core::DenseMatrix*> parameters();

    static HybridModel init(const HybridConfig& cfg, std::size_t in_dim, std::uint64_t seed);
};

// Tape handles produced by one forward pass. params aligns with
// HybridModel::named_parameters().
struct HybridOutput {
    core::Value reg;  // n_nodes x 1, normalized target scale
    core::Value clf;  // n_nodes x n_classes, rows are probabilities
    std::vector<core::Value> params;
};

// Branch forwards. w, a are tape values so gradients flow to the caller's
// leaves; the graph supplies neighborhoods and normalization constants.
core::Value gcn_forward(core::Tape& tape, const graph::RoadGraph& g, core::Value h, core::Value w);
core::Value gat_forward(core::Tape& tape, const graph::RoadGraph& g, core::Value h, core::Value w,
                        core::Value a, double leaky_slope);
// sampler == nullptr means the full-neighborhood mean (inference mode);
// otherwise neighborhoods larger than sample_size are subsampled uniformly
// without replacement.
core::Value sage_forward(core::Tape& tape, const graph::RoadGraph& g, core::Value h, core::Value w,
                         std::size_t sample_size, core::RngStream* sampler);

// Full model forward. training enables dropout and neighbor sampling, and
// then both rng streams must be non-null.
HybridOutput hybrid_forward(core::Tape& tape, const graph::RoadGraph& g, const HybridModel& model,
                            core::RngStream* dropout_rng, core::RngStream* sample_rng,
                            bool training);

// Supervision rows for the joint objective: node indices with normalized
// regression targets, 0-based class indices, and per-node weights (1 for
// observed labels; pseudo-labels may be down-weighted).
struct SupervisionSet {
    std::vector<std::uint32_t> indices;
    std::vector<double> target_norm;
    std::vector<std::uint32_t> class_idx;
    std::vector<double> weight;

    std::size_t size() const { return indices.size(); }
};

// alpha * weighted-MSE + (1 - alpha) * weighted cross-entropy, weighted means
// over the supervision set.
core::Value joint_loss(core::Tape& tape, const HybridOutput& out, const SupervisionSet& sup,
                       double alpha);

}  // namespace bikevol::gnn
