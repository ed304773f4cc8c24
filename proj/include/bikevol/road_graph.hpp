#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bikevol/autodiff.hpp"
#include "bikevol/matrix.hpp"

namespace bikevol::graph {

// Undirected road network with segments as nodes and shared intersections as
// edges. Edges are canonicalized to (lo, hi), deduplicated and sorted; the
// stored graph never contains self-loops.
class RoadGraph {
public:
    RoadGraph(std::vector<std::pair<std::uint32_t, std::uint32_t>> edges,
              core::DenseMatrix features, std::vector<std::string> node_ids);

    std::size_t n_nodes() const { return features_.rows; }
    std::size_t n_edges() const { return edges_.size(); }
    std::size_t feature_dim() const { return features_.cols; }

    const std::vector<std::pair<std::uint32_t, std::uint32_t>>& edges() const { return edges_; }
    const core::DenseMatrix& features() const { return features_; }
    const std::vector<std::string>& node_ids() const { return node_ids_; }

    const std::vector<std::uint32_t>& neighbors(std::uint32_t i) const { return adjacency_[i]; }
    std::size_t degree(std::uint32_t i) const { return adjacency_[i].size(); }

    // Directed pairs (i <- j) for j in N(i) plus the self pair (i <- i),
    // grouped by target. Shared by the convolution and attention layers.
    std::shared_ptr<const core::EdgeGroups> self_loop_groups() const { return loop_groups_; }

    // Symmetric-normalization coefficient per self_loop_groups pair:
    // 1/sqrt(d_i * d_j) with d = degree + 1.
    const core::DenseMatrix& conv_coefficients() const { return conv_coeff_; }

private:
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges_;
    core::DenseMatrix features_;
    std::vector<std::string> node_ids_;
    std::vector<std::vector<std::uint32_t>> adjacency_;
    std::shared_ptr<core::EdgeGroups> loop_groups_;
    core::DenseMatrix conv_coeff_;
};

// Sparse ground truth: ADB (average daily bicyclists) and a quantile traffic
// class for K << N nodes. Entries are kept sorted by node index.
struct LabelSet {
    std::vector<std::uint32_t> indices;
    std::vector<double> adb;
    std::vector<int> traffic_class;

    std::size_t size() const { return indices.size(); }
};

LabelSet make_label_set(std::vector<std::uint32_t> indices, std::vector<double> adb,
                        std::vector<int> traffic_class, std::size_t n_nodes);

}  // namespace bikevol::graph
