#include "bikevol/road_graph.hpp"

#include <algorithm>
#include <cmath>

#include "bikevol/errors.hpp"

namespace bikevol::graph {

RoadGraph::RoadGraph(std::vector<std::pair<std::uint32_t, std::uint32_t>> edges,
                     core::DenseMatrix features, std::vector<std::string> node_ids)
    : features_(std::move(features)), node_ids_(std::move(node_ids)) {
    const std::size_t n = features_.rows;
    if (n == 0) {
        throw ContractError("road graph: no nodes");
    }
    if (!node_ids_.empty() && node_ids_.size() != n) {
        throw ContractError("road graph: node id count does not match feature rows");
    }
    if (!features_.all_finite()) {
        throw DataError("road graph: non-finite feature entries");
    }

    edges_.reserve(edges.size());
    for (auto [a, b] : edges) {
        if (a >= n || b >= n) {
            throw ContractError("road graph: edge endpoint out of range");
        }
        if (a == b) {
            throw ContractError("road graph: self-loop in stored edge set");
        }
        edges_.emplace_back(std::min(a, b), std::max(a, b));
    }
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());

    adjacency_.assign(n, {});
    for (auto [a, b] : edges_) {
        adjacency_[a].push_back(b);
        adjacency_[b].push_back(a);
    }
    for (auto& nbrs : adjacency_) {
        std::sort(nbrs.begin(), nbrs.end());
    }

    loop_groups_ = std::make_shared<core::EdgeGroups>();
    core::EdgeGroups& lg = *loop_groups_;
    lg.offsets.reserve(n + 1);
    lg.offsets.push_back(0);
    for (std::uint32_t i = 0; i < n; ++i) {
        bool self_placed = false;
        for (std::uint32_t j : adjacency_[i]) {
            if (!self_placed && i < j) {
                lg.target.push_back(i);
                lg.source.push_back(i);
                self_placed = true;
            }
            lg.target.push_back(i);
            lg.source.push_back(j);
        }
        if (!self_placed) {
            lg.target.push_back(i);
            lg.source.push_back(i);
        }
        lg.offsets.push_back(static_cast<std::uint32_t>(lg.target.size()));
    }

    conv_coeff_ = core::DenseMatrix(lg.pair_count(), 1);
    for (std::size_t p = 0; p < lg.pair_count(); ++p) {
        const double di = static_cast<double>(degree(lg.target[p])) + 1.0;
        const double dj = static_cast<double>(degree(lg.source[p])) + 1.0;
        conv_coeff_(p, 0) = 1.0 / std::sqrt(di * dj);
    }
}

LabelSet make_label_set(std::vector<std::uint32_t> indices, std::vector<double> adb,
                        std::vector<int> traffic_class, std::size_t n_nodes) {
    if (indices.size() != adb.size() || indices.size() != traffic_class.size()) {
        throw ContractError("label set: column lengths differ");
    }
    std::vector<std::size_t> order(indices.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(),
              [&indices](std::size_t a, std::size_t b) { return indices[a] < indices[b]; });

    LabelSet out;
    out.indices.reserve(indices.size());
    out.adb.reserve(indices.size());
    out.traffic_class.reserve(indices.size());
    for (std::size_t k : order) {
        if (indices[k] >= n_nodes) {
            throw ContractError("label set: node index out of range");
        }
        if (!out.indices.empty() && out.indices.back() == indices[k]) {
            throw ContractError("label set: duplicate node index");
        }
        if (!(adb[k] > 0.0) || !std::isfinite(adb[k])) {
            throw DataError("label set: adb must be positive and finite");
        }
        if (traffic_class[k] < 1 || traffic_class[k] > 5) {
            throw DataError("label set: traffic class outside 1..5");
        }
        out.indices.push_back(indices[k]);
        out.adb.push_back(adb[k]);
        out.traffic_class.push_back(traffic_class[k]);
    }
    return out;
}

}  // namespace bikevol::graph
