#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bikevol/features.hpp"
#include "bikevol/hybrid.hpp"
#include "bikevol/matrix.hpp"
#include "bikevol/road_graph.hpp"
#include "bikevol/train.hpp"
#include "bikevol/vae.hpp"

namespace bikevol::io {

// -- CSV ----------------------------------------------------------------------
// Quoted fields may contain commas, doubled quotes and newlines. Errors carry
// the source name plus line and column.

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable parse_csv(const std::string& text, const std::string& where);
CsvTable read_csv(const std::string& path);
std::string format_csv(const CsvTable& table);
void write_csv(const std::string& path, const CsvTable& table);

// -- Dataset bundle -------------------------------------------------------------
// A directory with nodes.csv (segment_id + feature columns), edges.csv
// (segment_id_a, segment_id_b), labels.csv (segment_id, date, count) and an
// optional ground_truth.csv (segment_id, adb) covering every node. Labels are
// turned into ADB plus quantile classes on load. The verbatim tables are kept
// so a bundle can be written back out unchanged.

struct Dataset {
    graph::RoadGraph graph;
    graph::LabelSet labels;
    graph::FeatureSchema schema;
    std::vector<double> oracle_adb;  // empty without ground_truth.csv

    CsvTable nodes_table;
    CsvTable edges_table;
    CsvTable labels_table;
    CsvTable truth_table;  // empty header when absent
};

Dataset load_dataset(const std::string& dir);
void save_dataset(const std::string& dir, const Dataset& ds);

// -- Synthetic dataset generator ------------------------------------------------
// A thinned street lattice whose segments become graph nodes. Volumes follow a
// planted multiplicative model: concentric road classes around the city center
// set a base level, scaled by the segment's own bike infrastructure and by the
// strongest transit stop among its neighbors. labels.csv covers a random
// fraction of segments with daily count streams, ground_truth.csv the true ADB
// of every segment.

struct GeneratorConfig {
    std::size_t n_nodes = 2000;
    double label_fraction = 0.01;
    std::size_t days = 14;  // at most 28, one January of counts
    std::uint64_t seed = 42;
};

void generate_dataset(const std::string& dir, const GeneratorConfig& cfg);

// -- GraphML import ---------------------------------------------------------------
// Minimal subset: <node id=".."/> and <edge source=".." target=".."/>.
// Parallel edges collapse into one segment; self-loops are rejected.

struct PrimalGraph {
    std::vector<std::string> node_ids;  // intersections
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;  // road segments
};

PrimalGraph parse_graphml(const std::string& text, const std::string& where);
PrimalGraph read_graphml(const std::string& path);

struct LineGraph {
    std::vector<std::string> segment_ids;  // "<a>|<b>" with endpoint ids in index order
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
};

// Segments sharing an intersection become adjacent; the edge count equals the
// sum over intersections of C(degree, 2).
LineGraph line_graph(const PrimalGraph& primal);

// -- Checkpoint -------------------------------------------------------------------
// Binary snapshot of one trained fold: config, schema fingerprint, scaler,
// model weights, the synthetic block and the held-out test nodes. Everything
// needed to re-run the exact evaluation. Little-endian layout with a trailing
// CRC-32, so truncation or bit rot fails loudly.

struct Checkpoint {
    std::uint64_t schema_fingerprint = 0;
    train::TrainConfig config;
    std::size_t fold = 0;
    std::vector<std::uint32_t> test_nodes;
    double scaler_lo = 0.0;
    double scaler_hi = 1.0;
    std::size_t in_dim = 0;
    std::vector<std::pair<std::string, core::DenseMatrix>> weights;
    std::size_t synthetic_requested = 0;
    core::DenseMatrix synthetic_features;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> synthetic_edges;
    std::vector<double> pseudo_adb;
    std::vector<int> pseudo_class;
};

Checkpoint make_checkpoint(const train::TrainConfig& cfg, std::uint64_t schema_fingerprint,
                           const train::FoldArtifacts& fold);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Rebuild the trained model; names and shapes must match the stored config.
gnn::HybridModel model_from_checkpoint(const Checkpoint& ckpt);
// Reattach the stored synthetic block to the base graph it was trained with.
vae::AugmentedGraph augmented_from_checkpoint(const Checkpoint& ckpt,
                                              const graph::RoadGraph& base);

std::uint32_t crc32(std::string_view bytes);

}  // namespace bikevol::io
