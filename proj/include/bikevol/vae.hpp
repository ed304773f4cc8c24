#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bikevol/autodiff.hpp"
#include "bikevol/hybrid.hpp"
#include "bikevol/matrix.hpp"
#include "bikevol/rng.hpp"
#include "bikevol/road_graph.hpp"
#include "bikevol/targets.hpp"

namespace bikevol::vae {

struct VaeConfig {
    std::size_t latent = 32;
    std::size_t enc_h1 = 128;
    std::size_t enc_h2 = 64;
    double beta = 1.0;    // KL weight
    double gamma = 0.5;   // edge-prediction weight
    double learning_rate = 1e-3;
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
};

// Feature VAE with a bilinear edge-probability head. Encoder
// d -> enc_h1 -> enc_h2 -> (mu, log-variance); decoder mirrors it back to d
// with a sigmoid output.
struct VaeModel {
    VaeConfig cfg;
    std::size_t in_dim = 0;

    core::DenseMatrix enc_w1, enc_b1;
    core::DenseMatrix enc_w2, enc_b2;
    core::DenseMatrix w_mu, b_mu;
    core::DenseMatrix w_logvar, b_logvar;
    core::DenseMatrix dec_w1, dec_b1;
    core::DenseMatrix dec_w2, dec_b2;
    core::DenseMatrix dec_w3, dec_b3;
    core::DenseMatrix w_edge;  // latent x latent bilinear form

    std::vector<std::pair<std::string, core::DenseMatrix*>> named_parameters();
    std::vector<std::pair<std::string, const core::DenseMatrix*>> named_parameters() const;
    std::vector<core::DenseMatrix*> parameters();

    static VaeModel init(const VaeConfig& cfg, std::size_t in_dim, std::uint64_t seed);
};

// Parameter leaves for one tape pass, aligned with named_parameters().
struct VaeBinding {
    std::vector<core::Value> params;
    core::Value enc_w1, enc_b1, enc_w2, enc_b2, w_mu, b_mu, w_logvar, b_logvar;
    core::Value dec_w1, dec_b1, dec_w2, dec_b2, dec_w3, dec_b3, w_edge;
};

VaeBinding bind_vae(core::Tape& tape, const VaeModel& model);

struct VaeEncode {
    core::Value mu;      // B x latent
    core::Value logvar;  // B x latent
    core::Value sigma;   // exp(logvar / 2)
    core::Value z;       // mu + sigma .* eps, or mu when eps is null
};

// eps == nullptr selects the deterministic code z = mu (inference mode).
VaeEncode vae_encode(core::Tape& tape, const VaeBinding& b, core::Value x,
                     const core::DenseMatrix* eps);

core::Value vae_decode(core::Tape& tape, const VaeBinding& b, core::Value z);

// Logits of p_ij = sigmoid(z_i' W_edge z_j) for aligned index lists into z.
core::Value edge_logits(core::Tape& tape, const VaeBinding& b, core::Value z,
                        const std::vector<std::uint32_t>& i, const std::vector<std::uint32_t>& j);

// Mean over rows of the closed-form KL to the standard normal:
// 0.5 * sum(mu^2 + exp(logvar) - logvar - 1).
core::Value kl_term(core::Tape& tape, core::Value mu, core::Value logvar);

struct VaeLoss {
    core::Value total;
    double recon = 0.0;
    double kl = 0.0;
    double bce = 0.0;  // 0 when no pairs were supplied
};

// Composite objective: mean squared reconstruction + beta * KL + gamma * BCE
// over the supplied in-batch pairs (pair_targets holds 0/1 adjacency truth).
// Pair lists may be empty, dropping the edge term for that batch.
VaeLoss vae_loss(core::Tape& tape, const VaeBinding& b, const core::DenseMatrix& x_batch,
                 const core::DenseMatrix& eps, const std::vector<std::uint32_t>& pair_i,
                 const std::vector<std::uint32_t>& pair_j, const core::DenseMatrix& pair_targets,
                 double beta, double gamma);

struct VaeHistory {
    std::vector<double> epoch_loss;  // mean total loss per epoch
};

// Trains on every node's feature row (no labels involved). Batches are
// reshuffled each epoch; positive pairs are the graph edges that land inside
// a batch, matched with an equal number of sampled non-adjacent pairs.
VaeModel train_vae(const graph::RoadGraph& g, const VaeConfig& cfg, std::uint64_t seed,
                   VaeHistory* history = nullptr);

// Decode M standard-normal latent draws; rows clipped into [0,1].
core::DenseMatrix generate_synthetic(const VaeModel& model, std::size_t count,
                                     core::RngStream& rng);

// For each synthetic row: labeled anchors with cosine similarity above tau,
// the top k by (similarity desc, node index asc). An empty list means the
// candidate is discarded. Zero-norm vectors have similarity 0 everywhere.
std::vector<std::vector<std::uint32_t>> attach_edges(
    const core::DenseMatrix& synthetic, const graph::RoadGraph& g,
    const std::vector<std::uint32_t>& labeled_indices, double tau = 0.7, std::size_t k = 5);

struct AugmentConfig {
    std::size_t m = 0;  // requested synthetic nodes
    double tau = 0.7;
    std::size_t k = 5;
    std::uint64_t seed = 0;
};

// The enriched graph: the base graph unchanged, surviving synthetic rows,
// their anchor edges, and pseudo-labels from a model pretrained on the base
// graph. Synthetic node s corresponds to combined index n_base + s.
struct AugmentedGraph {
    graph::RoadGraph base;
    core::DenseMatrix synthetic_features;  // survivors x d
    std::vector<std::pair<std::uint32_t, std::uint32_t>> synthetic_edges;  // (synthetic, base)
    std::vector<double> pseudo_adb;   // bicycles/day, floored at 0
    std::vector<int> pseudo_class;    // 1..5
    std::size_t requested = 0;

    std::size_t survivors() const { return synthetic_features.rows; }
    graph::RoadGraph combined() const;
};

// generate -> attach -> pseudo-label. Anchors are the label indices supplied
// by the caller (the training partition during cross-validation). m == 0
// returns the identity augmentation.
AugmentedGraph augment(const graph::RoadGraph& g, const std::vector<std::uint32_t>& anchors,
                       const VaeModel& vae, const gnn::HybridModel& pretrained,
                       const graph::TargetScaler& scaler, const AugmentConfig& cfg);

}  // namespace bikevol::vae
