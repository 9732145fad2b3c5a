#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "gadt3/autodiff.hpp"
#include "gadt3/graph.hpp"
#include "gadt3/model.hpp"
#include "gadt3/rng.hpp"

namespace gadt3 {

struct LossWeights {
  double lambda = 0.001;      // self-supervised weight in the training loss
  double lambda_reg = 0.1;    // non-neighbor regularizer inside the self-supervised loss
  double lambda_s = 0.001;    // class-aware regularizer weight
  double alpha = 20.0;        // anomaly weight in the class-aware regularizer
  bool alpha_auto = false;    // alpha = 1 / anomaly_rate of the source graph
  std::size_t neg_samples_k = 5;
};

void validate(const LossWeights& w);

// Mean neighbor cosine similarity per node (n x 1) and which nodes have
// neighbors. Isolated nodes score 0 and are invalid.
struct AffinityVars {
  ad::Var scores;
  std::vector<std::uint8_t> valid;
};

AffinityVars affinity_scores(ad::Var h, const GraphTopology& topo);

struct AffinityScores {
  std::vector<double> scores;
  std::vector<std::uint8_t> valid;
};

AffinityScores affinity_scores(const Matrix& h, const AttributedGraph& graph);

// Up to k uniform non-neighbors per node, without replacement, as
// segment offsets over `samples`. Nodes with no non-neighbor get an empty
// segment and a warning.
struct NonNeighborSamples {
  ad::Offsets offsets;
  ad::Index anchors;  // node of each sample
  ad::Index samples;
  std::size_t skipped_nodes = 0;
};

NonNeighborSamples sample_nonneighbors(const AttributedGraph& graph, std::size_t k, Rng& rng);

// Mean over nodes (with at least one sample) of the mean over that node's
// samples of w_j · cos(H_i, H_j). w_j = alpha for anomalous j when `labels`
// is given, 1 otherwise. Draws a fresh sample set from rng on every call.
ad::Var nonneighbor_reg(ad::Var h, const AttributedGraph& graph, const std::vector<std::uint8_t>* labels, double alpha,
                        Rng& rng, std::size_t k);

// -(sum of valid affinity scores) + lambda_reg · unweighted non-neighbor term.
ad::Var self_supervised_loss(ad::Var h, const AttributedGraph& graph, const GraphTopology& topo, double lambda_reg,
                             Rng& rng, std::size_t k);

// Mean binary cross-entropy + lambda_s · class_reg.
ad::Var supervised_loss(ad::Var probs, const std::vector<std::uint8_t>& labels, double lambda_s, ad::Var class_reg);

struct TrainLossParts {
  ad::Var total;
  ad::Var supervised;  // cross-entropy + lambda_s · class-aware term
  ad::Var cross_entropy;
  ad::Var class_reg;
  ad::Var self_supervised;
};

// supervised_loss(probs, labels, lambda_s, L_s) + lambda · self_supervised_loss(h).
// Draws order: class-aware samples, then self-supervised samples.
TrainLossParts train_loss(ad::Var h, ad::Var probs, const AttributedGraph& source, const GraphTopology& topo,
                          const LossWeights& weights, Rng& rng);

// Self-supervised loss on target embeddings; labels are ignored.
ad::Var ttt_loss(ad::Var h_target, const AttributedGraph& target, const GraphTopology& topo, double lambda_reg,
                 Rng& rng, std::size_t k);

}  // namespace gadt3
