#include "gadt3/losses.hpp"

#include <algorithm>
#include <cmath>

#include "gadt3/error.hpp"

namespace gadt3 {

void validate(const LossWeights& w) {
  if (!(w.lambda >= 0.0) || !(w.lambda_reg >= 0.0) || !(w.lambda_s >= 0.0))
    throw UsageError("loss weights must be non-negative");
  if (!w.alpha_auto && !(w.alpha >= 1.0)) throw UsageError("alpha must be >= 1");
  if (w.neg_samples_k < 1) throw UsageError("neg_samples_k must be >= 1");
}

AffinityVars affinity_scores(ad::Var h, const GraphTopology& topo) {
  if (h.rows() != topo.num_nodes) throw UsageError("affinity_scores: embedding rows differ from node count");
  AffinityVars out;
  ad::Var cos = ad::cosine_rows(ad::gather_rows(h, topo.rows), ad::gather_rows(h, topo.cols));
  out.scores = ad::segment_mean(cos, topo.offsets);
  out.valid.resize(topo.num_nodes);
  for (std::size_t v = 0; v < topo.num_nodes; ++v) out.valid[v] = topo.offsets[v + 1] > topo.offsets[v];
  return out;
}

AffinityScores affinity_scores(const Matrix& h, const AttributedGraph& graph) {
  ad::Tape tape;
  AffinityVars a = affinity_scores(tape.constant(h), GraphTopology(graph));
  return {a.scores.value().data, std::move(a.valid)};
}

NonNeighborSamples sample_nonneighbors(const AttributedGraph& graph, std::size_t k, Rng& rng) {
  if (k < 1) throw UsageError("sample_nonneighbors: k must be >= 1");
  const std::size_t n = graph.num_nodes;
  NonNeighborSamples s;
  s.offsets.reserve(n + 1);
  s.offsets.push_back(0);
  std::vector<NodeId> pool;
  for (NodeId i = 0; i < n; ++i) {
    const std::size_t available = n - 1 - graph.degree(i);
    const std::size_t take = std::min(k, available);
    if (available == 0) {
      ++s.skipped_nodes;
    } else if (available <= 4 * k) {
      // Dense row: enumerate candidates and take a partial shuffle.
      pool.clear();
      auto nb = graph.neighbors(i);
      for (NodeId j = 0; j < n; ++j)
        if (j != i && !std::binary_search(nb.begin(), nb.end(), j)) pool.push_back(j);
      for (std::size_t t = 0; t < take; ++t) {
        std::swap(pool[t], pool[t + rng.below(pool.size() - t)]);
        s.anchors.push_back(i);
        s.samples.push_back(pool[t]);
      }
    } else {
      // Sparse row: rejection against neighbors and earlier picks.
      const std::size_t start = s.samples.size();
      while (s.samples.size() - start < take) {
        const auto j = static_cast<NodeId>(rng.below(n));
        if (j == i || graph.has_edge(i, j)) continue;
        if (std::find(s.samples.begin() + static_cast<std::ptrdiff_t>(start), s.samples.end(), j) != s.samples.end()) continue;
        s.anchors.push_back(i);
        s.samples.push_back(j);
      }
    }
    s.offsets.push_back(s.samples.size());
  }
  if (s.skipped_nodes > 0)
    warn("non-neighbor sampling: " + std::to_string(s.skipped_nodes) + " node(s) adjacent to every other node were skipped");
  return s;
}

ad::Var nonneighbor_reg(ad::Var h, const AttributedGraph& graph, const std::vector<std::uint8_t>* labels, double alpha,
                        Rng& rng, std::size_t k) {
  if (h.rows() != graph.num_nodes) throw UsageError("nonneighbor_reg: embedding rows differ from node count");
  if (labels && labels->size() != graph.num_nodes) throw UsageError("nonneighbor_reg: label count differs from node count");
  ad::Tape& tape = *h.tape();
  NonNeighborSamples s = sample_nonneighbors(graph, k, rng);
  const std::size_t with_samples = graph.num_nodes - s.skipped_nodes;
  if (s.samples.empty() || with_samples == 0) return tape.constant(Matrix(1, 1, 0.0));

  ad::Var cos = ad::cosine_rows(ad::gather_rows(h, s.anchors), ad::gather_rows(h, s.samples));
  if (labels) {
    Matrix w(s.samples.size(), 1, 1.0);
    for (std::size_t e = 0; e < s.samples.size(); ++e)
      if ((*labels)[s.samples[e]] == 1) w(e, 0) = alpha;
    cos = ad::mul_const(cos, w);
  }
  ad::Var per_node = ad::segment_mean(cos, s.offsets);
  return ad::scalar_mul(ad::sum(per_node), 1.0 / static_cast<double>(with_samples));
}

ad::Var self_supervised_loss(ad::Var h, const AttributedGraph& graph, const GraphTopology& topo, double lambda_reg,
                             Rng& rng, std::size_t k) {
  AffinityVars a = affinity_scores(h, topo);
  // Isolated rows are exactly 0, so summing all rows sums the valid ones.
  ad::Var affinity_term = ad::negate(ad::sum(a.scores));
  ad::Var reg = nonneighbor_reg(h, graph, nullptr, 1.0, rng, k);
  return ad::add(affinity_term, ad::scalar_mul(reg, lambda_reg));
}

ad::Var supervised_loss(ad::Var probs, const std::vector<std::uint8_t>& labels, double lambda_s, ad::Var class_reg) {
  if (labels.size() != probs.rows() || probs.cols() != 1) throw UsageError("supervised_loss: labels do not match predictions");
  Matrix y(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) y(i, 0) = labels[i];
  return ad::add(ad::binary_cross_entropy(probs, y), ad::scalar_mul(class_reg, lambda_s));
}

TrainLossParts train_loss(ad::Var h, ad::Var probs, const AttributedGraph& source, const GraphTopology& topo,
                          const LossWeights& weights, Rng& rng) {
  if (!source.labels) throw DataError("train_loss: source graph has no labels");
  const auto& labels = *source.labels;
  double alpha = weights.alpha;
  if (weights.alpha_auto) {
    const auto anomalies = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    if (anomalies == 0.0) throw DataError("train_loss: alpha_auto needs at least one anomaly");
    alpha = std::max(1.0, static_cast<double>(labels.size()) / anomalies);
  }
  TrainLossParts parts;
  parts.class_reg = nonneighbor_reg(h, source, &labels, alpha, rng, weights.neg_samples_k);
  Matrix y(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) y(i, 0) = labels[i];
  parts.cross_entropy = ad::binary_cross_entropy(probs, y);
  parts.supervised = ad::add(parts.cross_entropy, ad::scalar_mul(parts.class_reg, weights.lambda_s));
  parts.self_supervised = self_supervised_loss(h, source, topo, weights.lambda_reg, rng, weights.neg_samples_k);
  parts.total = ad::add(parts.supervised, ad::scalar_mul(parts.self_supervised, weights.lambda));
  return parts;
}

ad::Var ttt_loss(ad::Var h_target, const AttributedGraph& target, const GraphTopology& topo, double lambda_reg, Rng& rng,
                 std::size_t k) {
  return self_supervised_loss(h_target, target, topo, lambda_reg, rng, k);
}

}  // namespace gadt3
