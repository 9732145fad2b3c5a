#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gadt3/matrix.hpp"

namespace gadt3 {

using NodeId = std::uint32_t;
using Edge = std::pair<NodeId, NodeId>;

// Undirected attributed graph. Adjacency is CSR, stored symmetrically, with
// sorted rows and no self-loops or duplicates. Labels are 0 (normal) or
// 1 (anomaly) when present.
struct AttributedGraph {
  std::string name;
  std::size_t num_nodes = 0;
  std::vector<std::size_t> row_offsets{0};
  std::vector<NodeId> col_indices;
  Matrix features;
  std::optional<std::vector<std::uint8_t>> labels;

  std::size_t feature_dim() const { return features.cols; }
  std::size_t num_directed_edges() const { return col_indices.size(); }
  std::size_t num_edges() const { return col_indices.size() / 2; }
  std::size_t degree(NodeId v) const { return row_offsets[v + 1] - row_offsets[v]; }
  std::span<const NodeId> neighbors(NodeId v) const {
    return {col_indices.data() + row_offsets[v], degree(v)};
  }
  bool has_edge(NodeId u, NodeId v) const;
  bool has_labels() const { return labels.has_value(); }

  // Each undirected edge once, as (u, v) with u < v, in CSR order.
  std::vector<Edge> edge_list() const;

  bool operator==(const AttributedGraph&) const = default;
};

struct BuildReport {
  std::size_t self_loops_dropped = 0;
  std::size_t duplicates_dropped = 0;
};

// Builds a validated graph from an arbitrary edge list: symmetrizes, drops
// self-loops and duplicates, sorts rows.
AttributedGraph build_graph(std::string name, std::size_t num_nodes, std::span<const Edge> edges,
                            Matrix features, std::optional<std::vector<std::uint8_t>> labels,
                            BuildReport* report = nullptr);

// Throws DataError naming the first violated invariant.
void validate(const AttributedGraph& g);

// For CSR entry e = (u, v), the index of entry (v, u).
std::vector<NodeId> reverse_edge_index(const AttributedGraph& g);
// Row id of every CSR entry.
std::vector<NodeId> edge_rows(const AttributedGraph& g);

// On-disk directory: meta.json, edges.tsv, features.bin (float32 LE),
// optional labels.tsv.
AttributedGraph load_graph(const std::filesystem::path& dir);
void save_graph(const AttributedGraph& g, const std::filesystem::path& dir);

struct DegreeSummary {
  std::size_t min = 0;
  double mean = 0.0;
  std::size_t max = 0;
};

struct GraphStats {
  std::size_t num_nodes = 0;
  std::size_t num_edges = 0;
  std::optional<double> anomaly_rate;
  // Fraction of edges whose endpoints share a label. Absent without labels
  // or without edges.
  std::optional<double> edge_label_homophily;
  DegreeSummary degree;
};

GraphStats compute_stats(const AttributedGraph& g);

struct SyntheticSpec {
  std::size_t num_nodes = 1000;
  std::size_t feature_dim = 16;
  double anomaly_rate = 0.05;
  double target_homophily = 0.9;
  double mean_degree = 10.0;
  std::vector<double> normal_center;   // empty: default center (see generate_synthetic)
  std::vector<double> anomaly_center;  // empty: origin
  double noise_scale = 1.0;
  // Ratio of expected anomaly degree to normal degree. Larger values give
  // anomalies enough edge volume to reach low homophily by rewiring.
  double anomaly_degree_factor = 1.0;
  std::uint64_t seed = 0;
  std::string name = "synthetic";
};

// Throws UsageError on out-of-range fields.
void validate(const SyntheticSpec& spec);

// Gaussian class clouds wired to a target edge-label homophily. Features are
// rounded to float32 so graphs round-trip through save/load exactly. The
// default normal center is 2 on every coordinate and the default anomaly
// center the origin, so normal features are mutually aligned while
// anomalies point in scattered directions.
AttributedGraph generate_synthetic(const SyntheticSpec& spec);

struct RewireResult {
  AttributedGraph graph;
  double initial_homophily = 0.0;
  double achieved_homophily = 0.0;
  std::size_t attempted_swaps = 0;
  std::size_t accepted_swaps = 0;
  bool reached = false;  // |achieved - target| <= kRewireTolerance
};

inline constexpr double kRewireTolerance = 0.03;
inline constexpr std::size_t kRewireBudgetPerEdge = 50;

// Degree-preserving double-edge swaps (a,b),(c,d) -> (a,d),(c,b), accepted
// only when they move homophily strictly closer to the target. Attempts are
// bounded at 50 x |E|. Best effort if the target is out of reach.
RewireResult rewire_to_homophily(const AttributedGraph& g, double target, std::uint64_t seed);

// Degree-capped subgraph: edges are visited in a seeded random order and kept
// while both endpoints are below `cap`. cap == 0 returns the graph unchanged.
AttributedGraph cap_neighbors(const AttributedGraph& g, std::size_t cap, std::uint64_t seed);

}  // namespace gadt3
