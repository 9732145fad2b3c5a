#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gadt3/graph.hpp"
#include "gadt3/model.hpp"

namespace gadt3 {

enum class ScoringMode { Affinity, Predictor };

std::string to_string(ScoringMode m);
ScoringMode parse_scoring_mode(const std::string& s);

struct AnomalyRanking {
  std::vector<double> scores;     // higher = more anomalous
  std::vector<NodeId> order;      // descending score, ties by node id
  std::vector<std::uint8_t> isolated;
  ScoringMode mode = ScoringMode::Affinity;
};

// Eval-mode scoring. Affinity: -s(v), isolated nodes 0 and flagged.
// Predictor: the predictor head's probability.
AnomalyRanking score_nodes(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain, ScoringMode mode);

// Descending by score, ties broken by ascending node id.
std::vector<NodeId> rank_order(std::span<const double> scores);

// Mann-Whitney: (concordant + 0.5 · tied) / (P · N). Throws on single-class
// labels.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Average precision over blocks of equal score: each block contributes
// (positives in block / P) · (cumulative precision at the block's end).
double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MetricResult {
  double auroc = 0.0;
  double auprc = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  ScoringMode mode = ScoringMode::Affinity;
};

MetricResult evaluate_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels, ScoringMode mode);
nlohmann::json to_json(const MetricResult& m);

inline constexpr std::size_t kHistogramBins = 20;

struct HomophilyReport {
  std::vector<double> bin_edges;  // kHistogramBins + 1 edges over [-1, 1]
  std::vector<std::size_t> normal;
  std::vector<std::size_t> anomaly;
  double mean_normal = 0.0;   // 0 when the class is empty
  double mean_anomaly = 0.0;
  std::size_t count_normal = 0;
  std::size_t count_anomaly = 0;
};

// Affinity-score histograms per class over non-isolated nodes.
HomophilyReport homophily_report(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain);
HomophilyReport homophily_report(std::span<const double> affinity, std::span<const std::uint8_t> valid,
                                 std::span<const std::uint8_t> labels);
nlohmann::json to_json(const HomophilyReport& r);

// Writes <dir>/embeddings.bin (float32 LE, row-major) and
// <dir>/embeddings.json {num_nodes, dim, labels?}.
void export_embeddings(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain,
                       const std::filesystem::path& dir);

// Reads back an export; used by tests and external tooling.
Matrix read_embeddings(const std::filesystem::path& dir);

}  // namespace gadt3
