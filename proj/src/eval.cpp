#include "gadt3/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <tuple>

#include "gadt3/error.hpp"
#include "gadt3/losses.hpp"

namespace gadt3 {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(ScoringMode m) { return m == ScoringMode::Affinity ? "affinity" : "predictor"; }

ScoringMode parse_scoring_mode(const std::string& s) {
  if (s == "affinity") return ScoringMode::Affinity;
  if (s == "predictor") return ScoringMode::Predictor;
  throw UsageError("unknown scoring mode '" + s + "' (expected affinity|predictor)");
}

std::vector<NodeId> rank_order(std::span<const double> scores) {
  std::vector<NodeId> order(scores.size());
  std::iota(order.begin(), order.end(), NodeId{0});
  std::stable_sort(order.begin(), order.end(), [&](NodeId a, NodeId b) { return scores[a] > scores[b]; });
  return order;
}

AnomalyRanking score_nodes(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain, ScoringMode mode) {
  AnomalyRanking r;
  r.mode = mode;
  const Embedding emb = embed(bundle, graph, domain);
  r.isolated.assign(graph.num_nodes, 0);
  for (NodeId v = 0; v < graph.num_nodes; ++v) r.isolated[v] = graph.degree(v) == 0;
  if (mode == ScoringMode::Affinity) {
    const AffinityScores a = affinity_scores(emb.embeddings, graph);
    r.scores.resize(graph.num_nodes);
    for (std::size_t v = 0; v < graph.num_nodes; ++v) r.scores[v] = a.valid[v] ? -a.scores[v] : 0.0;
  } else {
    const PredictorHead& p = bundle.predictor;
    if (p.hidden_weight.empty() || p.output_weight.empty()) throw UsageError("predictor scoring needs a predictor head");
    r.scores = predict_probabilities(bundle, emb.embeddings).data;
  }
  for (double s : r.scores)
    if (!std::isfinite(s)) throw NumericalError("score_nodes: non-finite anomaly score");
  r.order = rank_order(r.scores);
  return r;
}

namespace {

std::pair<std::size_t, std::size_t> class_counts(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw UsageError("metrics: score and label counts differ");
  std::size_t pos = 0;
  for (auto y : labels) {
    if (y > 1) throw DataError("metrics: label value outside {0,1}");
    pos += y;
  }
  return {pos, labels.size() - pos};
}

// Indices sorted by descending score.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const auto [pos, neg] = class_counts(scores, labels);
  if (pos == 0 || neg == 0) throw DataError("auroc: labels must contain both classes");
  const auto idx = descending(scores);
  // Walk blocks of equal score from the top; each positive in a block beats
  // every negative below the block and ties with negatives inside it.
  double concordant = 0.0;
  std::size_t negatives_below = neg;
  for (std::size_t b = 0; b < idx.size();) {
    std::size_t e = b;
    std::size_t block_pos = 0, block_neg = 0;
    while (e < idx.size() && scores[idx[e]] == scores[idx[b]]) {
      (labels[idx[e]] ? block_pos : block_neg)++;
      ++e;
    }
    negatives_below -= block_neg;
    concordant += static_cast<double>(block_pos) * (static_cast<double>(negatives_below) + 0.5 * static_cast<double>(block_neg));
    b = e;
  }
  return concordant / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const auto [pos, neg] = class_counts(scores, labels);
  (void)neg;
  if (pos == 0) throw DataError("auprc: no positive labels");
  const auto idx = descending(scores);
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t b = 0; b < idx.size();) {
    std::size_t e = b, block_pos = 0;
    while (e < idx.size() && scores[idx[e]] == scores[idx[b]]) {
      block_pos += labels[idx[e]];
      ++e;
    }
    tp += block_pos;
    seen += e - b;
    if (block_pos > 0)
      ap += (static_cast<double>(block_pos) / static_cast<double>(pos)) * (static_cast<double>(tp) / static_cast<double>(seen));
    b = e;
  }
  return ap;
}

MetricResult evaluate_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels, ScoringMode mode) {
  MetricResult m;
  std::tie(m.positives, m.negatives) = class_counts(scores, labels);
  if (m.positives == 0 || m.negatives == 0) throw DataError("metrics need both normal and anomalous labels");
  m.auroc = auroc(scores, labels);
  m.auprc = auprc(scores, labels);
  m.mode = mode;
  return m;
}

json to_json(const MetricResult& m) {
  return {{"auroc", m.auroc}, {"auprc", m.auprc}, {"positives", m.positives}, {"negatives", m.negatives},
          {"scoring_mode", to_string(m.mode)}};
}

HomophilyReport homophily_report(std::span<const double> affinity, std::span<const std::uint8_t> valid,
                                 std::span<const std::uint8_t> labels) {
  if (affinity.size() != labels.size() || valid.size() != labels.size())
    throw UsageError("homophily_report: length mismatch");
  HomophilyReport r;
  r.bin_edges.resize(kHistogramBins + 1);
  for (std::size_t b = 0; b <= kHistogramBins; ++b)
    r.bin_edges[b] = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(kHistogramBins);
  r.normal.assign(kHistogramBins, 0);
  r.anomaly.assign(kHistogramBins, 0);
  double sum_n = 0.0, sum_a = 0.0;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    if (!valid[v]) continue;
    const double s = std::clamp(affinity[v], -1.0, 1.0);
    auto bin = static_cast<std::size_t>((s + 1.0) / 2.0 * static_cast<double>(kHistogramBins));
    bin = std::min(bin, kHistogramBins - 1);
    if (labels[v]) {
      ++r.anomaly[bin];
      sum_a += affinity[v];
      ++r.count_anomaly;
    } else {
      ++r.normal[bin];
      sum_n += affinity[v];
      ++r.count_normal;
    }
  }
  if (r.count_normal) r.mean_normal = sum_n / static_cast<double>(r.count_normal);
  if (r.count_anomaly) r.mean_anomaly = sum_a / static_cast<double>(r.count_anomaly);
  return r;
}

HomophilyReport homophily_report(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain) {
  if (!graph.labels) throw DataError("homophily_report: labels required");
  const Embedding emb = embed(bundle, graph, domain);
  const AffinityScores a = affinity_scores(emb.embeddings, graph);
  return homophily_report(a.scores, a.valid, *graph.labels);
}

json to_json(const HomophilyReport& r) {
  return {{"bins", r.bin_edges},         {"normal", r.normal},          {"anomaly", r.anomaly},
          {"mean_normal", r.mean_normal}, {"mean_anomaly", r.mean_anomaly}, {"count_normal", r.count_normal},
          {"count_anomaly", r.count_anomaly}};
}

void export_embeddings(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain, const fs::path& dir) {
  if (graph.num_nodes == 0) throw DataError("export_embeddings: empty graph");
  const Matrix h = embed(bundle, graph, domain).embeddings;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  std::string bytes(h.size() * 4, '\0');
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(h.data[i]));
    for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  std::ofstream bin(dir / "embeddings.bin", std::ios::binary | std::ios::trunc);
  bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw DataError("write failed: " + (dir / "embeddings.bin").string());
  json side = {{"num_nodes", h.rows}, {"dim", h.cols}};
  if (graph.labels) side["labels"] = *graph.labels;
  std::ofstream meta(dir / "embeddings.json", std::ios::trunc);
  meta << side.dump(2) << '\n';
  if (!meta) throw DataError("write failed: " + (dir / "embeddings.json").string());
}

Matrix read_embeddings(const fs::path& dir) {
  std::ifstream meta_in(dir / "embeddings.json");
  if (!meta_in) throw DataError("missing file: " + (dir / "embeddings.json").string());
  const json side = json::parse(meta_in);
  const auto n = side.at("num_nodes").get<std::size_t>();
  const auto d = side.at("dim").get<std::size_t>();
  std::ifstream in(dir / "embeddings.bin", std::ios::binary);
  if (!in) throw DataError("missing file: " + (dir / "embeddings.bin").string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() != n * d * 4) throw DataError("malformed binary length in embeddings.bin");
  Matrix m(n, d);
  for (std::size_t i = 0; i < n * d; ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(bytes[4 * i + static_cast<std::size_t>(b)]);
    m.data[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return m;
}

}  // namespace gadt3
