#include "gadt3/graph.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "gadt3/error.hpp"
#include "gadt3/rng.hpp"

namespace gadt3 {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t edge_key(NodeId u, NodeId v) {
  if (u > v) std::swap(u, v);
  return (static_cast<std::uint64_t>(u) << 32) | v;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("missing file: " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + p.string());
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

template <typename F>
void for_each_line(const std::string& text, F&& f) {
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string_view line = trim(std::string_view(text).substr(pos, end - pos));
    if (!line.empty()) f(line, line_no);
    pos = end + 1;
  }
}

std::uint64_t parse_uint(std::string_view tok, const std::string& where) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size()) throw DataError("malformed integer '" + std::string(tok) + "' at " + where);
  return v;
}

}  // namespace

bool AttributedGraph::has_edge(NodeId u, NodeId v) const {
  if (u >= num_nodes || v >= num_nodes) return false;
  auto row = neighbors(u);
  return std::binary_search(row.begin(), row.end(), v);
}

std::vector<Edge> AttributedGraph::edge_list() const {
  std::vector<Edge> out;
  out.reserve(num_edges());
  for (NodeId u = 0; u < num_nodes; ++u)
    for (NodeId v : neighbors(u))
      if (u < v) out.emplace_back(u, v);
  return out;
}

AttributedGraph build_graph(std::string name, std::size_t num_nodes, std::span<const Edge> edges, Matrix features,
                            std::optional<std::vector<std::uint8_t>> labels, BuildReport* report) {
  BuildReport local;
  std::vector<std::vector<NodeId>> rows(num_nodes);
  for (auto [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes) throw DataError("node id out of range: edge (" + std::to_string(u) + ", " + std::to_string(v) + ")");
    if (u == v) {
      ++local.self_loops_dropped;
      continue;
    }
    rows[u].push_back(v);
    rows[v].push_back(u);
  }
  AttributedGraph g;
  g.name = std::move(name);
  g.num_nodes = num_nodes;
  g.row_offsets.assign(num_nodes + 1, 0);
  for (std::size_t u = 0; u < num_nodes; ++u) {
    auto& r = rows[u];
    std::sort(r.begin(), r.end());
    const auto before = r.size();
    r.erase(std::unique(r.begin(), r.end()), r.end());
    local.duplicates_dropped += before - r.size();
    g.row_offsets[u + 1] = g.row_offsets[u] + r.size();
  }
  // Each duplicated undirected edge was counted from both endpoints.
  local.duplicates_dropped /= 2;
  g.col_indices.reserve(g.row_offsets.back());
  for (auto& r : rows) g.col_indices.insert(g.col_indices.end(), r.begin(), r.end());
  g.features = std::move(features);
  g.labels = std::move(labels);
  validate(g);
  if (report) *report = local;
  return g;
}

void validate(const AttributedGraph& g) {
  const std::size_t n = g.num_nodes;
  if (g.row_offsets.size() != n + 1 || g.row_offsets.front() != 0 || g.row_offsets.back() != g.col_indices.size())
    throw DataError("graph: row offsets inconsistent with node/edge counts");
  if (g.features.rows != n) throw DataError("feature row count mismatch: " + std::to_string(g.features.rows) + " rows for " + std::to_string(n) + " nodes");
  if (g.labels) {
    if (g.labels->size() != n) throw DataError("label count mismatch");
    for (auto y : *g.labels)
      if (y > 1) throw DataError("label value outside {0,1}");
  }
  for (NodeId u = 0; u < n; ++u) {
    if (g.row_offsets[u] > g.row_offsets[u + 1]) throw DataError("graph: row offsets not monotone");
    auto row = g.neighbors(u);
    for (std::size_t k = 0; k < row.size(); ++k) {
      const NodeId v = row[k];
      if (v >= n) throw DataError("node id out of range in adjacency");
      if (v == u) throw DataError("graph: self-loop at node " + std::to_string(u));
      if (k > 0 && row[k - 1] >= v) throw DataError("graph: row " + std::to_string(u) + " not strictly sorted");
      if (!g.has_edge(v, u)) throw DataError("graph: adjacency not symmetric at (" + std::to_string(u) + ", " + std::to_string(v) + ")");
    }
  }
  if (!all_finite(g.features)) throw DataError("graph: non-finite feature value");
}

std::vector<NodeId> reverse_edge_index(const AttributedGraph& g) {
  std::vector<NodeId> rev(g.num_directed_edges());
  for (NodeId u = 0; u < g.num_nodes; ++u) {
    for (std::size_t e = g.row_offsets[u]; e < g.row_offsets[u + 1]; ++e) {
      const NodeId v = g.col_indices[e];
      auto row = g.neighbors(v);
      auto it = std::lower_bound(row.begin(), row.end(), u);
      if (it == row.end() || *it != u) throw DataError("graph: adjacency not symmetric");
      rev[e] = static_cast<NodeId>(g.row_offsets[v] + static_cast<std::size_t>(it - row.begin()));
    }
  }
  return rev;
}

std::vector<NodeId> edge_rows(const AttributedGraph& g) {
  std::vector<NodeId> rows(g.num_directed_edges());
  for (NodeId u = 0; u < g.num_nodes; ++u)
    for (std::size_t e = g.row_offsets[u]; e < g.row_offsets[u + 1]; ++e) rows[e] = u;
  return rows;
}

AttributedGraph load_graph(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw DataError("meta.json: " + std::string(e.what()));
  }
  std::size_t n = 0, d = 0;
  bool has_labels = false;
  std::string name;
  try {
    name = meta.at("name").get<std::string>();
    n = meta.at("num_nodes").get<std::size_t>();
    d = meta.at("feature_dim").get<std::size_t>();
    has_labels = meta.at("has_labels").get<bool>();
  } catch (const json::exception& e) {
    throw DataError("meta.json: " + std::string(e.what()));
  }

  std::vector<Edge> edges;
  const std::string edge_text = read_file(dir / "edges.tsv");
  for_each_line(edge_text, [&](std::string_view line, std::size_t no) {
    const std::string where = "edges.tsv line " + std::to_string(no);
    const auto tab = line.find_first_of("\t ");
    if (tab == std::string_view::npos) throw DataError("malformed edge at " + where);
    const auto u = parse_uint(trim(line.substr(0, tab)), where);
    const auto v = parse_uint(trim(line.substr(tab + 1)), where);
    if (u >= n || v >= n) throw DataError("node id out of range at " + where);
    edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
  });

  const std::string bytes = read_file(dir / "features.bin");
  if (bytes.size() % 4 != 0 || (d > 0 && bytes.size() % (4 * d) != 0))
    throw DataError("malformed binary length in features.bin: " + std::to_string(bytes.size()) + " bytes");
  const std::size_t rows = d == 0 ? n : bytes.size() / (4 * d);
  if (rows != n || (d == 0 && !bytes.empty()))
    throw DataError("feature row count mismatch: features.bin holds " + std::to_string(rows) + " rows, expected " + std::to_string(n));
  Matrix features(n, d);
  for (std::size_t i = 0; i < n * d; ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(bytes[4 * i + static_cast<std::size_t>(b)]);
    features.data[i] = static_cast<double>(std::bit_cast<float>(bits));
  }

  std::optional<std::vector<std::uint8_t>> labels;
  if (has_labels) {
    std::vector<std::uint8_t> y;
    const std::string text = read_file(dir / "labels.tsv");
    for_each_line(text, [&](std::string_view line, std::size_t no) {
      const auto v = parse_uint(line, "labels.tsv line " + std::to_string(no));
      if (v > 1) throw DataError("label value outside {0,1} at labels.tsv line " + std::to_string(no));
      y.push_back(static_cast<std::uint8_t>(v));
    });
    if (y.size() != n) throw DataError("labels.tsv has " + std::to_string(y.size()) + " labels, expected " + std::to_string(n));
    labels = std::move(y);
  }

  BuildReport report;
  AttributedGraph g = build_graph(name, n, edges, std::move(features), std::move(labels), &report);
  if (report.self_loops_dropped > 0) warn(dir.string() + ": dropped " + std::to_string(report.self_loops_dropped) + " self-loop(s)");
  return g;
}

void save_graph(const AttributedGraph& g, const fs::path& dir) {
  validate(g);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());

  json meta = {{"name", g.name}, {"num_nodes", g.num_nodes}, {"feature_dim", g.feature_dim()}, {"has_labels", g.has_labels()}};
  write_file(dir / "meta.json", meta.dump(2) + "\n");

  std::string edges;
  for (auto [u, v] : g.edge_list()) {
    edges += std::to_string(u);
    edges += '\t';
    edges += std::to_string(v);
    edges += '\n';
  }
  write_file(dir / "edges.tsv", edges);

  std::string bytes(g.features.size() * 4, '\0');
  for (std::size_t i = 0; i < g.features.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(g.features.data[i]));
    for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  write_file(dir / "features.bin", bytes);

  const fs::path labels_path = dir / "labels.tsv";
  if (g.labels) {
    std::string text;
    for (auto y : *g.labels) {
      text += y ? '1' : '0';
      text += '\n';
    }
    write_file(labels_path, text);
  } else {
    fs::remove(labels_path, ec);
  }
}

GraphStats compute_stats(const AttributedGraph& g) {
  GraphStats s;
  s.num_nodes = g.num_nodes;
  s.num_edges = g.num_edges();
  if (g.num_nodes > 0) {
    s.degree.min = g.degree(0);
    for (NodeId v = 0; v < g.num_nodes; ++v) {
      s.degree.min = std::min(s.degree.min, g.degree(v));
      s.degree.max = std::max(s.degree.max, g.degree(v));
    }
    s.degree.mean = static_cast<double>(g.num_directed_edges()) / static_cast<double>(g.num_nodes);
  }
  if (g.labels && g.num_nodes > 0) {
    const auto& y = *g.labels;
    s.anomaly_rate = static_cast<double>(std::count(y.begin(), y.end(), 1)) / static_cast<double>(g.num_nodes);
    if (g.num_edges() > 0) {
      std::size_t same = 0;
      for (auto [u, v] : g.edge_list()) same += y[u] == y[v];
      s.edge_label_homophily = static_cast<double>(same) / static_cast<double>(g.num_edges());
    }
  }
  return s;
}

void validate(const SyntheticSpec& spec) {
  if (spec.num_nodes < 2) throw UsageError("synthetic: num_nodes must be at least 2");
  if (spec.feature_dim < 1) throw UsageError("synthetic: feature_dim must be at least 1");
  if (!(spec.anomaly_rate > 0.0 && spec.anomaly_rate < 0.5)) throw UsageError("synthetic: anomaly_rate must be in (0, 0.5)");
  if (!(spec.target_homophily >= 0.0 && spec.target_homophily <= 1.0)) throw UsageError("synthetic: target_homophily must be in [0, 1]");
  if (!(spec.mean_degree >= 1.0)) throw UsageError("synthetic: mean_degree must be >= 1");
  if (!(spec.noise_scale > 0.0)) throw UsageError("synthetic: noise_scale must be positive");
  if (!(spec.anomaly_degree_factor > 0.0)) throw UsageError("synthetic: anomaly_degree_factor must be positive");
  if (!spec.normal_center.empty() && spec.normal_center.size() != spec.feature_dim)
    throw UsageError("synthetic: normal_center length differs from feature_dim");
  if (!spec.anomaly_center.empty() && spec.anomaly_center.size() != spec.feature_dim)
    throw UsageError("synthetic: anomaly_center length differs from feature_dim");
}

namespace {

constexpr int kGenerateRetries = 4;

// Samples `count` distinct edges between uniformly chosen endpoints of the two
// pools (or within one pool when `a` and `b` alias). Returns false if the
// attempt budget runs out.
bool sample_edges(const std::vector<NodeId>& a, const std::vector<NodeId>& b, std::size_t count, Rng& rng,
                  std::unordered_set<std::uint64_t>& seen, std::vector<Edge>& out) {
  if (count == 0) return true;
  if (a.empty() || b.empty()) return false;
  const std::size_t budget = 50 * count + 1000;
  std::size_t placed = 0;
  for (std::size_t attempt = 0; attempt < budget && placed < count; ++attempt) {
    const NodeId u = a[rng.below(a.size())];
    const NodeId v = b[rng.below(b.size())];
    if (u == v) continue;
    if (!seen.insert(edge_key(u, v)).second) continue;
    out.emplace_back(u, v);
    ++placed;
  }
  return placed == count;
}

}  // namespace

AttributedGraph generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  const std::size_t n = spec.num_nodes;
  const std::size_t d = spec.feature_dim;
  Rng rng(spec.seed);

  std::vector<std::uint8_t> labels(n);
  std::vector<NodeId> normals, anomalies;
  for (std::size_t v = 0; v < n; ++v) {
    labels[v] = rng.bernoulli(spec.anomaly_rate) ? 1 : 0;
    (labels[v] ? anomalies : normals).push_back(static_cast<NodeId>(v));
  }

  std::vector<double> normal_center = spec.normal_center;
  if (normal_center.empty()) normal_center.assign(d, 2.0);
  std::vector<double> anomaly_center = spec.anomaly_center;
  if (anomaly_center.empty()) anomaly_center.assign(d, 0.0);
  Matrix features(n, d);
  for (std::size_t v = 0; v < n; ++v) {
    const auto& c = labels[v] ? anomaly_center : normal_center;
    for (std::size_t k = 0; k < d; ++k)
      features(v, k) = static_cast<double>(static_cast<float>(c[k] + spec.noise_scale * rng.normal()));
  }

  // Split the edge budget across NN / AA / NA so the cross-class share equals
  // 1 - h while class edge volumes follow the degree factor where possible.
  const double nA = static_cast<double>(anomalies.size());
  const double nN = static_cast<double>(normals.size());
  const auto total = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.mean_degree / 2.0));
  const auto cross = static_cast<std::size_t>(std::llround((1.0 - spec.target_homophily) * static_cast<double>(total)));
  const std::size_t intra = total - cross;
  const double anomaly_volume = nA * spec.anomaly_degree_factor / (nN + nA * spec.anomaly_degree_factor);
  double aa_real = (2.0 * anomaly_volume * static_cast<double>(total) - static_cast<double>(cross)) / 2.0;
  aa_real = std::clamp(aa_real, 0.0, static_cast<double>(intra));
  std::size_t aa = static_cast<std::size_t>(std::llround(aa_real));
  std::size_t nn = intra - aa;

  const auto pairs = [](double k) { return k * (k - 1.0) / 2.0; };
  // Shift intra-class edges between classes if one side lacks room.
  if (static_cast<double>(aa) > pairs(nA)) {
    const auto cap = static_cast<std::size_t>(pairs(nA));
    nn += aa - cap;
    aa = cap;
  }
  if (static_cast<double>(nn) > pairs(nN)) {
    const auto cap = static_cast<std::size_t>(pairs(nN));
    aa += nn - cap;
    nn = cap;
  }
  if (static_cast<double>(cross) > nA * nN || static_cast<double>(aa) > pairs(nA) || static_cast<double>(nn) > pairs(nN))
    throw UsageError("synthetic: infeasible spec, cannot place " + std::to_string(total) + " edges at homophily " +
                     std::to_string(spec.target_homophily) + " with " + std::to_string(anomalies.size()) + " anomalies");

  for (int attempt = 0; attempt < kGenerateRetries; ++attempt) {
    Rng edge_rng = rng.fork(static_cast<std::uint64_t>(attempt));
    std::unordered_set<std::uint64_t> seen;
    std::vector<Edge> edges;
    edges.reserve(total);
    const bool ok = sample_edges(normals, normals, nn, edge_rng, seen, edges) &&
                    sample_edges(anomalies, anomalies, aa, edge_rng, seen, edges) &&
                    sample_edges(normals, anomalies, cross, edge_rng, seen, edges);
    if (!ok) continue;
    AttributedGraph g = build_graph(spec.name, n, edges, features, labels);
    const GraphStats stats = compute_stats(g);
    const double h = stats.edge_label_homophily.value_or(1.0);
    if (std::abs(h - spec.target_homophily) > kRewireTolerance) continue;
    if (std::abs(stats.degree.mean - spec.mean_degree) > 0.15 * spec.mean_degree) continue;
    return g;
  }
  throw UsageError("synthetic: infeasible spec, target homophily " + std::to_string(spec.target_homophily) +
                   " not reached after " + std::to_string(kGenerateRetries) + " attempts");
}

RewireResult rewire_to_homophily(const AttributedGraph& g, double target, std::uint64_t seed) {
  if (!g.labels) throw DataError("rewire: labels required");
  if (!(target >= 0.0 && target <= 1.0)) throw UsageError("rewire: target must be in [0, 1]");
  const auto& y = *g.labels;
  std::vector<Edge> edges = g.edge_list();
  RewireResult result;
  const std::size_t m = edges.size();
  if (m < 2) {
    result.graph = g;
    result.initial_homophily = result.achieved_homophily = compute_stats(g).edge_label_homophily.value_or(1.0);
    result.reached = std::abs(result.achieved_homophily - target) <= kRewireTolerance;
    return result;
  }
  std::unordered_set<std::uint64_t> present;
  present.reserve(2 * m);
  std::size_t same = 0;
  for (auto [u, v] : edges) {
    present.insert(edge_key(u, v));
    same += y[u] == y[v];
  }
  const double goal = target * static_cast<double>(m);
  result.initial_homophily = static_cast<double>(same) / static_cast<double>(m);

  Rng rng(seed);
  const std::size_t budget = kRewireBudgetPerEdge * m;
  // A swap changes the same-label count by at most 2 in steps of 1, so once
  // within half an edge of the goal no swap can improve.
  while (result.attempted_swaps < budget && std::abs(static_cast<double>(same) - goal) > 0.5) {
    ++result.attempted_swaps;
    const std::size_t i = rng.below(m);
    const std::size_t j = rng.below(m);
    if (i == j) continue;
    auto [a, b] = edges[i];
    auto [c, d] = edges[j];
    if (rng.bernoulli(0.5)) std::swap(c, d);
    if (a == d || c == b || a == c || b == d) continue;
    if (present.contains(edge_key(a, d)) || present.contains(edge_key(c, b))) continue;
    const long delta = static_cast<long>(y[a] == y[d]) + static_cast<long>(y[c] == y[b]) -
                       static_cast<long>(y[a] == y[b]) - static_cast<long>(y[c] == y[d]);
    const double next = static_cast<double>(static_cast<long>(same) + delta);
    if (std::abs(next - goal) >= std::abs(static_cast<double>(same) - goal)) continue;
    present.erase(edge_key(a, b));
    present.erase(edge_key(c, d));
    present.insert(edge_key(a, d));
    present.insert(edge_key(c, b));
    edges[i] = {a, d};
    edges[j] = {c, b};
    same = static_cast<std::size_t>(next);
    ++result.accepted_swaps;
  }

  result.achieved_homophily = static_cast<double>(same) / static_cast<double>(m);
  result.reached = std::abs(result.achieved_homophily - target) <= kRewireTolerance;
  result.graph = result.accepted_swaps == 0 ? g : build_graph(g.name, g.num_nodes, edges, g.features, g.labels);
  if (!result.reached)
    warn("rewire: target homophily " + std::to_string(target) + " not reached; best achieved " + std::to_string(result.achieved_homophily));
  return result;
}

AttributedGraph cap_neighbors(const AttributedGraph& g, std::size_t cap, std::uint64_t seed) {
  if (cap == 0) return g;
  std::vector<Edge> edges = g.edge_list();
  Rng rng(seed);
  for (std::size_t i = edges.size(); i > 1; --i) std::swap(edges[i - 1], edges[rng.below(i)]);
  std::vector<std::size_t> deg(g.num_nodes, 0);
  std::vector<Edge> kept;
  for (auto [u, v] : edges) {
    if (deg[u] < cap && deg[v] < cap) {
      kept.emplace_back(u, v);
      ++deg[u];
      ++deg[v];
    }
  }
  return build_graph(g.name, g.num_nodes, kept, g.features, g.labels);
}

}  // namespace gadt3
