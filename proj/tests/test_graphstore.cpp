#include <doctest.h>

#include <algorithm>

#include "gadt3/error.hpp"
#include "gadt3/graph.hpp"
#include "test_util.hpp"

using namespace gadt3;
using test_util::TempDir;

namespace {

void write_graph_dir(const TempDir& dir, std::size_t n, std::size_t d, const std::string& edges,
                     const std::string* labels = nullptr) {
  test_util::write_text(dir / "meta.json", "{\"name\": \"t\", \"num_nodes\": " + std::to_string(n) + ", \"feature_dim\": " +
                                               std::to_string(d) + ", \"has_labels\": " + (labels ? "true" : "false") + "}");
  test_util::write_text(dir / "edges.tsv", edges);
  test_util::write_text(dir / "features.bin", std::string(n * d * 4, '\0'));
  if (labels) test_util::write_text(dir / "labels.tsv", *labels);
}

std::vector<std::size_t> degrees(const AttributedGraph& g) {
  std::vector<std::size_t> d(g.num_nodes);
  for (NodeId v = 0; v < g.num_nodes; ++v) d[v] = g.degree(v);
  return d;
}

}  // namespace

TEST_CASE("load symmetrizes edges") {
  TempDir dir("load");
  write_graph_dir(dir, 3, 2, "0\t1\n");
  const AttributedGraph g = load_graph(dir.path());
  CHECK(g.num_nodes == 3);
  CHECK(g.has_edge(0, 1));
  CHECK(g.has_edge(1, 0));
  CHECK(g.degree(2) == 0);
  CHECK(g.num_edges() == 1);
  CHECK(g.row_offsets == std::vector<std::size_t>{0, 1, 2, 2});
}

TEST_CASE("self-loops are dropped with a warning") {
  TempDir dir("selfloop");
  write_graph_dir(dir, 2, 1, "0\t0\n0\t1\n");
  test_util::WarningCapture warnings;
  const AttributedGraph g = load_graph(dir.path());
  CHECK(g.num_edges() == 1);
  CHECK_FALSE(g.has_edge(0, 0));
  REQUIRE(warnings.messages.size() == 1);
  CHECK(warnings.messages[0].find("self-loop") != std::string::npos);
}

TEST_CASE("load errors") {
  SUBCASE("label outside {0,1}") {
    TempDir dir("badlabel");
    const std::string labels = "0\n2\n";
    write_graph_dir(dir, 2, 1, "", &labels);
    CHECK_THROWS_WITH_AS(load_graph(dir.path()), doctest::Contains("label value outside {0,1}"), DataError);
  }
  SUBCASE("node id out of range") {
    TempDir dir("range");
    write_graph_dir(dir, 2, 1, "0\t1\n1\t5\n");
    CHECK_THROWS_WITH_AS(load_graph(dir.path()), doctest::Contains("edges.tsv line 2"), DataError);
  }
  SUBCASE("missing file is named") {
    TempDir dir("missing");
    const std::string labels = "0\n1\n";
    write_graph_dir(dir, 2, 1, "", &labels);
    std::filesystem::remove(dir / "labels.tsv");
    CHECK_THROWS_WITH_AS(load_graph(dir.path()), doctest::Contains("labels.tsv"), DataError);
  }
  SUBCASE("truncated features") {
    TempDir dir("trunc");
    write_graph_dir(dir, 3, 2, "");
    test_util::write_text(dir / "features.bin", std::string(10, '\0'));
    CHECK_THROWS_WITH_AS(load_graph(dir.path()), doctest::Contains("malformed binary length"), DataError);
  }
  SUBCASE("feature row count mismatch") {
    TempDir dir("rows");
    write_graph_dir(dir, 3, 2, "");
    test_util::write_text(dir / "features.bin", std::string(2 * 2 * 4, '\0'));
    CHECK_THROWS_WITH_AS(load_graph(dir.path()), doctest::Contains("feature row count mismatch"), DataError);
  }
}

TEST_CASE("save/load round trip") {
  Rng rng(4);
  SUBCASE("labeled graph") {
    const std::vector<Edge> edges{{0, 1}, {1, 2}, {2, 3}, {0, 3}};
    const AttributedGraph g = build_graph("rt", 5, edges, test_util::random_features(5, 3, rng), std::vector<std::uint8_t>{0, 1, 0, 0, 1});
    TempDir dir("rt");
    save_graph(g, dir.path());
    CHECK(load_graph(dir.path()) == g);
  }
  SUBCASE("unlabeled graph has no labels file") {
    const std::vector<Edge> edges{{0, 1}};
    const AttributedGraph g = build_graph("u", 2, edges, test_util::random_features(2, 2, rng), std::nullopt);
    TempDir dir("unlab");
    save_graph(g, dir.path());
    CHECK_FALSE(std::filesystem::exists(dir / "labels.tsv"));
    const AttributedGraph back = load_graph(dir.path());
    CHECK_FALSE(back.labels.has_value());
    CHECK(back == g);
  }
  SUBCASE("edgeless graph") {
    const AttributedGraph g = build_graph("e", 4, {}, test_util::random_features(4, 2, rng), std::vector<std::uint8_t>{0, 0, 1, 0});
    TempDir dir("edgeless");
    save_graph(g, dir.path());
    CHECK(std::filesystem::file_size(dir / "edges.tsv") == 0);
    CHECK(load_graph(dir.path()) == g);
  }
  SUBCASE("synthetic graph") {
    SyntheticSpec spec;
    spec.num_nodes = 200;
    spec.seed = 3;
    const AttributedGraph g = generate_synthetic(spec);
    TempDir dir("synth");
    save_graph(g, dir.path());
    CHECK(load_graph(dir.path()) == g);
  }
}

TEST_CASE("build_graph dedupes and validates") {
  Rng rng(1);
  BuildReport report;
  const std::vector<Edge> edges{{0, 1}, {1, 0}, {0, 1}, {2, 2}};
  const AttributedGraph g = build_graph("b", 3, edges, test_util::random_features(3, 1, rng), std::nullopt, &report);
  CHECK(g.num_edges() == 1);
  CHECK(report.self_loops_dropped == 1);
  CHECK(report.duplicates_dropped == 2);
  CHECK_NOTHROW(validate(g));
  CHECK(g.edge_list() == std::vector<Edge>{{0, 1}});
  const auto rev = reverse_edge_index(g);
  for (std::size_t e = 0; e < rev.size(); ++e) CHECK(rev[rev[e]] == e);
}

TEST_CASE("graph stats") {
  Rng rng(2);
  SUBCASE("hand example") {
    const std::vector<Edge> edges{{0, 1}, {1, 2}};
    const AttributedGraph g = build_graph("s", 3, edges, test_util::random_features(3, 1, rng), std::vector<std::uint8_t>{0, 0, 1});
    const GraphStats s = compute_stats(g);
    CHECK(*s.anomaly_rate == doctest::Approx(1.0 / 3.0));
    CHECK(*s.edge_label_homophily == doctest::Approx(0.5));
    CHECK(s.num_edges == 2);
    CHECK(s.degree.min == 1);
    CHECK(s.degree.max == 2);
  }
  SUBCASE("all normal") {
    const std::vector<Edge> edges{{0, 1}, {1, 2}};
    const AttributedGraph g = build_graph("s", 3, edges, test_util::random_features(3, 1, rng), std::vector<std::uint8_t>{0, 0, 0});
    CHECK(*compute_stats(g).edge_label_homophily == 1.0);
  }
  SUBCASE("unlabeled") {
    const std::vector<Edge> edges{{0, 1}};
    const AttributedGraph g = build_graph("s", 2, edges, test_util::random_features(2, 1, rng), std::nullopt);
    CHECK_FALSE(compute_stats(g).edge_label_homophily.has_value());
    CHECK_FALSE(compute_stats(g).anomaly_rate.has_value());
  }
}

TEST_CASE("synthetic generator") {
  SyntheticSpec spec;
  spec.num_nodes = 1000;
  spec.anomaly_rate = 0.05;
  spec.target_homophily = 0.9;
  spec.seed = 7;
  const AttributedGraph a = generate_synthetic(spec);
  CHECK(a == generate_synthetic(spec));
  CHECK_NOTHROW(validate(a));
  const GraphStats s = compute_stats(a);
  CHECK(*s.edge_label_homophily >= 0.87);
  CHECK(*s.edge_label_homophily <= 0.93);
  const auto anomalies = std::count(a.labels->begin(), a.labels->end(), 1);
  CHECK(anomalies >= 30);
  CHECK(anomalies <= 70);
  SUBCASE("different seed differs") {
    spec.seed = 8;
    CHECK_FALSE(generate_synthetic(spec) == a);
  }
  SUBCASE("invalid spec") {
    spec.target_homophily = 1.5;
    CHECK_THROWS_AS(generate_synthetic(spec), UsageError);
  }
  SUBCASE("infeasible homophily names the problem") {
    // Too few anomalies to host every cross-class edge.
    spec.num_nodes = 30;
    spec.target_homophily = 0.0;
    CHECK_THROWS_WITH_AS(generate_synthetic(spec), doctest::Contains("infeasible"), UsageError);
  }
}

TEST_CASE("rewiring") {
  SyntheticSpec spec;
  spec.seed = 5;
  SUBCASE("target equal to current homophily is a fixed point") {
    const AttributedGraph g = generate_synthetic(spec);
    const double h = *compute_stats(g).edge_label_homophily;
    const RewireResult r = rewire_to_homophily(g, h, 1);
    CHECK(r.accepted_swaps == 0);
    CHECK(r.graph == g);
  }
  SUBCASE("0.9 to 0.3 preserves degrees") {
    spec.anomaly_rate = 0.1;
    spec.anomaly_degree_factor = 9.0;
    const AttributedGraph g = generate_synthetic(spec);
    const RewireResult r = rewire_to_homophily(g, 0.3, 2);
    const double h = *compute_stats(r.graph).edge_label_homophily;
    CHECK(h >= 0.27);
    CHECK(h <= 0.33);
    CHECK(r.reached);
    CHECK(degrees(r.graph) == degrees(g));
    CHECK(r.graph.features == g.features);
    CHECK_NOTHROW(validate(r.graph));
  }
  SUBCASE("unreachable target warns") {
    const AttributedGraph g = generate_synthetic(spec);  // 5% anomalies, equal degrees
    test_util::WarningCapture warnings;
    const RewireResult r = rewire_to_homophily(g, 0.1, 3);
    CHECK_FALSE(r.reached);
    CHECK(warnings.messages.size() == 1);
    CHECK(degrees(r.graph) == degrees(g));
  }
}

TEST_CASE("neighbor cap") {
  SyntheticSpec spec;
  spec.num_nodes = 300;
  spec.seed = 9;
  const AttributedGraph g = generate_synthetic(spec);
  CHECK(cap_neighbors(g, 0, 1) == g);
  const AttributedGraph c = cap_neighbors(g, 3, 1);
  CHECK_NOTHROW(validate(c));
  for (NodeId v = 0; v < c.num_nodes; ++v) CHECK(c.degree(v) <= 3);
  for (const Edge& e : c.edge_list()) CHECK(g.has_edge(e.first, e.second));
}
