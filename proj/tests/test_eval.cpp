#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "gadt3/error.hpp"
#include "gadt3/eval.hpp"
#include "gadt3/pipeline.hpp"
#include "test_util.hpp"

using namespace gadt3;

namespace {

double brute_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double hits = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        hits += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return hits / pairs;
}

// Walk thresholds from the top; each distinct score admits its whole block.
double brute_auprc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::vector<double> thresholds = s;
  std::sort(thresholds.rbegin(), thresholds.rend());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const double p = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0, k = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        ++k;
        tp += y[i];
      }
    const double recall = tp / p;
    ap += (recall - prev_recall) * (tp / k);
    prev_recall = recall;
  }
  return ap;
}

// Identity encoder and one layer that passes the node's own (non-negative)
// features through, so embeddings equal features.
ModelBundle identity_bundle(std::size_t dim) {
  Rng rng(1);
  ModelBundle b = init_bundle(ModelDims{dim, dim, dim, 1, 2}, dim, true, true, rng);
  b.layers[0].weight = Matrix(dim, 2 * dim);
  for (std::size_t k = 0; k < dim; ++k) b.layers[0].weight(k, dim + k) = 1.0;
  return b;
}

}  // namespace

TEST_CASE("auroc examples") {
  CHECK(auroc(std::vector<double>{0.9, 0.7, 0.8, 0.1}, std::vector<std::uint8_t>{1, 1, 0, 0}) == 0.75);
  CHECK(auroc(std::vector<double>{3, 2, 1}, std::vector<std::uint8_t>{1, 0, 0}) == 1.0);
  CHECK(auroc(std::vector<double>{1, 1, 1, 1}, std::vector<std::uint8_t>{1, 0, 1, 0}) == 0.5);
  CHECK_THROWS_AS(auroc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{0, 0}), DataError);
}

TEST_CASE("auprc examples") {
  CHECK(auprc(std::vector<double>{4, 3, 2, 1}, std::vector<std::uint8_t>{1, 0, 1, 0}) == doctest::Approx(5.0 / 6.0));
  CHECK(auprc(std::vector<double>{4, 3, 2, 1}, std::vector<std::uint8_t>{1, 1, 0, 0}) == 1.0);
  CHECK(auprc(std::vector<double>(5, 0.3), std::vector<std::uint8_t>{1, 0, 0, 1, 0}) == doctest::Approx(0.4));
  CHECK_THROWS_AS(auprc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{0, 0}), DataError);
}

TEST_CASE("metrics agree with brute-force oracles") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    // Coarse scores force plenty of ties.
    const bool coarse = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(rng.below(6)) : rng.normal();
      y[i] = rng.bernoulli(0.3);
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(std::abs(auroc(s, y) - brute_auroc(s, y)) <= 1e-12);
    CHECK(std::abs(auprc(s, y) - brute_auprc(s, y)) <= 1e-12);
    if (!coarse) {
      std::vector<double> neg(n), mono(n);
      for (std::size_t i = 0; i < n; ++i) {
        neg[i] = -s[i];
        mono[i] = std::exp(2.0 * s[i]) + 1.0;
      }
      CHECK(std::abs(auroc(neg, y) - (1.0 - auroc(s, y))) <= 1e-12);
      CHECK(auroc(mono, y) == auroc(s, y));
    }
  }
}

TEST_CASE("rank order") {
  CHECK(rank_order(std::vector<double>{0.1, 0.5, 0.5, 0.9}) == std::vector<NodeId>{3, 1, 2, 0});
  CHECK(rank_order(std::vector<double>{1, 1, 1}) == std::vector<NodeId>{0, 1, 2});
}

TEST_CASE("node scoring") {
  SUBCASE("identical embeddings tie at minus one") {
    const AttributedGraph g = build_graph("g", 4, std::vector<Edge>{{0, 1}, {1, 2}, {2, 3}}, Matrix(4, 3, 1.0), std::nullopt);
    const AnomalyRanking r = score_nodes(identity_bundle(3), g, Domain::Source, ScoringMode::Affinity);
    for (double v : r.scores) CHECK(v == doctest::Approx(-1.0));
    CHECK(r.order == std::vector<NodeId>{0, 1, 2, 3});
  }
  SUBCASE("orthogonal node ranks first") {
    const Matrix x = Matrix::from_rows({{1, 0}, {1, 0}, {0, 1}, {1, 0}});
    const AttributedGraph g = build_graph("g", 4, std::vector<Edge>{{0, 1}, {1, 2}, {2, 3}, {0, 3}}, x, std::nullopt);
    const AnomalyRanking r = score_nodes(identity_bundle(2), g, Domain::Source, ScoringMode::Affinity);
    CHECK(r.order.front() == 2);
    CHECK(r.scores[2] == doctest::Approx(0.0));
  }
  SUBCASE("isolated nodes are flagged with score zero") {
    const AttributedGraph g = build_graph("g", 3, std::vector<Edge>{{0, 1}}, Matrix(3, 2, 1.0), std::nullopt);
    const AnomalyRanking r = score_nodes(identity_bundle(2), g, Domain::Source, ScoringMode::Affinity);
    CHECK(r.isolated == std::vector<std::uint8_t>{0, 0, 1});
    CHECK(r.scores[2] == 0.0);
  }
  SUBCASE("zero predictor scores one half") {
    ModelBundle b = identity_bundle(2);
    for (Matrix* m : {&b.predictor.hidden_weight, &b.predictor.output_weight})
      std::fill(m->data.begin(), m->data.end(), 0.0);
    const AttributedGraph g = build_graph("g", 3, std::vector<Edge>{{0, 1}, {1, 2}}, Matrix(3, 2, 1.0), std::nullopt);
    const AnomalyRanking r = score_nodes(b, g, Domain::Source, ScoringMode::Predictor);
    for (double v : r.scores) CHECK(v == 0.5);
    CHECK(r.order == std::vector<NodeId>{0, 1, 2});
  }
  SUBCASE("eval mode is deterministic") {
    SyntheticSpec spec;
    spec.num_nodes = 80;
    spec.seed = 3;
    const AttributedGraph g = generate_synthetic(spec);
    Rng rng(1);
    const ModelBundle b = init_bundle(ModelDims{8, 8, 4, 2, 4}, g.feature_dim(), false, true, rng);
    CHECK(score_nodes(b, g, Domain::Source, ScoringMode::Affinity).scores ==
          score_nodes(b, g, Domain::Source, ScoringMode::Affinity).scores);
  }
  SUBCASE("mode names") {
    CHECK(parse_scoring_mode("predictor") == ScoringMode::Predictor);
    CHECK(to_string(ScoringMode::Affinity) == "affinity");
    CHECK_THROWS_AS(parse_scoring_mode("both"), UsageError);
  }
}

TEST_CASE("metric report json") {
  const MetricResult m = evaluate_metrics(std::vector<double>{0.9, 0.7, 0.8, 0.1}, std::vector<std::uint8_t>{1, 1, 0, 0},
                                          ScoringMode::Affinity);
  const nlohmann::json j = to_json(m);
  CHECK(j.at("auroc") == 0.75);
  CHECK(j.at("positives") == 2);
  CHECK(j.at("negatives") == 2);
  CHECK(j.at("scoring_mode") == "affinity");
  CHECK(j.contains("auprc"));
}

TEST_CASE("homophily report") {
  SUBCASE("all-normal graph") {
    const AttributedGraph g = build_graph("g", 3, std::vector<Edge>{{0, 1}, {1, 2}}, Matrix(3, 2, 1.0),
                                          std::vector<std::uint8_t>{0, 0, 0});
    const HomophilyReport r = homophily_report(identity_bundle(2), g, Domain::Source);
    CHECK(r.count_anomaly == 0);
    CHECK(r.mean_anomaly == 0.0);
    CHECK(r.count_normal == 3);
    CHECK(r.bin_edges.size() == kHistogramBins + 1);
    CHECK(r.normal.back() == 3);  // s = 1 lands in the last bin
    const nlohmann::json j = to_json(r);
    for (const char* key : {"bins", "normal", "anomaly", "mean_normal", "mean_anomaly"}) CHECK(j.contains(key));
  }
  SUBCASE("labels required") {
    const AttributedGraph g = build_graph("g", 2, std::vector<Edge>{{0, 1}}, Matrix(2, 2, 1.0), std::nullopt);
    CHECK_THROWS_AS(homophily_report(identity_bundle(2), g, Domain::Source), DataError);
  }
  SUBCASE("trained bundle separates a homophilous graph") {
    SyntheticSpec spec;
    spec.num_nodes = 200;
    spec.anomaly_rate = 0.1;
    spec.seed = 2;
    const AttributedGraph g = generate_synthetic(spec);
    RunConfig c;
    c.dims = ModelDims{8, 8, 4, 2, 8};
    c.source_epochs = 30;
    c.lr = 1e-2;
    Rng rng(1);
    const SourceTrainingResult t = train_source(g, c, rng);
    const HomophilyReport r = homophily_report(t.bundle, g, Domain::Source);
    CHECK(r.mean_normal > r.mean_anomaly);
    std::size_t total = 0;
    for (std::size_t k = 0; k < kHistogramBins; ++k) total += r.normal[k] + r.anomaly[k];
    CHECK(total == r.count_normal + r.count_anomaly);
  }
}

TEST_CASE("embedding export") {
  test_util::TempDir dir("emb");
  SyntheticSpec spec;
  spec.num_nodes = 50;
  spec.seed = 4;
  const AttributedGraph g = generate_synthetic(spec);
  Rng rng(1);
  const ModelBundle b = init_bundle(ModelDims{6, 6, 3, 2, 4}, g.feature_dim(), false, true, rng);
  SUBCASE("round trip at float precision") {
    export_embeddings(b, g, Domain::Source, dir.path());
    const Matrix back = read_embeddings(dir.path());
    const Matrix h = embed(b, g, Domain::Source).embeddings;
    REQUIRE(back.same_shape(h));
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(back.data[i] == static_cast<double>(static_cast<float>(h.data[i])));
    const auto meta = nlohmann::json::parse(test_util::read_bytes(dir / "embeddings.json"));
    CHECK(meta.at("num_nodes") == 50);
    CHECK(meta.contains("labels"));
  }
  SUBCASE("unlabeled sidecar omits labels") {
    AttributedGraph u = g;
    u.labels.reset();
    export_embeddings(b, u, Domain::Source, dir.path());
    CHECK_FALSE(nlohmann::json::parse(test_util::read_bytes(dir / "embeddings.json")).contains("labels"));
  }
  SUBCASE("empty graph") {
    const AttributedGraph empty = build_graph("e", 0, std::vector<Edge>{}, Matrix(0, g.feature_dim()), std::nullopt);
    CHECK_THROWS_WITH(export_embeddings(b, empty, Domain::Source, dir.path()), doctest::Contains("empty graph"));
  }
}
