#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gadt3/error.hpp"
#include "gadt3/eval.hpp"
#include "gadt3/pipeline.hpp"
#include "test_util.hpp"

using namespace gadt3;

namespace {

// 40 nodes, two well-separated Gaussian clouds with mostly intra-class edges.
AttributedGraph separable_toy(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 40;
  std::vector<std::uint8_t> labels(n, 0);
  for (std::size_t v = 0; v < 10; ++v) labels[v] = 1;
  Matrix x(n, 4);
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t k = 0; k < 4; ++k)
      x(v, k) = static_cast<float>((labels[v] ? -3.0 : 3.0) + 0.5 * rng.normal());
  std::vector<Edge> edges;
  for (NodeId u = 0; u < n; ++u)
    for (NodeId v = u + 1; v < n; ++v) {
      const double p = labels[u] == labels[v] ? 0.25 : 0.02;
      if (rng.bernoulli(p)) edges.emplace_back(u, v);
    }
  return build_graph("toy", n, edges, x, labels);
}

RunConfig small_config() {
  RunConfig c;
  c.dims = ModelDims{8, 8, 4, 2, 8};
  c.source_epochs = 40;
  c.ttt_max_epochs = 8;
  c.patience = 3;
  c.lr = 1e-2;
  c.seed = 3;
  return c;
}

SyntheticSpec small_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.num_nodes = 120;
  s.feature_dim = 6;
  s.anomaly_rate = 0.1;
  s.mean_degree = 6;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("config validation and json") {
  RunConfig c;
  CHECK_NOTHROW(validate(c));
  SUBCASE("zero source epochs") {
    c.source_epochs = 0;
    CHECK_THROWS_WITH_AS(validate(c), doctest::Contains("source_epochs ≥ 1"), UsageError);
  }
  SUBCASE("zero patience") {
    c.patience = 0;
    CHECK_THROWS_AS(validate(c), UsageError);
  }
  SUBCASE("nonpositive lr") {
    c.lr = 0.0;
    CHECK_THROWS_AS(validate(c), UsageError);
  }
  SUBCASE("round trip") {
    c.weights.alpha_auto = true;
    c.target_init = TargetInit::FromSource;
    c.scoring_mode = ScoringMode::Predictor;
    c.neighbor_cap = 7;
    CHECK(config_from_json(to_json(c)) == c);
  }
  SUBCASE("defaults") {
    const RunConfig d = config_from_json(nlohmann::json::object());
    CHECK(d.lr == 1e-3);
    CHECK(d.source_epochs == 100);
    CHECK(d.dropout_rate == 0.7);
    CHECK(d.dims.shared_dim == 40);
    CHECK(d.weights.alpha == 20.0);
    CHECK(d.weights.lambda == 0.001);
    CHECK(d.weights.lambda_reg == 0.1);
    CHECK(d.weights.lambda_s == 0.001);
    CHECK(d.patience == 10);
  }
  SUBCASE("unknown key") {
    CHECK_THROWS_WITH_AS(config_from_json({{"learning_rate", 0.1}}), doctest::Contains("learning_rate"), UsageError);
  }
  SUBCASE("merge keeps unspecified fields") {
    c.patience = 4;
    merge_config(c, {{"lr", 0.05}});
    CHECK(c.patience == 4);
    CHECK(c.lr == 0.05);
  }
}

TEST_CASE("source training") {
  const AttributedGraph g = separable_toy(1);
  RunConfig c = small_config();
  c.source_epochs = 60;
  Rng a(c.seed), b(c.seed);
  const SourceTrainingResult r1 = train_source(g, c, a);
  SUBCASE("separable toy reaches perfect training AUROC") {
    CHECK(r1.log.size() == c.source_epochs);
    CHECK(r1.log.back().source_auroc == 1.0);
    const AnomalyRanking rank = score_nodes(r1.bundle, g, Domain::Source, ScoringMode::Predictor);
    CHECK(auroc(rank.scores, *g.labels) == 1.0);
  }
  SUBCASE("deterministic") {
    const SourceTrainingResult r2 = train_source(g, c, b);
    CHECK(r1.bundle == r2.bundle);
    CHECK(r1.centroids == r2.centroids);
  }
  SUBCASE("centroids are eval-mode class means") {
    const Matrix h = embed(r1.bundle, g, Domain::Source).embeddings;
    CHECK(compute_centroids(h, *g.labels) == r1.centroids);
  }
  SUBCASE("label requirements") {
    AttributedGraph unlabeled = g;
    unlabeled.labels.reset();
    Rng r(1);
    CHECK_THROWS_AS(train_source(unlabeled, c, r), DataError);
    AttributedGraph single = g;
    std::fill(single.labels->begin(), single.labels->end(), 0);
    CHECK_THROWS_AS(train_source(single, c, r), DataError);
  }
}

TEST_CASE("early stop score") {
  ClassCentroids c{Matrix::from_rows({{0, 0}}), Matrix::from_rows({{2, 0}})};
  SUBCASE("equidistant nodes score one") {
    CHECK(early_stop_score(Matrix::from_rows({{1, 0}, {1, 5}}), c) == doctest::Approx(1.0));
  }
  SUBCASE("distances two and one") {
    ClassCentroids d{Matrix::from_rows({{0, 0}}), Matrix::from_rows({{3, 0}})};
    CHECK(early_stop_score(Matrix::from_rows({{2, 0}}), d) == doctest::Approx(2.0));
  }
  SUBCASE("mean of ratios one and three") {
    ClassCentroids d{Matrix::from_rows({{0, 0}}), Matrix::from_rows({{4, 0}})};
    CHECK(early_stop_score(Matrix::from_rows({{2, 0}, {1, 0}}), d) == doctest::Approx(2.0));
  }
  SUBCASE("rotation invariance") {
    Rng rng(4);
    const Matrix h = test_util::random_features(6, 2, rng);
    const double th = 0.7, cs = std::cos(th), sn = std::sin(th);
    auto rot = [&](const Matrix& m) {
      Matrix r(m.rows, 2);
      for (std::size_t i = 0; i < m.rows; ++i) {
        r(i, 0) = cs * m(i, 0) - sn * m(i, 1);
        r(i, 1) = sn * m(i, 0) + cs * m(i, 1);
      }
      return r;
    };
    ClassCentroids rc{rot(c.normal), rot(c.anomaly)};
    CHECK(early_stop_score(rot(h), rc) == doctest::Approx(early_stop_score(h, c)).epsilon(1e-12));
  }
  SUBCASE("node on a centroid uses the floor") {
    const double s = early_stop_score(Matrix::from_rows({{0, 0}}), c);
    CHECK(std::isfinite(s));
    CHECK(s == doctest::Approx(2.0 / kDistanceFloor));
  }
  SUBCASE("empty target") { CHECK_THROWS_AS(early_stop_score(Matrix(0, 2), c), DataError); }
}

TEST_CASE("early stopper") {
  SUBCASE("worked sequence with patience 3") {
    EarlyStopper s(3);
    const std::vector<double> scores{1.2, 1.5, 1.4, 1.45, 1.42};
    for (std::size_t i = 0; i < scores.size(); ++i) CHECK(s.update(scores[i]) == (i == 4));
    CHECK(s.best_epoch() == 2);
    CHECK(s.best_score() == 1.5);
  }
  SUBCASE("ties do not count as improvement") {
    EarlyStopper s(2);
    CHECK_FALSE(s.update(1.0));
    CHECK_FALSE(s.update(1.0));
    CHECK(s.update(1.0));
    CHECK(s.best_epoch() == 1);
  }
  SUBCASE("steady improvement never stops") {
    EarlyStopper s(1);
    for (int i = 1; i <= 20; ++i) CHECK_FALSE(s.update(1.0 + i));
    CHECK(s.best_epoch() == 20);
  }
  CHECK_THROWS_AS(EarlyStopper(0), UsageError);
}

TEST_CASE("test-time adaptation") {
  const AttributedGraph src = generate_synthetic(small_spec(1));
  const AttributedGraph tgt = generate_synthetic(small_spec(2));
  RunConfig c = small_config();
  Rng rng(c.seed);
  const SourceTrainingResult trained = train_source(src, c, rng);

  SUBCASE("decoder and predictor stay frozen") {
    Rng r(9);
    const AdaptResult out = adapt_target(trained.bundle, trained.centroids, tgt, c, r);
    CHECK(out.bundle.layers == trained.bundle.layers);
    CHECK(out.bundle.predictor == trained.bundle.predictor);
    CHECK(out.bundle.source_encoder == trained.bundle.source_encoder);
    REQUIRE(out.bundle.target_encoder);
  }
  SUBCASE("returned encoder reproduces the best score") {
    Rng r(9);
    const AdaptResult out = adapt_target(trained.bundle, trained.centroids, tgt, c, r);
    REQUIRE_FALSE(out.trace.epochs.empty());
    double best = 0.0;
    for (const auto& e : out.trace.epochs) best = std::max(best, e.score);
    CHECK(out.trace.best_score == best);
    CHECK(out.trace.epochs[out.trace.chosen_epoch - 1].score == best);
    const Matrix h = embed(out.bundle, tgt, Domain::Target).embeddings;
    CHECK(early_stop_score(h, trained.centroids) == best);
    CHECK((out.trace.stop_reason == "patience" || out.trace.stop_reason == "max_epochs"));
  }
  SUBCASE("zero epochs keeps the initial encoder") {
    c.ttt_max_epochs = 0;
    Rng r(9);
    const AdaptResult out = adapt_target(trained.bundle, trained.centroids, tgt, c, r);
    CHECK(out.trace.epochs.empty());
    CHECK(out.trace.chosen_epoch == 0);
    CHECK(out.trace.stop_reason == "no_epochs");
    REQUIRE(out.bundle.target_encoder);
  }
  SUBCASE("deterministic") {
    Rng a(9), b(9);
    const AdaptResult x = adapt_target(trained.bundle, trained.centroids, tgt, c, a);
    const AdaptResult y = adapt_target(trained.bundle, trained.centroids, tgt, c, b);
    CHECK(x.bundle == y.bundle);
    CHECK(to_json(x.trace) == to_json(y.trace));
  }
  SUBCASE("evaluation labels record margins without changing the result") {
    Rng a(9), b(9);
    const AdaptResult plain = adapt_target(trained.bundle, trained.centroids, tgt, c, a);
    const AdaptResult labeled = adapt_target(trained.bundle, trained.centroids, tgt, c, b, AdaptOptions{true});
    CHECK(plain.bundle == labeled.bundle);
    CHECK(labeled.trace.initial_margin.has_value());
    for (const auto& e : labeled.trace.epochs) {
      CHECK(e.margin.has_value());
      CHECK(e.auroc.has_value());
    }
    CHECK_FALSE(plain.trace.epochs.front().margin.has_value());
  }
  SUBCASE("from-source init copies the encoder") {
    c.target_init = TargetInit::FromSource;
    c.ttt_max_epochs = 0;
    Rng r(9);
    const AdaptResult out = adapt_target(trained.bundle, trained.centroids, tgt, c, r);
    CHECK(out.bundle.target_encoder->weight == trained.bundle.source_encoder.weight);
    CHECK(out.trace.init_from_source);
    CHECK(out.trace.homogeneous_dims);
  }
  SUBCASE("from-source init needs equal dims") {
    SyntheticSpec s = small_spec(2);
    s.feature_dim = 5;
    c.target_init = TargetInit::FromSource;
    Rng r(9);
    CHECK_THROWS_AS(adapt_target(trained.bundle, trained.centroids, generate_synthetic(s), c, r), UsageError);
  }
  SUBCASE("missing centroids") {
    Rng r(9);
    CHECK_THROWS_AS(adapt_target(trained.bundle, ClassCentroids{}, tgt, c, r), UsageError);
  }
}

TEST_CASE("margin trace check") {
  AdaptationTrace t;
  t.initial_margin = 0.1;
  t.homogeneous_dims = true;
  t.init_from_source = true;
  t.lr = 1e-3;
  SUBCASE("strictly increasing") {
    for (std::size_t i = 1; i <= 5; ++i) t.epochs.push_back({i, 0.0, 1.0, 0.1 + 0.01 * i, std::nullopt, std::nullopt});
    const MarginReport r = margin_trace_check(t);
    CHECK(r.fraction_increasing == 1.0);
    CHECK(r.steps == 5);
    CHECK(r.final_margin == doctest::Approx(0.15));
    CHECK(r.preconditions_met);
  }
  SUBCASE("constant") {
    for (std::size_t i = 1; i <= 5; ++i) t.epochs.push_back({i, 0.0, 1.0, 0.1, std::nullopt, std::nullopt});
    CHECK(margin_trace_check(t).fraction_increasing == 0.0);
  }
  SUBCASE("step limit") {
    for (std::size_t i = 1; i <= 4; ++i) t.epochs.push_back({i, 0.0, 1.0, 0.1 + 0.01 * i, std::nullopt, std::nullopt});
    t.epochs.push_back({5, 0.0, 1.0, 0.0, std::nullopt, std::nullopt});
    CHECK(margin_trace_check(t, 4).fraction_increasing == 1.0);
    CHECK(margin_trace_check(t).fraction_increasing == doctest::Approx(0.8));
  }
  SUBCASE("large lr fails the preconditions") {
    t.lr = 0.5;
    t.epochs.push_back({1, 0.0, 1.0, 0.2, std::nullopt, std::nullopt});
    CHECK_FALSE(margin_trace_check(t).preconditions_met);
  }
  SUBCASE("no margin data") {
    t.initial_margin.reset();
    CHECK_THROWS_AS(margin_trace_check(t), DataError);
  }
}

TEST_CASE("checkpoints") {
  test_util::TempDir dir("ckpt");
  const AttributedGraph src = generate_synthetic(small_spec(1));
  RunConfig c = small_config();
  c.source_epochs = 3;
  Rng rng(c.seed);
  const SourceTrainingResult trained = train_source(src, c, rng);
  Checkpoint ck{trained.bundle, trained.centroids, c};
  const auto path = dir / "model.bin";
  save_checkpoint(ck, path);

  SUBCASE("round trip is bitwise") {
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.bundle == ck.bundle);
    CHECK(back.centroids == ck.centroids);
    CHECK(back.config == ck.config);
    CHECK(embed(back.bundle, src, Domain::Source).embeddings == embed(ck.bundle, src, Domain::Source).embeddings);
    CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  }
  SUBCASE("round trip with an adapted target encoder") {
    Rng r(2);
    ck.bundle = adapt_target(trained.bundle, trained.centroids, generate_synthetic(small_spec(5)), c, r).bundle;
    save_checkpoint(ck, path);
    CHECK(load_checkpoint(path).bundle == ck.bundle);
  }
  SUBCASE("truncated file") {
    std::string bytes = test_util::read_bytes(path);
    bytes.resize(bytes.size() - 9);
    test_util::write_text(path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("corrupt tensor block"), DataError);
  }
  SUBCASE("version mismatch") {
    std::string bytes = test_util::read_bytes(path);
    const auto pos = bytes.find("\"version\":1");
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, 11, "\"version\":2");
    test_util::write_text(path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version mismatch"), DataError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(dir / "nope.bin"), DataError); }
  SUBCASE("aggregation guard") {
    CHECK_NOTHROW(require_aggregation_mode(ck, true));
    CHECK_THROWS_AS(require_aggregation_mode(ck, false), UsageError);
  }
  SUBCASE("identical runs write identical files") {
    Rng r(c.seed);
    const SourceTrainingResult again = train_source(src, c, r);
    save_checkpoint(Checkpoint{again.bundle, again.centroids, c}, dir / "again.bin");
    CHECK(test_util::read_bytes(path) == test_util::read_bytes(dir / "again.bin"));
  }
}

TEST_CASE("class gradients") {
  const AttributedGraph src = generate_synthetic(small_spec(1));
  RunConfig c = small_config();
  c.source_epochs = 5;
  Rng rng(c.seed);
  const SourceTrainingResult trained = train_source(src, c, rng);
  const ClassGradients g = class_gradients(trained.bundle, src, Domain::Source);
  CHECK(g.norm_normal > 0.0);
  CHECK(g.norm_anomaly > 0.0);
  CHECK(std::abs(g.cosine) <= 1.0 + 1e-12);
  const ClassGradients d1 = class_gradients(trained.bundle, src, Domain::Source, 0.5, 7, 4);
  const ClassGradients d2 = class_gradients(trained.bundle, src, Domain::Source, 0.5, 7, 4);
  CHECK(d1.norm_normal == d2.norm_normal);
}
