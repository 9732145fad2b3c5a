#include "gadt3/experiments.hpp"

#include <algorithm>
#include <numeric>

#include "gadt3/error.hpp"
#include "gadt3/losses.hpp"

namespace gadt3 {

using nlohmann::json;

namespace {

enum Salt : std::uint64_t { kSourceGraph = 11, kTargetGraph = 12, kTransform = 13, kTrain = 14, kAdapt = 15, kRewire = 16 };

struct Pair {
  AttributedGraph source;
  AttributedGraph target;
};

AttributedGraph make_graph(SyntheticSpec spec, std::uint64_t seed, const char* name) {
  spec.seed = seed;
  spec.name = name;
  return generate_synthetic(spec);
}

SourceTrainingResult train_for_seed(const AttributedGraph& source, RunConfig config, std::uint64_t seed) {
  config.seed = seed;
  Rng rng(stream_seed(seed, kTrain));
  return train_source(source, config, rng);
}

double auroc_of(const ModelBundle& b, const AttributedGraph& g, Domain d, ScoringMode mode, double* ap = nullptr) {
  const AnomalyRanking r = score_nodes(b, g, d, mode);
  if (ap) *ap = auprc(r.scores, *g.labels);
  return auroc(r.scores, *g.labels);
}

}  // namespace

std::uint64_t experiment_seed(std::uint64_t base_seed, std::size_t index) { return base_seed + index; }

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t salt) { return Rng(seed).fork(salt).next_u64(); }

double median(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

AttributedGraph transform_features(const AttributedGraph& g, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = g.feature_dim();
  std::vector<std::size_t> perm(d);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = d; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<double> scale(d);
  for (double& s : scale) s = rng.uniform(0.5, 2.0);
  AttributedGraph out = g;
  for (std::size_t v = 0; v < g.num_nodes; ++v)
    for (std::size_t k = 0; k < d; ++k)
      out.features(v, k) = static_cast<double>(static_cast<float>(g.features(v, perm[k]) * scale[k]));
  return out;
}

SeparationResult run_separation_experiment(const SeparationOptions& o) {
  SeparationResult r;
  for (std::size_t i = 0; i < o.seeds; ++i) {
    const std::uint64_t seed = experiment_seed(o.base_seed, i);
    const AttributedGraph g = make_graph(o.graph, stream_seed(seed, kSourceGraph), "source");
    const SourceTrainingResult trained = train_for_seed(g, o.config, seed);
    HomophilyReport h = homophily_report(trained.bundle, g, Domain::Source);
    SeparationSeed s{seed, h.mean_normal, h.mean_anomaly, h.mean_normal > h.mean_anomaly};
    r.separated += s.separated;
    r.runs.push_back(s);
    r.last_histogram = std::move(h);
  }
  return r;
}

json to_json(const SeparationResult& r) {
  json runs = json::array();
  for (const SeparationSeed& s : r.runs)
    runs.push_back({{"seed", s.seed}, {"mean_normal", s.mean_normal}, {"mean_anomaly", s.mean_anomaly}, {"separated", s.separated}});
  return {{"runs", runs}, {"separated", r.separated}, {"seeds", r.runs.size()}, {"histogram", to_json(r.last_histogram)}};
}

MarginExperimentResult run_margin_experiment(const MarginExperimentOptions& o) {
  if (o.steps < 1) throw UsageError("exp-margin: steps must be >= 1");
  if (o.seeds < 1) throw UsageError("exp-margin: seeds must be >= 1");
  SyntheticSpec spec = o.graph;
  spec.target_homophily = o.homophily;
  validate(spec);
  RunConfig cfg = o.config;
  cfg.lr = o.lr;
  cfg.target_init = TargetInit::FromSource;
  cfg.identity_encoder = false;
  cfg.ttt_max_epochs = o.steps;
  cfg.patience = o.steps + 1;  // every step is observed
  validate(cfg);

  MarginExperimentResult r;
  r.lr = o.lr;
  r.preconditions_met = true;
  std::vector<double> fractions;
  for (std::size_t i = 0; i < o.seeds; ++i) {
    const std::uint64_t seed = experiment_seed(o.base_seed, i);
    const AttributedGraph source = make_graph(spec, stream_seed(seed, kSourceGraph), "source");
    const AttributedGraph target = make_graph(spec, stream_seed(seed, kTargetGraph), "target");
    // Source training keeps its own learning rate; only TTT uses o.lr.
    RunConfig train_cfg = o.config;
    const SourceTrainingResult trained = train_for_seed(source, train_cfg, seed);
    Rng rng(stream_seed(seed, kAdapt));
    cfg.seed = seed;
    const AdaptResult adapted = adapt_target(trained.bundle, trained.centroids, target, cfg, rng, {true});
    MarginSeed m;
    m.seed = seed;
    m.margins.push_back(*adapted.trace.initial_margin);
    for (const AdaptationEpoch& e : adapted.trace.epochs) m.margins.push_back(*e.margin);
    m.report = margin_trace_check(adapted.trace, o.steps);
    ModelBundle initial = trained.bundle;
    initial.target_encoder = initial.source_encoder;
    initial.target_encoder->domain = Domain::Target;
    m.gradients_eval = class_gradients(initial, target, Domain::Target);
    m.gradients_ttt = class_gradients(initial, target, Domain::Target, cfg.dropout_rate, stream_seed(seed, kAdapt));
    r.preconditions_met = r.preconditions_met && m.report.preconditions_met;
    fractions.push_back(m.report.fraction_increasing);
    r.runs.push_back(std::move(m));
  }
  r.median_fraction_increasing = median(fractions);
  return r;
}

json to_json(const MarginExperimentResult& r) {
  json runs = json::array();
  auto grads = [](const ClassGradients& g) {
    return json{{"norm_normal", g.norm_normal},
                {"norm_anomaly", g.norm_anomaly},
                {"cosine", g.cosine},
                {"normal_dominates", g.normal_dominates()}};
  };
  for (const MarginSeed& m : r.runs)
    runs.push_back({{"seed", m.seed},
                    {"margins", m.margins},
                    {"report", to_json(m.report)},
                    {"class_gradients", {{"eval", grads(m.gradients_eval)}, {"ttt", grads(m.gradients_ttt)}}}});
  json j = {{"runs", runs},
            {"median_fraction_increasing", r.median_fraction_increasing},
            {"lr", r.lr},
            {"preconditions_met", r.preconditions_met}};
  if (!r.preconditions_met)
    j["note"] = "monotonicity preconditions not met (equal feature dims, target encoder copied from source, lr <= 0.01); "
                "no monotonicity claim is made for this run";
  return j;
}

TransferResult run_transfer_experiment(const TransferOptions& o) {
  TransferResult r;
  for (std::size_t i = 0; i < o.seeds; ++i) {
    const std::uint64_t seed = experiment_seed(o.base_seed, i);
    const AttributedGraph source = make_graph(o.graph, stream_seed(seed, kSourceGraph), "source");
    const AttributedGraph target =
        transform_features(make_graph(o.graph, stream_seed(seed, kTargetGraph), "target"), stream_seed(seed, kTransform));
    const SourceTrainingResult trained = train_for_seed(source, o.config, seed);

    RunConfig cfg = o.config;
    cfg.seed = seed;
    RunConfig no_adapt = cfg;
    no_adapt.ttt_max_epochs = 0;
    Rng rng_before(stream_seed(seed, kAdapt));
    Rng rng_after(stream_seed(seed, kAdapt));
    const AdaptResult before = adapt_target(trained.bundle, trained.centroids, target, no_adapt, rng_before);
    const AdaptResult after = adapt_target(trained.bundle, trained.centroids, target, cfg, rng_after);

    TransferSeed t;
    t.seed = seed;
    t.auroc_before = auroc_of(before.bundle, target, Domain::Target, cfg.scoring_mode, &t.auprc_before);
    t.auroc_after = auroc_of(after.bundle, target, Domain::Target, cfg.scoring_mode, &t.auprc_after);
    t.chosen_epoch = after.trace.chosen_epoch;
    r.not_worse += t.auroc_after >= t.auroc_before;
    r.runs.push_back(t);
  }
  return r;
}

json to_json(const TransferResult& r) {
  json runs = json::array();
  for (const TransferSeed& t : r.runs)
    runs.push_back({{"seed", t.seed},
                    {"auroc_before", t.auroc_before},
                    {"auroc_after", t.auroc_after},
                    {"auprc_before", t.auprc_before},
                    {"auprc_after", t.auprc_after},
                    {"chosen_epoch", t.chosen_epoch}});
  return {{"runs", runs}, {"not_worse", r.not_worse}, {"seeds", r.runs.size()}};
}

SyntheticSpec default_sweep_target() {
  SyntheticSpec s;
  s.anomaly_rate = 0.1;
  s.anomaly_degree_factor = 9.0;
  return s;
}

HomophilyExperimentResult run_homophily_experiment(const HomophilyExperimentOptions& o) {
  if (o.levels.empty()) throw UsageError("exp-homophily: no homophily levels");
  for (double h : o.levels)
    if (!(h >= 0.0 && h <= 1.0)) throw UsageError("exp-homophily: levels must lie in [0, 1]");
  if (o.seeds < 1) throw UsageError("exp-homophily: seeds must be >= 1");
  if (o.source) {
    require_aggregation_mode(*o.source, o.config.nsaw_enabled);
    if (o.source->bundle.source_encoder.input_dim != o.source_graph.feature_dim && o.config.target_init == TargetInit::FromSource)
      throw UsageError("exp-homophily: from_source init needs equal feature dims");
  }
  validate(o.config);

  HomophilyExperimentResult r;
  r.rows.resize(o.levels.size());
  for (std::size_t l = 0; l < o.levels.size(); ++l) r.rows[l].level = o.levels[l];
  for (std::size_t i = 0; i < o.seeds; ++i) {
    const std::uint64_t seed = experiment_seed(o.base_seed, i);
    ModelBundle bundle;
    ClassCentroids centroids;
    if (o.source) {
      bundle = o.source->bundle;
      centroids = o.source->centroids;
    } else {
      const AttributedGraph source = make_graph(o.source_graph, stream_seed(seed, kSourceGraph), "source");
      SourceTrainingResult trained = train_for_seed(source, o.config, seed);
      bundle = std::move(trained.bundle);
      centroids = std::move(trained.centroids);
    }
    const AttributedGraph base = make_graph(o.target_graph, stream_seed(seed, kTargetGraph), "target");
    if (!base.labels) throw DataError("exp-homophily: target graph is unlabeled");
    for (std::size_t l = 0; l < o.levels.size(); ++l) {
      const RewireResult rw = rewire_to_homophily(base, o.levels[l], stream_seed(seed, kRewire + l));
      RunConfig cfg = o.config;
      cfg.seed = seed;
      Rng rng(stream_seed(seed, kAdapt));
      const AdaptResult adapted = adapt_target(bundle, centroids, rw.graph, cfg, rng);
      double ap = 0.0;
      HomophilyRow& row = r.rows[l];
      row.achieved.push_back(rw.achieved_homophily);
      row.auroc.push_back(auroc_of(adapted.bundle, rw.graph, Domain::Target, cfg.scoring_mode, &ap));
      row.auprc.push_back(ap);
    }
  }
  std::vector<double> high, low;
  for (HomophilyRow& row : r.rows) {
    row.median_auroc = median(row.auroc);
    if (row.level >= 0.5) high.insert(high.end(), row.auroc.begin(), row.auroc.end());
    if (row.level <= 0.3) low.insert(low.end(), row.auroc.begin(), row.auroc.end());
  }
  if (!high.empty()) r.median_auroc_high = median(high);
  if (!low.empty()) r.median_auroc_low = median(low);
  return r;
}

json to_json(const HomophilyExperimentResult& r) {
  json rows = json::array();
  for (const HomophilyRow& row : r.rows)
    rows.push_back({{"homophily", row.level},
                    {"achieved_homophily", row.achieved},
                    {"auroc", row.auroc},
                    {"auprc", row.auprc},
                    {"median_auroc", row.median_auroc}});
  json j = {{"rows", rows}};
  if (r.median_auroc_high) j["median_auroc_high"] = *r.median_auroc_high;
  if (r.median_auroc_low) j["median_auroc_low"] = *r.median_auroc_low;
  return j;
}

namespace {

AttributedGraph tiny_graph(Rng& rng, std::size_t feature_dim) {
  const std::size_t n = 8 + rng.below(3);
  std::vector<Edge> edges;
  for (NodeId u = 0; u < n; ++u)
    for (NodeId v = u + 1; v < n; ++v)
      if (rng.bernoulli(0.35)) edges.emplace_back(u, v);
  // Keep every node connected to something so affinity is defined everywhere.
  for (NodeId u = 0; u + 1 < n; ++u) edges.emplace_back(u, u + 1);
  Matrix x(n, feature_dim);
  for (double& v : x.data) v = rng.normal();
  std::vector<std::uint8_t> y(n, 0);
  y[0] = 1;
  for (std::size_t v = 1; v < n; ++v) y[v] = rng.bernoulli(0.25);
  return build_graph("gradcheck", n, edges, std::move(x), std::move(y));
}

// Rebuilds bundle variables from a flat leaf list in the order
// [encoder, (W, b, U) per layer, predictor W1, b1, W2, b2].
BundleVars vars_from(std::span<const ad::Var> v, std::size_t num_layers, std::size_t& next) {
  BundleVars b;
  b.encoder = v[next++];
  for (std::size_t l = 0; l < num_layers; ++l) {
    b.layers.push_back({v[next], v[next + 1], v[next + 2]});
    next += 3;
  }
  return b;
}

}  // namespace

GradCheckSuiteResult run_model_gradcheck(std::uint64_t seed, std::size_t points, double tol) {
  GradCheckSuiteResult out;
  Rng rng(seed);
  const ModelDims dims{4, 5, 3, 2, 4};
  const LossWeights weights{0.5, 0.3, 0.2, 3.0, false, 2};
  constexpr double kStep = 1e-6;
  for (std::size_t p = 0; p < points; ++p) {
    const AttributedGraph g = tiny_graph(rng, 3);
    const GraphTopology topo(g);
    Rng init = rng.fork(p);
    ModelBundle b = init_bundle(dims, g.feature_dim(), false, true, init);
    // Non-zero biases so no unit sits exactly at the relu kink.
    for (NsawLayer& l : b.layers)
      for (double& x : l.bias.data) x = 0.1 * init.normal();
    for (double& x : b.predictor.hidden_bias.data) x = 0.1 * init.normal();
    const std::uint64_t pass_seed = rng.next_u64();

    std::vector<Matrix> train_point{b.source_encoder.weight};
    for (const NsawLayer& l : b.layers) {
      train_point.push_back(l.weight);
      train_point.push_back(l.bias);
      train_point.push_back(l.attention);
    }
    for (const Matrix* m : {&b.predictor.hidden_weight, &b.predictor.hidden_bias, &b.predictor.output_weight,
                            &b.predictor.output_bias})
      train_point.push_back(*m);

    // Dropout masks and negative samples are redrawn from the same seed on
    // every evaluation, so the loss is a fixed function of the parameters.
    auto train_fn = [&](ad::Tape& tape, std::span<const ad::Var> v) {
      std::size_t next = 0;
      BundleVars bv = vars_from(v, dims.num_layers, next);
      bv.hidden_weight = v[next];
      bv.hidden_bias = v[next + 1];
      bv.output_weight = v[next + 2];
      bv.output_bias = v[next + 3];
      Rng pass(pass_seed);
      Rng drop = pass.fork(1);
      const ForwardOptions opts{true, 0.3, &drop};
      ForwardResult fr = forward_embeddings(bv, b, tape.constant(g.features), topo, opts);
      ad::Var probs = predict(bv, fr.embeddings);
      return train_loss(fr.embeddings, probs, g, topo, weights, pass).total;
    };
    out.train.push_back(ad::grad_check(train_fn, train_point, kStep, tol));

    ModelBundle adapted = b;
    adapted.target_encoder = init_encoder(Domain::Target, g.feature_dim(), dims.shared_dim, false, init);
    std::vector<Matrix> ttt_point{adapted.target_encoder->weight};
    for (const NsawLayer& l : b.layers) {
      ttt_point.push_back(l.weight);
      ttt_point.push_back(l.bias);
      ttt_point.push_back(l.attention);
    }
    auto ttt_fn = [&](ad::Tape& tape, std::span<const ad::Var> v) {
      std::size_t next = 0;
      BundleVars bv = vars_from(v, dims.num_layers, next);
      Rng pass(pass_seed);
      Rng drop = pass.fork(1);
      const ForwardOptions opts{true, 0.3, &drop};
      ForwardResult fr = forward_embeddings(bv, adapted, tape.constant(g.features), topo, opts);
      return ttt_loss(fr.embeddings, g, topo, weights.lambda_reg, pass, weights.neg_samples_k);
    };
    out.ttt.push_back(ad::grad_check(ttt_fn, ttt_point, kStep, tol));
  }
  for (const auto* list : {&out.train, &out.ttt})
    for (const ad::GradCheckReport& r : *list) out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
  out.passed = points > 0 && out.max_rel_error <= tol;
  return out;
}

json to_json(const GradCheckSuiteResult& r) {
  auto reports = [](const std::vector<ad::GradCheckReport>& list) {
    json a = json::array();
    for (const ad::GradCheckReport& x : list)
      a.push_back({{"max_rel_error", x.max_rel_error},
                   {"max_abs_error", x.max_abs_error},
                   {"entries_checked", x.entries_checked},
                   {"passed", x.passed}});
    return a;
  };
  return {{"train_loss", reports(r.train)}, {"ttt_loss", reports(r.ttt)}, {"max_rel_error", r.max_rel_error}, {"passed", r.passed}};
}

}  // namespace gadt3
