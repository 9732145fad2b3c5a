#include "gadt3/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "gadt3/adam.hpp"
#include "gadt3/error.hpp"

namespace gadt3 {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Independent streams per phase so that, e.g., changing the epoch count does
// not perturb initialization.
enum StreamSalt : std::uint64_t { kInitStream = 1, kDropoutStream = 2, kSampleStream = 3, kTargetInitStream = 4 };

std::string to_string(TargetInit t) { return t == TargetInit::Fresh ? "fresh" : "from_source"; }

TargetInit parse_target_init(const std::string& s) {
  if (s == "fresh") return TargetInit::Fresh;
  if (s == "from_source") return TargetInit::FromSource;
  throw UsageError("unknown target_init '" + s + "' (expected fresh|from_source)");
}

}  // namespace

bool RunConfig::operator==(const RunConfig& o) const { return to_json(*this) == to_json(o); }

void validate(const RunConfig& c) {
  validate(c.weights);
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw UsageError("config: lr must be > 0");
  if (c.source_epochs < 1) throw UsageError("config: source_epochs ≥ 1 required");
  if (c.patience < 1) throw UsageError("config: patience must be >= 1");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) throw UsageError("config: dropout_rate must be in [0, 1)");
  const ModelDims& d = c.dims;
  if (d.shared_dim == 0 || d.hidden_dim == 0 || d.attn_dim == 0 || d.num_layers == 0 || d.predictor_hidden == 0)
    throw UsageError("config: dimensions must be positive");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "shared_dim",     "hidden_dim", "attn_dim",       "num_layers",   "predictor_hidden", "lambda",
      "lambda_reg",     "lambda_s",   "alpha",          "neg_samples_k", "lr",              "source_epochs",
      "ttt_max_epochs", "patience",   "dropout_rate",   "seed",          "nsaw_enabled",    "scoring_mode",
      "identity_encoder", "target_init", "neighbor_cap"};
  return keys;
}

json to_json(const RunConfig& c) {
  json j;
  j["shared_dim"] = c.dims.shared_dim;
  j["hidden_dim"] = c.dims.hidden_dim;
  j["attn_dim"] = c.dims.attn_dim;
  j["num_layers"] = c.dims.num_layers;
  j["predictor_hidden"] = c.dims.predictor_hidden;
  j["lambda"] = c.weights.lambda;
  j["lambda_reg"] = c.weights.lambda_reg;
  j["lambda_s"] = c.weights.lambda_s;
  j["alpha"] = c.weights.alpha_auto ? json("auto") : json(c.weights.alpha);
  j["neg_samples_k"] = c.weights.neg_samples_k;
  j["lr"] = c.lr;
  j["source_epochs"] = c.source_epochs;
  j["ttt_max_epochs"] = c.ttt_max_epochs;
  j["patience"] = c.patience;
  j["dropout_rate"] = c.dropout_rate;
  j["seed"] = c.seed;
  j["nsaw_enabled"] = c.nsaw_enabled;
  j["scoring_mode"] = to_string(c.scoring_mode);
  j["identity_encoder"] = c.identity_encoder;
  j["target_init"] = to_string(c.target_init);
  j["neighbor_cap"] = c.neighbor_cap;
  return j;
}

void merge_config(RunConfig& c, const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  const auto& keys = config_keys();
  for (const auto& [key, _] : j.items())
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw UsageError("config: unknown key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("shared_dim", c.dims.shared_dim);
    get("hidden_dim", c.dims.hidden_dim);
    get("attn_dim", c.dims.attn_dim);
    get("num_layers", c.dims.num_layers);
    get("predictor_hidden", c.dims.predictor_hidden);
    get("lambda", c.weights.lambda);
    get("lambda_reg", c.weights.lambda_reg);
    get("lambda_s", c.weights.lambda_s);
    if (j.contains("alpha")) {
      const json& a = j.at("alpha");
      if (a.is_string()) {
        if (a.get<std::string>() != "auto") throw UsageError("config: alpha must be a number or \"auto\"");
        c.weights.alpha_auto = true;
      } else {
        c.weights.alpha = a.get<double>();
        c.weights.alpha_auto = false;
      }
    }
    get("neg_samples_k", c.weights.neg_samples_k);
    get("lr", c.lr);
    get("source_epochs", c.source_epochs);
    get("ttt_max_epochs", c.ttt_max_epochs);
    get("patience", c.patience);
    get("dropout_rate", c.dropout_rate);
    get("seed", c.seed);
    get("nsaw_enabled", c.nsaw_enabled);
    if (j.contains("scoring_mode")) c.scoring_mode = parse_scoring_mode(j.at("scoring_mode").get<std::string>());
    get("identity_encoder", c.identity_encoder);
    if (j.contains("target_init")) c.target_init = parse_target_init(j.at("target_init").get<std::string>());
    get("neighbor_cap", c.neighbor_cap);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  merge_config(c, j);
  validate(c);
  return c;
}

ClassCentroids compute_centroids(const Matrix& h, const std::vector<std::uint8_t>& labels) {
  if (labels.size() != h.rows) throw UsageError("centroids: label count differs from embedding rows");
  ClassCentroids c{Matrix(1, h.cols), Matrix(1, h.cols)};
  std::size_t nn = 0, na = 0;
  for (std::size_t v = 0; v < h.rows; ++v) {
    Matrix& target = labels[v] ? c.anomaly : c.normal;
    (labels[v] ? na : nn)++;
    for (std::size_t k = 0; k < h.cols; ++k) target(0, k) += h(v, k);
  }
  if (nn == 0 || na == 0) throw DataError("centroids need at least one node of each class");
  for (double& x : c.normal.data) x /= static_cast<double>(nn);
  for (double& x : c.anomaly.data) x /= static_cast<double>(na);
  return c;
}

json to_json(const std::vector<EpochLog>& log) {
  json arr = json::array();
  for (const EpochLog& e : log)
    arr.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"supervised_loss", e.supervised_loss},
                   {"self_supervised_loss", e.self_supervised_loss},
                   {"source_auroc", e.source_auroc}});
  return arr;
}

SourceTrainingResult train_source(const AttributedGraph& source_in, const RunConfig& config, Rng& rng) {
  validate(config);
  if (!source_in.labels) throw DataError("train_source: source graph has no labels");
  const auto& labels = *source_in.labels;
  const auto anomalies = std::count(labels.begin(), labels.end(), 1);
  if (anomalies == 0 || static_cast<std::size_t>(anomalies) == labels.size())
    throw DataError("train_source: source labels contain a single class");

  Rng init_rng = rng.fork(kInitStream);
  Rng dropout_rng = rng.fork(kDropoutStream);
  Rng sample_rng = rng.fork(kSampleStream);

  const AttributedGraph source = cap_neighbors(source_in, config.neighbor_cap, config.seed);
  const GraphTopology topo(source);
  SourceTrainingResult out;
  out.bundle = init_bundle(config.dims, source.feature_dim(), config.identity_encoder, config.nsaw_enabled, init_rng);
  ModelBundle& b = out.bundle;

  std::vector<Matrix*> params;
  if (!b.source_encoder.identity) params.push_back(&b.source_encoder.weight);
  for (NsawLayer& l : b.layers) {
    params.push_back(&l.weight);
    params.push_back(&l.bias);
    params.push_back(&l.attention);
  }
  params.push_back(&b.predictor.hidden_weight);
  params.push_back(&b.predictor.hidden_bias);
  params.push_back(&b.predictor.output_weight);
  params.push_back(&b.predictor.output_bias);

  Adam adam(AdamOptions{config.lr});
  const ForwardOptions train_mode{true, config.dropout_rate, &dropout_rng};
  for (std::size_t epoch = 1; epoch <= config.source_epochs; ++epoch) {
    ad::Tape tape;
    BundleVars vars = bind(tape, b, Domain::Source, {true, true, true});
    std::vector<ad::Var> leaves;
    if (vars.encoder) leaves.push_back(*vars.encoder);
    for (const LayerVars& l : vars.layers) {
      leaves.push_back(l.weight);
      leaves.push_back(l.bias);
      leaves.push_back(l.attention);
    }
    for (ad::Var v : {vars.hidden_weight, vars.hidden_bias, vars.output_weight, vars.output_bias}) leaves.push_back(v);

    ForwardResult fr = forward_embeddings(vars, b, tape.constant(source.features), topo, train_mode);
    ad::Var probs = predict(vars, fr.embeddings);
    TrainLossParts parts = train_loss(fr.embeddings, probs, source, topo, config.weights, sample_rng);
    tape.backward(parts.total);
    std::vector<Matrix> grads;
    grads.reserve(leaves.size());
    for (ad::Var v : leaves) grads.push_back(tape.grad(v));
    adam.step(params, grads);

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = parts.total.scalar();
    entry.supervised_loss = parts.supervised.scalar();
    entry.self_supervised_loss = parts.self_supervised.scalar();
    const Matrix h_eval = embed(b, source, topo, Domain::Source).embeddings;
    entry.source_auroc = auroc(predict_probabilities(b, h_eval).data, labels);
    out.log.push_back(entry);
  }

  out.centroids = compute_centroids(embed(b, source, topo, Domain::Source).embeddings, labels);
  return out;
}

double early_stop_score(const Matrix& h, const ClassCentroids& c) {
  if (h.rows == 0) throw DataError("early_stop_score: empty target");
  if (c.normal.cols != h.cols || c.anomaly.cols != h.cols) throw UsageError("early_stop_score: centroid dim mismatch");
  if (!all_finite(c.normal) || !all_finite(c.anomaly)) throw NumericalError("early_stop_score: non-finite centroid");
  double total = 0.0;
  for (std::size_t i = 0; i < h.rows; ++i) {
    double dn = 0.0, da = 0.0;
    for (std::size_t k = 0; k < h.cols; ++k) {
      const double a = h(i, k) - c.normal(0, k);
      const double b = h(i, k) - c.anomaly(0, k);
      dn += a * a;
      da += b * b;
    }
    dn = std::sqrt(dn);
    da = std::sqrt(da);
    total += std::max(dn, da) / std::max(std::min(dn, da), kDistanceFloor);
  }
  return total / static_cast<double>(h.rows);
}

EarlyStopper::EarlyStopper(std::size_t patience) : patience_(patience) {
  if (patience < 1) throw UsageError("early stopping: patience must be >= 1");
}

bool EarlyStopper::update(double score) {
  ++epochs_;
  if (best_epoch_ == 0 || score > best_score_) {
    best_score_ = score;
    best_epoch_ = epochs_;
    stale_ = 0;
    return false;
  }
  ++stale_;
  return stale_ >= patience_;
}

json to_json(const AdaptationTrace& t) {
  json epochs = json::array();
  for (const AdaptationEpoch& e : t.epochs) {
    json row = {{"epoch", e.epoch}, {"ttt_loss", e.ttt_loss}, {"score", e.score}};
    if (e.margin) row["margin"] = *e.margin;
    if (e.auroc) row["auroc"] = *e.auroc;
    if (e.auprc) row["auprc"] = *e.auprc;
    epochs.push_back(row);
  }
  json scores = json::array();
  for (const AdaptationEpoch& e : t.epochs) scores.push_back(e.score);
  json j = {{"epochs", epochs},         {"scores", scores},
            {"chosen_epoch", t.chosen_epoch}, {"best_score", t.best_score},
            {"stop_reason", t.stop_reason},   {"homogeneous_dims", t.homogeneous_dims},
            {"init_from_source", t.init_from_source}, {"lr", t.lr}};
  if (t.initial_margin) j["initial_margin"] = *t.initial_margin;
  if (t.initial_auroc) j["initial_auroc"] = *t.initial_auroc;
  return j;
}

double separation_margin(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain) {
  if (!graph.labels) throw DataError("separation margin needs labels");
  const AffinityScores a = affinity_scores(embed(bundle, graph, domain).embeddings, graph);
  double sn = 0.0, sa = 0.0;
  std::size_t cn = 0, ca = 0;
  for (std::size_t v = 0; v < graph.num_nodes; ++v) {
    if (!a.valid[v]) continue;
    if ((*graph.labels)[v]) {
      sa += a.scores[v];
      ++ca;
    } else {
      sn += a.scores[v];
      ++cn;
    }
  }
  if (cn == 0 || ca == 0) throw DataError("separation margin needs non-isolated nodes of both classes");
  return sn / static_cast<double>(cn) - sa / static_cast<double>(ca);
}

AdaptResult adapt_target(const ModelBundle& bundle, const ClassCentroids& centroids, const AttributedGraph& target_in,
                         const RunConfig& config, Rng& rng, const AdaptOptions& options) {
  validate(config);
  check_consistent(bundle);
  if (centroids.normal.empty() || centroids.anomaly.empty()) throw UsageError("adapt_target: centroids missing");
  if (centroids.normal.cols != bundle.embedding_dim()) throw UsageError("adapt_target: centroid dim differs from embedding dim");
  if (options.eval_labels && !target_in.labels) throw DataError("adapt_target: evaluation labels requested but target has none");

  Rng init_rng = rng.fork(kTargetInitStream);
  Rng dropout_rng = rng.fork(kDropoutStream);
  Rng sample_rng = rng.fork(kSampleStream);

  AdaptResult out;
  out.bundle = bundle;
  ModelBundle& b = out.bundle;
  const std::size_t p = bundle.source_encoder.output_dim;
  const bool same_dims = target_in.feature_dim() == bundle.source_encoder.input_dim;
  if (config.identity_encoder || bundle.source_encoder.identity) {
    b.target_encoder = init_encoder(Domain::Target, target_in.feature_dim(), p, true, init_rng);
  } else if (config.target_init == TargetInit::FromSource) {
    if (!same_dims)
      throw UsageError("adapt_target: target_init=from_source needs equal feature dims (source " +
                       std::to_string(bundle.source_encoder.input_dim) + ", target " +
                       std::to_string(target_in.feature_dim()) + ")");
    b.target_encoder = bundle.source_encoder;
    b.target_encoder->domain = Domain::Target;
  } else {
    b.target_encoder = init_encoder(Domain::Target, target_in.feature_dim(), p, false, init_rng);
  }

  AdaptationTrace& trace = out.trace;
  trace.homogeneous_dims = same_dims;
  trace.init_from_source = config.target_init == TargetInit::FromSource && !b.target_encoder->identity;
  trace.lr = config.lr;

  const AttributedGraph target = cap_neighbors(target_in, config.neighbor_cap, config.seed);
  const GraphTopology topo(target);
  auto evaluate = [&](AdaptationEpoch* row) {
    const Matrix h = embed(b, target, topo, Domain::Target).embeddings;
    const double score = early_stop_score(h, centroids);
    std::optional<double> margin, roc, prc;
    if (options.eval_labels) {
      const AffinityScores a = affinity_scores(h, target);
      std::vector<double> anomaly_score(a.scores.size());
      double sn = 0.0, sa = 0.0;
      std::size_t cn = 0, ca = 0;
      for (std::size_t v = 0; v < a.scores.size(); ++v) {
        anomaly_score[v] = a.valid[v] ? -a.scores[v] : 0.0;
        if (!a.valid[v]) continue;
        if ((*target.labels)[v]) {
          sa += a.scores[v];
          ++ca;
        } else {
          sn += a.scores[v];
          ++cn;
        }
      }
      if (cn > 0 && ca > 0) margin = sn / static_cast<double>(cn) - sa / static_cast<double>(ca);
      const auto& y = *target.labels;
      const auto pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
      if (pos > 0 && pos < y.size()) {
        roc = auroc(anomaly_score, y);
        prc = auprc(anomaly_score, y);
      }
    }
    if (row) {
      row->score = score;
      row->margin = margin;
      row->auroc = roc;
      row->auprc = prc;
    } else {
      trace.initial_margin = margin;
      trace.initial_auroc = roc;
    }
    return score;
  };

  evaluate(nullptr);
  if (config.ttt_max_epochs == 0) {
    trace.stop_reason = "no_epochs";
    return out;
  }

  Adam adam(AdamOptions{config.lr});
  EarlyStopper stopper(config.patience);
  ProjectionEncoder best_encoder = *b.target_encoder;
  const ForwardOptions train_mode{true, config.dropout_rate, &dropout_rng};
  trace.stop_reason = "max_epochs";
  for (std::size_t epoch = 1; epoch <= config.ttt_max_epochs; ++epoch) {
    ad::Tape tape;
    // Decoder gradients are computed but never applied; predictor is off the path.
    BundleVars vars = bind(tape, b, Domain::Target, {true, true, false});
    ForwardResult fr = forward_embeddings(vars, b, tape.constant(target.features), topo, train_mode);
    ad::Var loss = ttt_loss(fr.embeddings, target, topo, config.weights.lambda_reg, sample_rng, config.weights.neg_samples_k);
    tape.backward(loss);
    if (vars.encoder) {
      Matrix* param = &b.target_encoder->weight;
      const Matrix grad = tape.grad(*vars.encoder);
      adam.step(std::span<Matrix* const>(&param, 1), std::span<const Matrix>(&grad, 1));
    }

    AdaptationEpoch row;
    row.epoch = epoch;
    row.ttt_loss = loss.scalar();
    evaluate(&row);
    trace.epochs.push_back(row);
    const bool stop = stopper.update(row.score);
    if (stopper.improved_last()) best_encoder = *b.target_encoder;
    if (stop) {
      trace.stop_reason = "patience";
      break;
    }
  }
  trace.chosen_epoch = stopper.best_epoch();
  trace.best_score = stopper.best_score();
  b.target_encoder = best_encoder;
  return out;
}

ClassGradients class_gradients(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain,
                               double dropout_rate, std::uint64_t seed, std::size_t draws) {
  if (!graph.labels) throw DataError("class_gradients needs labels");
  if (bundle.encoder(domain).identity) throw UsageError("class_gradients: identity encoder has no parameters");
  if (dropout_rate <= 0.0) draws = 1;
  if (draws == 0) throw UsageError("class_gradients: draws must be >= 1");
  const GraphTopology topo(graph);
  auto grad_for = [&](std::uint8_t cls) {
    Matrix select(graph.num_nodes, 1);
    std::size_t count = 0;
    for (std::size_t v = 0; v < graph.num_nodes; ++v)
      if ((*graph.labels)[v] == cls && topo.offsets[v + 1] > topo.offsets[v]) {
        select(v, 0) = 1.0;
        ++count;
      }
    if (count == 0) throw DataError("class_gradients: a class has no non-isolated nodes");
    // Same mask sequence for both classes.
    Rng rng(seed);
    Matrix total;
    for (std::size_t d = 0; d < draws; ++d) {
      ad::Tape tape;
      BundleVars vars = bind(tape, bundle, domain, {true, false, false});
      const ForwardOptions mode{dropout_rate > 0.0, dropout_rate, &rng};
      ForwardResult fr = forward_embeddings(vars, bundle, tape.constant(graph.features), topo, mode);
      AffinityVars a = affinity_scores(fr.embeddings, topo);
      ad::Var mean_cls = ad::scalar_mul(ad::sum(ad::mul_const(a.scores, select)), 1.0 / static_cast<double>(count));
      tape.backward(mean_cls);
      const Matrix g = tape.grad(*vars.encoder);
      if (total.empty()) total = Matrix(g.rows, g.cols);
      for (std::size_t i = 0; i < g.size(); ++i) total.data[i] += g.data[i] / static_cast<double>(draws);
    }
    return total;
  };
  const Matrix gn = grad_for(0);
  const Matrix ga = grad_for(1);
  double nn = 0.0, aa = 0.0, na = 0.0;
  for (std::size_t i = 0; i < gn.size(); ++i) {
    nn += gn.data[i] * gn.data[i];
    aa += ga.data[i] * ga.data[i];
    na += gn.data[i] * ga.data[i];
  }
  ClassGradients c;
  c.norm_normal = std::sqrt(nn);
  c.norm_anomaly = std::sqrt(aa);
  c.cosine = (nn > 0.0 && aa > 0.0) ? na / (c.norm_normal * c.norm_anomaly) : 0.0;
  return c;
}

MarginReport margin_trace_check(const AdaptationTrace& trace, std::size_t max_steps) {
  if (!trace.initial_margin) throw DataError("margin_trace_check: trace has no margin data (run with evaluation labels)");
  std::vector<double> m{*trace.initial_margin};
  for (const AdaptationEpoch& e : trace.epochs) {
    if (!e.margin) throw DataError("margin_trace_check: epoch " + std::to_string(e.epoch) + " lacks a margin");
    m.push_back(*e.margin);
  }
  MarginReport r;
  r.steps = m.size() - 1;
  if (max_steps > 0) r.steps = std::min(r.steps, max_steps);
  for (std::size_t k = 0; k < r.steps; ++k) r.increasing_steps += m[k + 1] > m[k];
  r.fraction_increasing = r.steps ? static_cast<double>(r.increasing_steps) / static_cast<double>(r.steps) : 0.0;
  r.initial_margin = m.front();
  r.final_margin = m[r.steps];
  r.homogeneous_dims = trace.homogeneous_dims;
  r.init_from_source = trace.init_from_source;
  r.small_lr = trace.lr > 0.0 && trace.lr <= kSmallLearningRate;
  r.preconditions_met = r.homogeneous_dims && r.init_from_source && r.small_lr;
  return r;
}

json to_json(const MarginReport& r) {
  return {{"steps", r.steps},
          {"increasing_steps", r.increasing_steps},
          {"fraction_increasing", r.fraction_increasing},
          {"initial_margin", r.initial_margin},
          {"final_margin", r.final_margin},
          {"preconditions", {{"homogeneous_dims", r.homogeneous_dims}, {"init_from_source", r.init_from_source}, {"small_lr", r.small_lr}}},
          {"preconditions_met", r.preconditions_met}};
}

namespace {

struct NamedTensor {
  std::string name;
  const Matrix* value;
};

std::vector<NamedTensor> tensor_table(const Checkpoint& c) {
  std::vector<NamedTensor> t;
  const ModelBundle& b = c.bundle;
  if (!b.source_encoder.identity) t.push_back({"source_encoder.weight", &b.source_encoder.weight});
  if (b.target_encoder && !b.target_encoder->identity) t.push_back({"target_encoder.weight", &b.target_encoder->weight});
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    t.push_back({p + "weight", &b.layers[l].weight});
    t.push_back({p + "bias", &b.layers[l].bias});
    t.push_back({p + "attention", &b.layers[l].attention});
  }
  t.push_back({"predictor.hidden_weight", &b.predictor.hidden_weight});
  t.push_back({"predictor.hidden_bias", &b.predictor.hidden_bias});
  t.push_back({"predictor.output_weight", &b.predictor.output_weight});
  t.push_back({"predictor.output_bias", &b.predictor.output_bias});
  t.push_back({"centroids.normal", &c.centroids.normal});
  t.push_back({"centroids.anomaly", &c.centroids.anomaly});
  return t;
}

json encoder_meta(const ProjectionEncoder& e) {
  return {{"identity", e.identity}, {"input_dim", e.input_dim}, {"output_dim", e.output_dim}};
}

ProjectionEncoder encoder_from_meta(const json& j, Domain d) {
  ProjectionEncoder e;
  e.domain = d;
  e.identity = j.at("identity").get<bool>();
  e.input_dim = j.at("input_dim").get<std::size_t>();
  e.output_dim = j.at("output_dim").get<std::size_t>();
  return e;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  check_consistent(ckpt.bundle);
  json tensors = json::array();
  std::string payload;
  for (const NamedTensor& t : tensor_table(ckpt)) {
    tensors.push_back({{"name", t.name}, {"rows", t.value->rows}, {"cols", t.value->cols}, {"byte_offset", payload.size()}});
    for (double v : t.value->data) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  json encoders = {{"source", encoder_meta(ckpt.bundle.source_encoder)}};
  if (ckpt.bundle.target_encoder) encoders["target"] = encoder_meta(*ckpt.bundle.target_encoder);
  json header = {{"version", kCheckpointVersion},
                 {"config", to_json(ckpt.config)},
                 {"nsaw_enabled", ckpt.bundle.nsaw_enabled},
                 {"encoders", encoders},
                 {"num_layers", ckpt.bundle.layers.size()},
                 {"tensors", tensors}};

  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    const std::string head = header.dump() + "\n";
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint: " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw DataError("corrupt checkpoint: no header line");
  json header;
  try {
    header = json::parse(bytes.substr(0, nl));
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const std::string_view payload = std::string_view(bytes).substr(nl + 1);

  Checkpoint c;
  try {
    const int version = header.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw DataError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
    c.config = config_from_json(header.at("config"));
    c.bundle.nsaw_enabled = header.at("nsaw_enabled").get<bool>();
    const json& enc = header.at("encoders");
    c.bundle.source_encoder = encoder_from_meta(enc.at("source"), Domain::Source);
    if (enc.contains("target")) c.bundle.target_encoder = encoder_from_meta(enc.at("target"), Domain::Target);
    c.bundle.layers.resize(header.at("num_layers").get<std::size_t>());

    std::set<std::string> expected;
    for (const NamedTensor& t : tensor_table(c)) expected.insert(t.name);
    std::set<std::string> seen;
    for (const json& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      const auto offset = t.at("byte_offset").get<std::size_t>();
      if (!expected.contains(name)) throw DataError("checkpoint: unexpected tensor '" + name + "'");
      if (offset > payload.size() || rows * cols * 8 > payload.size() - offset)
        throw DataError("corrupt tensor block: '" + name + "' extends past end of file");
      Matrix m(rows, cols);
      for (std::size_t i = 0; i < rows * cols; ++i) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b)
          bits = (bits << 8) | static_cast<unsigned char>(payload[offset + 8 * i + static_cast<std::size_t>(b)]);
        m.data[i] = std::bit_cast<double>(bits);
      }
      Matrix* slot = nullptr;
      ModelBundle& b = c.bundle;
      if (name == "source_encoder.weight") slot = &b.source_encoder.weight;
      else if (name == "target_encoder.weight") slot = &b.target_encoder->weight;
      else if (name == "predictor.hidden_weight") slot = &b.predictor.hidden_weight;
      else if (name == "predictor.hidden_bias") slot = &b.predictor.hidden_bias;
      else if (name == "predictor.output_weight") slot = &b.predictor.output_weight;
      else if (name == "predictor.output_bias") slot = &b.predictor.output_bias;
      else if (name == "centroids.normal") slot = &c.centroids.normal;
      else if (name == "centroids.anomaly") slot = &c.centroids.anomaly;
      else {
        // layers.<l>.<field>
        const auto dot1 = name.find('.');
        const auto dot2 = name.find('.', dot1 + 1);
        const std::size_t l = std::stoul(name.substr(dot1 + 1, dot2 - dot1 - 1));
        const std::string field = name.substr(dot2 + 1);
        NsawLayer& layer = b.layers.at(l);
        slot = field == "weight" ? &layer.weight : field == "bias" ? &layer.bias : &layer.attention;
      }
      *slot = std::move(m);
      seen.insert(name);
    }
    if (seen != expected) throw DataError("corrupt checkpoint: tensor set incomplete");
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  check_consistent(c.bundle);
  return c;
}

void require_aggregation_mode(const Checkpoint& ckpt, bool nsaw_enabled) {
  if (ckpt.bundle.nsaw_enabled != nsaw_enabled)
    throw UsageError(std::string("checkpoint was trained with nsaw_enabled=") + (ckpt.bundle.nsaw_enabled ? "true" : "false") +
                     "; refusing to run it with nsaw_enabled=" + (nsaw_enabled ? "true" : "false"));
}

}  // namespace gadt3
