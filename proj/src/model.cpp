#include "gadt3/model.hpp"

#include <cmath>

#include "gadt3/error.hpp"

namespace gadt3 {

std::string to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }

const ProjectionEncoder& ModelBundle::encoder(Domain d) const {
  if (d == Domain::Source) return source_encoder;
  if (!target_encoder) throw UsageError("model: no target encoder in bundle");
  return *target_encoder;
}

Matrix glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.uniform(-a, a);
  return m;
}

ProjectionEncoder init_encoder(Domain domain, std::size_t input_dim, std::size_t output_dim, bool identity, Rng& rng) {
  if (identity && input_dim != output_dim)
    throw UsageError("identity encoder needs feature_dim == shared_dim (" + std::to_string(input_dim) + " vs " +
                     std::to_string(output_dim) + ")");
  ProjectionEncoder enc;
  enc.domain = domain;
  enc.identity = identity;
  enc.input_dim = input_dim;
  enc.output_dim = output_dim;
  if (!identity) enc.weight = glorot_uniform(output_dim, input_dim, rng);
  return enc;
}

ModelBundle init_bundle(const ModelDims& dims, std::size_t source_feature_dim, bool identity_encoder, bool nsaw_enabled,
                        Rng& rng) {
  if (dims.num_layers == 0) throw UsageError("model: at least one layer required");
  if (dims.shared_dim == 0 || dims.hidden_dim == 0 || dims.attn_dim == 0 || dims.predictor_hidden == 0)
    throw UsageError("model: dimensions must be positive");
  ModelBundle b;
  b.nsaw_enabled = nsaw_enabled;
  b.source_encoder = init_encoder(Domain::Source, source_feature_dim, dims.shared_dim, identity_encoder, rng);
  std::size_t in = dims.shared_dim;
  for (std::size_t l = 0; l < dims.num_layers; ++l) {
    NsawLayer layer;
    layer.weight = glorot_uniform(dims.hidden_dim, 2 * in, rng);
    layer.bias = Matrix(1, dims.hidden_dim);
    layer.attention = glorot_uniform(in, dims.attn_dim, rng);
    b.layers.push_back(std::move(layer));
    in = dims.hidden_dim;
  }
  b.predictor.hidden_weight = glorot_uniform(dims.predictor_hidden, in, rng);
  b.predictor.hidden_bias = Matrix(1, dims.predictor_hidden);
  b.predictor.output_weight = glorot_uniform(1, dims.predictor_hidden, rng);
  b.predictor.output_bias = Matrix(1, 1);
  return b;
}

void check_consistent(const ModelBundle& b) {
  auto check_encoder = [](const ProjectionEncoder& e) {
    if (e.identity) {
      if (e.input_dim != e.output_dim || !e.weight.empty()) throw DataError("model: malformed identity encoder");
    } else if (e.weight.rows != e.output_dim || e.weight.cols != e.input_dim) {
      throw DataError("model: encoder weight shape " + e.weight.shape_string() + " inconsistent with dims");
    }
  };
  check_encoder(b.source_encoder);
  if (b.target_encoder) {
    check_encoder(*b.target_encoder);
    if (b.target_encoder->output_dim != b.source_encoder.output_dim)
      throw DataError("model: source and target encoders disagree on shared dim");
  }
  if (b.layers.empty()) throw DataError("model: no layers");
  std::size_t in = b.source_encoder.output_dim;
  for (const NsawLayer& l : b.layers) {
    if (l.attention.rows != in || l.weight.cols != 2 * in || l.bias.rows != 1 || l.bias.cols != l.weight.rows)
      throw DataError("model: layer shapes inconsistent");
    in = l.weight.rows;
  }
  const PredictorHead& p = b.predictor;
  if (p.hidden_weight.cols != in || p.hidden_bias.cols != p.hidden_weight.rows || p.output_weight.rows != 1 ||
      p.output_weight.cols != p.hidden_weight.rows || p.output_bias.rows != 1 || p.output_bias.cols != 1)
    throw DataError("model: predictor shapes inconsistent");
}

GraphTopology::GraphTopology(const AttributedGraph& g) : num_nodes(g.num_nodes) {
  offsets.assign(g.row_offsets.begin(), g.row_offsets.end());
  rows = edge_rows(g);
  cols.assign(g.col_indices.begin(), g.col_indices.end());
  reverse = reverse_edge_index(g);
}

BundleVars bind(ad::Tape& tape, const ModelBundle& bundle, Domain domain, TrainableParts trainable) {
  BundleVars v;
  const ProjectionEncoder& enc = bundle.encoder(domain);
  if (!enc.identity) v.encoder = tape.leaf(enc.weight, trainable.encoder);
  for (const NsawLayer& l : bundle.layers)
    v.layers.push_back({tape.leaf(l.weight, trainable.decoder), tape.leaf(l.bias, trainable.decoder),
                        tape.leaf(l.attention, trainable.decoder)});
  const PredictorHead& p = bundle.predictor;
  v.hidden_weight = tape.leaf(p.hidden_weight, trainable.predictor);
  v.hidden_bias = tape.leaf(p.hidden_bias, trainable.predictor);
  v.output_weight = tape.leaf(p.output_weight, trainable.predictor);
  v.output_bias = tape.leaf(p.output_bias, trainable.predictor);
  return v;
}

ad::Var project(const std::optional<ad::Var>& encoder, ad::Var features) {
  if (!encoder) return features;
  if (encoder->cols() != features.cols())
    throw UsageError("project: encoder expects " + std::to_string(encoder->cols()) + " features, got " +
                     std::to_string(features.cols()));
  return ad::matmul_nt(features, *encoder);
}

ad::Var compute_attention(ad::Var h, ad::Var attention, const GraphTopology& topo) {
  if (h.rows() != topo.num_nodes) throw UsageError("compute_attention: embedding rows differ from node count");
  if (h.cols() != attention.rows()) throw UsageError("compute_attention: embedding dim differs from attention input dim");
  ad::Var z = ad::relu(ad::matmul(h, attention));
  ad::Var scores = ad::row_sum(ad::mul(ad::gather_rows(z, topo.rows), ad::gather_rows(z, topo.cols)));
  return ad::segment_softmax(scores, topo.offsets);
}

ad::Var symmetrize_attention(ad::Var a, const GraphTopology& topo) { return ad::pair_min(a, topo.reverse); }

ad::Var nsaw_layer_forward(const LayerVars& layer, ad::Var h, const std::optional<ad::Var>& sym_attention,
                           const GraphTopology& topo, AggregationMode mode) {
  if (h.rows() != topo.num_nodes) throw UsageError("layer: embedding rows differ from node count");
  if (2 * h.cols() != layer.weight.cols()) throw UsageError("layer: input dim inconsistent with weight shape");
  if ((mode == AggregationMode::Nsaw) != sym_attention.has_value())
    throw UsageError("layer: attention must be supplied exactly in nsaw mode");
  ad::Var neighbors = ad::gather_rows(h, topo.cols);
  ad::Var message = mode == AggregationMode::Nsaw
                        ? ad::segment_sum(ad::scale_rows(neighbors, *sym_attention), topo.offsets)
                        : ad::segment_mean(neighbors, topo.offsets);
  ad::Var pre = ad::add_row(ad::matmul_nt(ad::concat_cols(message, h), layer.weight), layer.bias);
  return ad::relu(pre);
}

ForwardResult forward_embeddings(const BundleVars& vars, const ModelBundle& bundle, ad::Var features,
                                 const GraphTopology& topo, const ForwardOptions& options) {
  if (options.training && options.dropout_rate > 0.0 && options.rng == nullptr)
    throw UsageError("forward: training with dropout needs an rng");
  ForwardResult out;
  ad::Var h = project(vars.encoder, features);
  if (!vars.encoder && h.cols() != bundle.source_encoder.output_dim)
    throw UsageError("forward: identity encoder input dim differs from shared dim");
  for (const LayerVars& layer : vars.layers) {
    Rng dummy;
    h = ad::dropout(h, options.dropout_rate, options.rng ? *options.rng : dummy, options.training);
    if (bundle.nsaw_enabled) {
      ad::Var raw = compute_attention(h, layer.attention, topo);
      ad::Var sym = symmetrize_attention(raw, topo);
      out.raw_attention.push_back(raw);
      out.symmetric_attention.push_back(sym);
      h = nsaw_layer_forward(layer, h, sym, topo, AggregationMode::Nsaw);
    } else {
      h = nsaw_layer_forward(layer, h, std::nullopt, topo, AggregationMode::Plain);
    }
  }
  out.embeddings = h;
  return out;
}

ad::Var predict(const BundleVars& vars, ad::Var embeddings) {
  if (embeddings.cols() != vars.hidden_weight.cols()) throw UsageError("predict: embedding dim differs from predictor input");
  ad::Var hidden = ad::relu(ad::add_row(ad::matmul_nt(embeddings, vars.hidden_weight), vars.hidden_bias));
  ad::Var logit = ad::add_row(ad::matmul_nt(hidden, vars.output_weight), vars.output_bias);
  return ad::sigmoid(logit);
}

Embedding embed(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain, const ForwardOptions& options) {
  return embed(bundle, graph, GraphTopology(graph), domain, options);
}

Embedding embed(const ModelBundle& bundle, const AttributedGraph& graph, const GraphTopology& topo, Domain domain,
                const ForwardOptions& options) {
  const ProjectionEncoder& enc = bundle.encoder(domain);
  if (enc.input_dim != graph.feature_dim())
    throw UsageError(to_string(domain) + " encoder expects " + std::to_string(enc.input_dim) + " features, graph has " +
                     std::to_string(graph.feature_dim()));
  ad::Tape tape;
  BundleVars vars = bind(tape, bundle, domain, {false, false, false});
  ForwardResult fr = forward_embeddings(vars, bundle, tape.constant(graph.features), topo, options);
  Embedding out;
  out.embeddings = fr.embeddings.value();
  for (std::size_t l = 0; l < fr.raw_attention.size(); ++l) {
    out.attention.raw.push_back(fr.raw_attention[l].value().data);
    out.attention.symmetric.push_back(fr.symmetric_attention[l].value().data);
  }
  return out;
}

Matrix predict_probabilities(const ModelBundle& bundle, const Matrix& embeddings) {
  ad::Tape tape;
  BundleVars vars = bind(tape, bundle, Domain::Source, {false, false, false});
  return predict(vars, tape.constant(embeddings)).value();
}

}  // namespace gadt3
