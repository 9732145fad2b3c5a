#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "gadt3/autodiff.hpp"
#include "gadt3/graph.hpp"
#include "gadt3/matrix.hpp"
#include "gadt3/rng.hpp"

namespace gadt3 {

enum class Domain { Source, Target };
enum class AggregationMode { Nsaw, Plain };

std::string to_string(Domain d);

// Linear map from a domain's raw features into the shared space. Stored as
// [output_dim x input_dim]; an identity encoder has no weights and requires
// input_dim == output_dim.
struct ProjectionEncoder {
  Domain domain = Domain::Source;
  bool identity = false;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Matrix weight;

  bool operator==(const ProjectionEncoder&) const = default;
};

// One attention-weighted message-passing layer:
//   weight    [out x 2·in]   applied to [message ‖ self]
//   bias      [1 x out]
//   attention [in x attn]    U in relu(H·U)
struct NsawLayer {
  Matrix weight;
  Matrix bias;
  Matrix attention;

  std::size_t in_dim() const { return attention.rows; }
  std::size_t out_dim() const { return weight.rows; }
  bool operator==(const NsawLayer&) const = default;
};

// relu(H·W1ᵀ + b1)·W2ᵀ + b2 -> sigmoid
struct PredictorHead {
  Matrix hidden_weight;  // [hidden x in]
  Matrix hidden_bias;    // [1 x hidden]
  Matrix output_weight;  // [1 x hidden]
  Matrix output_bias;    // [1 x 1]

  bool operator==(const PredictorHead&) const = default;
};

struct ModelBundle {
  ProjectionEncoder source_encoder;
  std::optional<ProjectionEncoder> target_encoder;
  std::vector<NsawLayer> layers;
  PredictorHead predictor;
  bool nsaw_enabled = true;

  std::size_t embedding_dim() const { return layers.empty() ? source_encoder.output_dim : layers.back().out_dim(); }
  const ProjectionEncoder& encoder(Domain d) const;
  bool operator==(const ModelBundle&) const = default;
};

struct ModelDims {
  std::size_t shared_dim = 40;
  std::size_t hidden_dim = 40;
  std::size_t attn_dim = 40;
  std::size_t num_layers = 2;
  std::size_t predictor_hidden = 40;
};

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases zero.
Matrix glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng);

ProjectionEncoder init_encoder(Domain domain, std::size_t input_dim, std::size_t output_dim, bool identity, Rng& rng);

// Draw order: source encoder, then each layer's weight and attention, then
// the predictor. Part of the determinism contract.
ModelBundle init_bundle(const ModelDims& dims, std::size_t source_feature_dim, bool identity_encoder, bool nsaw_enabled,
                        Rng& rng);

void check_consistent(const ModelBundle& bundle);

// Index arrays over a graph's CSR entries, built once per graph.
struct GraphTopology {
  std::size_t num_nodes = 0;
  ad::Offsets offsets;
  ad::Index rows;     // source node of each entry
  ad::Index cols;     // neighbor of each entry
  ad::Index reverse;  // entry (v,u) for entry (u,v)

  explicit GraphTopology(const AttributedGraph& g);
  std::size_t num_entries() const { return cols.size(); }
};

// Bundle parameters placed on a tape.
struct LayerVars {
  ad::Var weight, bias, attention;
};

struct BundleVars {
  std::optional<ad::Var> encoder;  // absent for identity encoders
  std::vector<LayerVars> layers;
  ad::Var hidden_weight, hidden_bias, output_weight, output_bias;
};

struct TrainableParts {
  bool encoder = true;
  bool decoder = true;
  bool predictor = true;
};

BundleVars bind(ad::Tape& tape, const ModelBundle& bundle, Domain domain, TrainableParts trainable);

struct ForwardOptions {
  bool training = false;
  double dropout_rate = 0.0;
  Rng* rng = nullptr;  // required when training with dropout_rate > 0
};

// h0 = P·x for every row of features.
ad::Var project(const std::optional<ad::Var>& encoder, ad::Var features);

// Z = relu(H·U); per CSR entry (i,j) the score <Z_i, Z_j>, softmaxed over
// each row's neighbors. Isolated rows are empty.
ad::Var compute_attention(ad::Var h, ad::Var attention, const GraphTopology& topo);

// Ã[i,j] = Ã[j,i] = min(A[i,j], A[j,i]); no renormalization.
ad::Var symmetrize_attention(ad::Var a, const GraphTopology& topo);

// nsaw:  m_v = Σ_u Ã[u,v]·H_u      plain: m_v = mean_u H_u
// then relu(W·[m_v ‖ H_v] + b). Isolated nodes get m_v = 0.
ad::Var nsaw_layer_forward(const LayerVars& layer, ad::Var h, const std::optional<ad::Var>& sym_attention,
                           const GraphTopology& topo, AggregationMode mode);

struct ForwardResult {
  ad::Var embeddings;
  std::vector<ad::Var> raw_attention;        // per layer, before the min
  std::vector<ad::Var> symmetric_attention;  // per layer
};

// H^0 = project(features); per layer: dropout (training), attention from the
// layer input (nsaw only), symmetrize, aggregate.
ForwardResult forward_embeddings(const BundleVars& vars, const ModelBundle& bundle, ad::Var features,
                                 const GraphTopology& topo, const ForwardOptions& options);

ad::Var predict(const BundleVars& vars, ad::Var embeddings);

// Tape-free conveniences over the same code path.
struct AttentionMatrices {
  // Values per CSR entry, one vector per layer. Empty when nsaw is off.
  std::vector<std::vector<double>> raw;
  std::vector<std::vector<double>> symmetric;
};

struct Embedding {
  Matrix embeddings;
  AttentionMatrices attention;
};

Embedding embed(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain,
                const ForwardOptions& options = {});
Embedding embed(const ModelBundle& bundle, const AttributedGraph& graph, const GraphTopology& topo, Domain domain,
                const ForwardOptions& options = {});
Matrix predict_probabilities(const ModelBundle& bundle, const Matrix& embeddings);

}  // namespace gadt3
