#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gadt3/eval.hpp"
#include "gadt3/graph.hpp"
#include "gadt3/losses.hpp"
#include "gadt3/model.hpp"
#include "gadt3/rng.hpp"

namespace gadt3 {

enum class TargetInit {
  Fresh,       // new random encoder
  FromSource,  // copy of the trained source encoder; needs equal feature dims
};

struct RunConfig {
  ModelDims dims;
  LossWeights weights;
  double lr = 1e-3;
  std::size_t source_epochs = 100;
  std::size_t ttt_max_epochs = 100;
  std::size_t patience = 10;
  double dropout_rate = 0.7;
  std::uint64_t seed = 0;
  bool nsaw_enabled = true;
  ScoringMode scoring_mode = ScoringMode::Affinity;
  bool identity_encoder = false;
  TargetInit target_init = TargetInit::Fresh;
  std::size_t neighbor_cap = 0;  // 0 = full neighborhoods

  bool operator==(const RunConfig&) const;
};

void validate(const RunConfig& config);

// Flat JSON object; every field optional on input, unknown keys rejected.
nlohmann::json to_json(const RunConfig& config);
RunConfig config_from_json(const nlohmann::json& j);
// Applies the keys present in `j` on top of `base`.
void merge_config(RunConfig& base, const nlohmann::json& j);
// Names accepted by config_from_json.
const std::vector<std::string>& config_keys();

struct ClassCentroids {
  Matrix normal;   // 1 x embedding_dim
  Matrix anomaly;  // 1 x embedding_dim

  bool operator==(const ClassCentroids&) const = default;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double supervised_loss = 0.0;
  double self_supervised_loss = 0.0;
  double source_auroc = 0.0;
};

struct SourceTrainingResult {
  ModelBundle bundle;
  ClassCentroids centroids;
  std::vector<EpochLog> log;
};

nlohmann::json to_json(const std::vector<EpochLog>& log);

// Full-batch Adam on the training loss for config.source_epochs epochs, then
// per-class means of eval-mode final embeddings. Deterministic in (graph,
// config, rng state).
SourceTrainingResult train_source(const AttributedGraph& source, const RunConfig& config, Rng& rng);

ClassCentroids compute_centroids(const Matrix& embeddings, const std::vector<std::uint8_t>& labels);

inline constexpr double kDistanceFloor = 1e-12;

// Mean over target nodes of max(d_n, d_a) / min(d_n, d_a), where d_n, d_a are
// Euclidean distances to the normal and anomaly centroids (min floored at
// kDistanceFloor).
double early_stop_score(const Matrix& embeddings, const ClassCentroids& centroids);

// Patience rule on a maximized score: stop once `patience` consecutive
// epochs fail to beat the best score so far. Epochs are 1-based.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience);

  // Records the next epoch's score; returns true when training should stop.
  bool update(double score);

  std::size_t best_epoch() const { return best_epoch_; }
  double best_score() const { return best_score_; }
  std::size_t epochs_seen() const { return epochs_; }
  bool improved_last() const { return stale_ == 0 && epochs_ > 0; }

 private:
  std::size_t patience_;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_score_ = 0.0;
};

struct AdaptationEpoch {
  std::size_t epoch = 0;
  double ttt_loss = 0.0;
  double score = 0.0;
  std::optional<double> margin;
  std::optional<double> auroc;
  std::optional<double> auprc;
};

struct AdaptationTrace {
  std::vector<AdaptationEpoch> epochs;
  std::optional<double> initial_margin;
  std::optional<double> initial_auroc;
  std::size_t chosen_epoch = 0;  // 0: no epoch ran, initial encoder kept
  double best_score = 0.0;
  std::string stop_reason;  // "patience" | "max_epochs" | "no_epochs"
  // Checkable preconditions of the margin-monotonicity argument.
  bool homogeneous_dims = false;
  bool init_from_source = false;
  double lr = 0.0;
};

nlohmann::json to_json(const AdaptationTrace& trace);

struct AdaptOptions {
  // Record the separation margin and AUROC/AUPRC per epoch from the target's
  // labels. The labels never touch the optimization.
  bool eval_labels = false;
};

struct AdaptResult {
  ModelBundle bundle;
  AdaptationTrace trace;
};

// Test-time training: a target encoder is initialized per config.target_init
// and optimized on the self-supervised loss with decoder and predictor
// frozen. After each epoch the eval-mode early-stop score is recorded; the
// encoder from the best-scoring epoch is returned.
AdaptResult adapt_target(const ModelBundle& bundle, const ClassCentroids& centroids, const AttributedGraph& target,
                         const RunConfig& config, Rng& rng, const AdaptOptions& options = {});

// Separation margin: mean affinity of normal nodes minus mean over anomalies
// (non-isolated nodes only).
double separation_margin(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain);

// Norms of the gradients of mean normal and mean anomalous affinity with
// respect to the domain's encoder weights. The margin argument assumes the
// normal-class gradient dominates. With dropout_rate > 0 the gradients are
// averaged over `draws` dropout masks, matching the mode TTT steps run in.
struct ClassGradients {
  double norm_normal = 0.0;
  double norm_anomaly = 0.0;
  double cosine = 0.0;  // between the two gradients
  bool normal_dominates() const { return norm_normal > norm_anomaly; }
};

ClassGradients class_gradients(const ModelBundle& bundle, const AttributedGraph& graph, Domain domain,
                               double dropout_rate = 0.0, std::uint64_t seed = 0, std::size_t draws = 8);

struct MarginReport {
  std::size_t steps = 0;
  std::size_t increasing_steps = 0;
  double fraction_increasing = 0.0;
  double initial_margin = 0.0;
  double final_margin = 0.0;
  bool homogeneous_dims = false;
  bool init_from_source = false;
  bool small_lr = false;
  bool preconditions_met = false;
};

inline constexpr double kSmallLearningRate = 1e-2;

// Looks at the first `max_steps` TTT steps (all when 0).
MarginReport margin_trace_check(const AdaptationTrace& trace, std::size_t max_steps = 0);
nlohmann::json to_json(const MarginReport& r);

struct Checkpoint {
  ModelBundle bundle;
  ClassCentroids centroids;
  RunConfig config;
};

inline constexpr int kCheckpointVersion = 1;

// One JSON header line, then row-major float64 LE payloads at the listed
// offsets (relative to the first byte after the header). Written to a temp
// file and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Refuses to run a checkpoint in a different aggregation mode than it was
// trained with.
void require_aggregation_mode(const Checkpoint& ckpt, bool nsaw_enabled);

}  // namespace gadt3
