#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "gadt3/autodiff.hpp"
#include "gadt3/graph.hpp"
#include "gadt3/pipeline.hpp"

namespace gadt3 {

// Seed i of an experiment uses base_seed + i; source and target graphs draw
// from separate streams of that seed.
std::uint64_t experiment_seed(std::uint64_t base_seed, std::size_t index);
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t salt);

// Column permutation plus per-column scale in [0.5, 2], drawn from `seed`.
// Used to make a target domain whose raw features differ from the source.
AttributedGraph transform_features(const AttributedGraph& g, std::uint64_t seed);

// ---- affinity separation after source training ----

struct SeparationOptions {
  std::size_t seeds = 10;
  std::uint64_t base_seed = 0;
  SyntheticSpec graph;
  RunConfig config;
};

struct SeparationSeed {
  std::uint64_t seed = 0;
  double mean_normal = 0.0;
  double mean_anomaly = 0.0;
  bool separated = false;
};

struct SeparationResult {
  std::vector<SeparationSeed> runs;
  std::size_t separated = 0;
  HomophilyReport last_histogram;
};

SeparationResult run_separation_experiment(const SeparationOptions& options);
nlohmann::json to_json(const SeparationResult& r);

// ---- margin monotonicity under TTT ----

struct MarginExperimentOptions {
  std::size_t seeds = 10;
  std::uint64_t base_seed = 0;
  double lr = 1e-3;
  double homophily = 0.9;
  std::size_t steps = 30;
  SyntheticSpec graph;
  RunConfig config;  // lr, ttt_max_epochs, patience and target_init are overridden
};

struct MarginSeed {
  std::uint64_t seed = 0;
  std::vector<double> margins;  // initial, then one per step
  MarginReport report;
  // At the initial target encoder: eval mode and the TTT (dropout) mode.
  ClassGradients gradients_eval;
  ClassGradients gradients_ttt;
};

struct MarginExperimentResult {
  std::vector<MarginSeed> runs;
  double median_fraction_increasing = 0.0;
  bool preconditions_met = false;
  double lr = 0.0;
};

MarginExperimentResult run_margin_experiment(const MarginExperimentOptions& options);
nlohmann::json to_json(const MarginExperimentResult& r);

// ---- TTT benefit on a cross-domain pair ----

struct TransferOptions {
  std::size_t seeds = 10;
  std::uint64_t base_seed = 0;
  SyntheticSpec graph;
  RunConfig config;
};

struct TransferSeed {
  std::uint64_t seed = 0;
  double auroc_before = 0.0;
  double auroc_after = 0.0;
  double auprc_before = 0.0;
  double auprc_after = 0.0;
  std::size_t chosen_epoch = 0;
};

struct TransferResult {
  std::vector<TransferSeed> runs;
  std::size_t not_worse = 0;  // runs with auroc_after >= auroc_before
};

TransferResult run_transfer_experiment(const TransferOptions& options);
nlohmann::json to_json(const TransferResult& r);

// ---- AUROC under decreasing target homophily ----

struct HomophilyExperimentOptions {
  std::vector<double> levels{0.9, 0.7, 0.5, 0.3, 0.1};
  std::size_t seeds = 5;
  std::uint64_t base_seed = 0;
  SyntheticSpec source_graph;
  SyntheticSpec target_graph;
  RunConfig config;
  // Trained source model to reuse for every seed instead of training one per
  // seed.
  std::optional<Checkpoint> source;
};

// Target defaults for the sweep: twice the anomaly rate and a heavier anomaly
// degree so that edge-label homophily can be driven down to 0.1 by
// degree-preserving rewiring.
SyntheticSpec default_sweep_target();

struct HomophilyRow {
  double level = 0.0;
  std::vector<double> achieved;  // per seed
  std::vector<double> auroc;     // per seed
  std::vector<double> auprc;     // per seed
  double median_auroc = 0.0;
};

struct HomophilyExperimentResult {
  std::vector<HomophilyRow> rows;
  // Pooled over seeds and levels.
  std::optional<double> median_auroc_high;  // levels >= 0.5
  std::optional<double> median_auroc_low;   // levels <= 0.3
};

HomophilyExperimentResult run_homophily_experiment(const HomophilyExperimentOptions& options);
nlohmann::json to_json(const HomophilyExperimentResult& r);

double median(std::vector<double> values);

// ---- full-model gradient check ----

struct GradCheckSuiteResult {
  std::vector<ad::GradCheckReport> train;  // per point
  std::vector<ad::GradCheckReport> ttt;
  double max_rel_error = 0.0;
  bool passed = false;
};

inline constexpr double kModelGradTolerance = 1e-4;

// Random graphs of 8-10 nodes; checks the source training loss over every
// trainable parameter and the TTT loss over target encoder and decoder.
GradCheckSuiteResult run_model_gradcheck(std::uint64_t seed, std::size_t points = 5,
                                         double tol = kModelGradTolerance);
nlohmann::json to_json(const GradCheckSuiteResult& r);

}  // namespace gadt3
