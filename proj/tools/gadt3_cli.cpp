#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gadt3/error.hpp"
#include "gadt3/eval.hpp"
#include "gadt3/experiments.hpp"
#include "gadt3/graph.hpp"
#include "gadt3/pipeline.hpp"
#include "gadt3/runtime.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gadt3;

namespace {

struct Globals {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool quiet = false;
};

struct FileConfig {
  RunConfig run;
  std::optional<std::string> source_graph;
  std::optional<std::string> target_graph;
  std::optional<std::string> output_dir;
};

// Overrides collected from subcommand flags; applied after the config file.
struct ConfigFlags {
  std::optional<std::size_t> source_epochs, ttt_max_epochs, patience, neighbor_cap;
  std::optional<double> lr, dropout;
  std::optional<std::string> scoring_mode, target_init;
  bool plain = false;
  bool identity_encoder = false;
};

FileConfig read_config(const Globals& g) {
  FileConfig fc;
  if (!g.config_path) return fc;
  std::ifstream in(*g.config_path);
  if (!in) throw UsageError("cannot read config file " + *g.config_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  auto take_path = [&](const char* key, std::optional<std::string>& slot) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) throw UsageError(std::string("config: ") + key + " must be a string");
    slot = j.at(key).get<std::string>();
    j.erase(key);
  };
  take_path("source_graph", fc.source_graph);
  take_path("target_graph", fc.target_graph);
  take_path("output_dir", fc.output_dir);
  merge_config(fc.run, j);
  return fc;
}

RunConfig resolve_config(const FileConfig& fc, const Globals& g, const ConfigFlags& f) {
  RunConfig c = fc.run;
  if (g.seed) c.seed = *g.seed;
  if (f.source_epochs) c.source_epochs = *f.source_epochs;
  if (f.ttt_max_epochs) c.ttt_max_epochs = *f.ttt_max_epochs;
  if (f.patience) c.patience = *f.patience;
  if (f.neighbor_cap) c.neighbor_cap = *f.neighbor_cap;
  if (f.lr) c.lr = *f.lr;
  if (f.dropout) c.dropout_rate = *f.dropout;
  if (f.scoring_mode) c.scoring_mode = parse_scoring_mode(*f.scoring_mode);
  if (f.target_init) merge_config(c, json{{"target_init", *f.target_init}});
  if (f.plain) c.nsaw_enabled = false;
  if (f.identity_encoder) c.identity_encoder = true;
  validate(c);
  return c;
}

fs::path output_dir(const Globals& g, const FileConfig& fc) {
  if (g.out) return *g.out;
  if (fc.output_dir) return *fc.output_dir;
  throw UsageError("no output directory (pass --out or set output_dir in the config)");
}

std::string require_path(const std::optional<std::string>& flag, const std::optional<std::string>& from_file,
                         const char* what) {
  if (flag) return *flag;
  if (from_file) return *from_file;
  throw UsageError(std::string("no ") + what + " given");
}

void write_json(const fs::path& path, const json& j) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

void emit(const Globals& g, const json& j) {
  if (!g.quiet) std::cout << j.dump(2) << '\n';
}

json stats_json(const GraphStats& s) {
  json j = {{"num_nodes", s.num_nodes},
            {"num_edges", s.num_edges},
            {"degree", {{"min", s.degree.min}, {"mean", s.degree.mean}, {"max", s.degree.max}}}};
  if (s.anomaly_rate) j["anomaly_rate"] = *s.anomaly_rate;
  if (s.edge_label_homophily) j["edge_label_homophily"] = *s.edge_label_homophily;
  return j;
}

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--source-epochs", f.source_epochs, "Source training epochs");
  cmd->add_option("--ttt-max-epochs", f.ttt_max_epochs, "Maximum test-time training epochs");
  cmd->add_option("--patience", f.patience, "Early-stopping patience");
  cmd->add_option("--neighbor-cap", f.neighbor_cap, "Per-node neighbor cap (0 = none)");
  cmd->add_option("--lr", f.lr, "Adam learning rate");
  cmd->add_option("--dropout", f.dropout, "Dropout rate");
  cmd->add_option("--scoring-mode", f.scoring_mode, "affinity|predictor");
  cmd->add_option("--target-init", f.target_init, "fresh|from_source");
  cmd->add_flag("--plain", f.plain, "Plain mean aggregation instead of attention weighting");
  cmd->add_flag("--identity-encoder", f.identity_encoder, "Identity projection encoders");
}

int run(int argc, char** argv) {
  CLI::App app{"Graph anomaly detection with test-time training"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--quiet", g.quiet, "Suppress stdout reports and warnings");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic attributed graph");
  SyntheticSpec spec;
  gen->add_option("--nodes", spec.num_nodes, "Number of nodes");
  gen->add_option("--rate", spec.anomaly_rate, "Anomaly rate");
  gen->add_option("--homophily", spec.target_homophily, "Target edge-label homophily");
  gen->add_option("--dim", spec.feature_dim, "Feature dimension");
  gen->add_option("--degree", spec.mean_degree, "Mean degree");
  gen->add_option("--noise", spec.noise_scale, "Feature noise scale");
  gen->add_option("--anomaly-degree-factor", spec.anomaly_degree_factor, "Anomaly to normal degree ratio");
  gen->add_option("--name", spec.name, "Graph name");

  // train
  auto* train = app.add_subcommand("train", "Train on a labeled source graph");
  ConfigFlags train_flags;
  std::optional<std::string> train_source_path;
  train->add_option("--source", train_source_path, "Source graph directory");
  add_config_flags(train, train_flags);

  // adapt
  auto* adapt = app.add_subcommand("adapt", "Test-time training on a target graph");
  ConfigFlags adapt_flags;
  std::optional<std::string> adapt_ckpt, adapt_target_path;
  bool eval_labels = false;
  adapt->add_option("--checkpoint", adapt_ckpt, "Source checkpoint")->required();
  adapt->add_option("--target", adapt_target_path, "Target graph directory");
  adapt->add_flag("--eval-labels", eval_labels, "Record margin and AUROC/AUPRC per epoch from target labels");
  add_config_flags(adapt, adapt_flags);

  // eval
  auto* eval = app.add_subcommand("eval", "Score and evaluate a graph");
  std::string eval_ckpt, eval_graph, eval_mode = "affinity";
  std::optional<std::string> eval_domain, dump_ranking, export_dir, eval_aggregation;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  eval->add_option("--graph", eval_graph, "Graph directory")->required();
  eval->add_option("--mode", eval_mode, "affinity|predictor");
  eval->add_option("--domain", eval_domain, "source|target (default: target when adapted)");
  eval->add_option("--dump-ranking", dump_ranking, "Write the ranking TSV here");
  eval->add_option("--export-embeddings", export_dir, "Write final embeddings to this directory");
  eval->add_option("--aggregation", eval_aggregation, "nsaw|plain; must match the checkpoint");

  // exp-margin
  auto* exp_margin = app.add_subcommand("exp-margin", "Margin monotonicity under test-time training");
  MarginExperimentOptions margin_opts;
  ConfigFlags margin_flags;
  exp_margin->add_option("--seeds", margin_opts.seeds, "Number of seeds");
  exp_margin->add_option("--lr", margin_opts.lr, "TTT learning rate");
  exp_margin->add_option("--homophily", margin_opts.homophily, "Graph homophily");
  exp_margin->add_option("--steps", margin_opts.steps, "TTT steps observed");
  exp_margin->add_option("--nodes", margin_opts.graph.num_nodes, "Nodes per graph");
  exp_margin->add_option("--source-epochs", margin_flags.source_epochs, "Source training epochs");
  exp_margin->add_option("--dropout", margin_flags.dropout, "Dropout rate");

  // exp-homophily
  auto* exp_h = app.add_subcommand("exp-homophily", "AUROC under decreasing target homophily");
  HomophilyExperimentOptions h_opts;
  h_opts.target_graph = default_sweep_target();
  ConfigFlags h_flags;
  std::optional<std::string> h_ckpt;
  exp_h->add_option("--levels", h_opts.levels, "Homophily levels")->delimiter(',');
  exp_h->add_option("--seeds", h_opts.seeds, "Number of seeds");
  exp_h->add_option("--checkpoint", h_ckpt, "Trained source checkpoint (default: train one per seed)");
  exp_h->add_option("--nodes", h_opts.target_graph.num_nodes, "Target nodes");
  add_config_flags(exp_h, h_flags);

  // exp-transfer
  auto* exp_t = app.add_subcommand("exp-transfer", "Target AUROC before and after test-time training");
  TransferOptions t_opts;
  ConfigFlags t_flags;
  exp_t->add_option("--seeds", t_opts.seeds, "Number of seeds");
  exp_t->add_option("--nodes", t_opts.graph.num_nodes, "Nodes per graph");
  add_config_flags(exp_t, t_flags);

  // exp-separation
  auto* exp_s = app.add_subcommand("exp-separation", "Affinity of normal vs anomalous nodes after source training");
  SeparationOptions s_opts;
  ConfigFlags s_flags;
  exp_s->add_option("--seeds", s_opts.seeds, "Number of seeds");
  exp_s->add_option("--nodes", s_opts.graph.num_nodes, "Nodes per graph");
  exp_s->add_option("--homophily", s_opts.graph.target_homophily, "Graph homophily");
  exp_s->add_option("--rate", s_opts.graph.anomaly_rate, "Anomaly rate");
  add_config_flags(exp_s, s_flags);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model gradients");
  std::size_t gc_points = 5;
  gradcheck->add_option("--points", gc_points, "Random parameter points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (g.quiet) set_warning_handler([](std::string_view) {});
  const std::uint64_t seed = g.seed.value_or(0);

  if (*gen) {
    spec.seed = seed;
    validate(spec);
    if (!g.out) throw UsageError("gen needs --out");
    const AttributedGraph graph = generate_synthetic(spec);
    save_graph(graph, *g.out);
    emit(g, stats_json(compute_stats(graph)));
    return 0;
  }

  if (*train) {
    const FileConfig fc = read_config(g);
    const RunConfig cfg = resolve_config(fc, g, train_flags);
    const fs::path out = output_dir(g, fc);
    const AttributedGraph source = load_graph(require_path(train_source_path, fc.source_graph, "source graph (--source)"));
    if (!source.labels) throw DataError("missing file: " + (fs::path(require_path(train_source_path, fc.source_graph, "")) / "labels.tsv").string());
    Rng rng(cfg.seed);
    const SourceTrainingResult r = train_source(source, cfg, rng);
    save_checkpoint({r.bundle, r.centroids, cfg}, out / "checkpoint.bin");
    write_json(out / "train_log.json", to_json(r.log));
    emit(g, {{"checkpoint", (out / "checkpoint.bin").string()},
             {"epochs", r.log.size()},
             {"final", to_json(std::vector<EpochLog>{r.log.back()})[0]}});
    return 0;
  }

  if (*adapt) {
    const FileConfig fc = read_config(g);
    Checkpoint ckpt = load_checkpoint(*adapt_ckpt);
    // The checkpoint's own config is the base; file and flags win over it.
    FileConfig merged = fc;
    if (!g.config_path) merged.run = ckpt.config;
    const RunConfig cfg = resolve_config(merged, g, adapt_flags);
    require_aggregation_mode(ckpt, cfg.nsaw_enabled);
    const fs::path out = output_dir(g, fc);
    const AttributedGraph target = load_graph(require_path(adapt_target_path, fc.target_graph, "target graph (--target)"));
    Rng rng(cfg.seed);
    const AdaptResult r = adapt_target(ckpt.bundle, ckpt.centroids, target, cfg, rng, {eval_labels});
    save_checkpoint({r.bundle, ckpt.centroids, cfg}, out / "adapted.bin");
    write_json(out / "trace.json", to_json(r.trace));
    emit(g, {{"checkpoint", (out / "adapted.bin").string()},
             {"chosen_epoch", r.trace.chosen_epoch},
             {"best_score", r.trace.best_score},
             {"epochs_run", r.trace.epochs.size()},
             {"stop_reason", r.trace.stop_reason}});
    return 0;
  }

  if (*eval) {
    const ScoringMode mode = parse_scoring_mode(eval_mode);
    const Checkpoint ckpt = load_checkpoint(eval_ckpt);
    if (eval_aggregation) {
      if (*eval_aggregation != "nsaw" && *eval_aggregation != "plain")
        throw UsageError("unknown aggregation '" + *eval_aggregation + "' (expected nsaw|plain)");
      require_aggregation_mode(ckpt, *eval_aggregation == "nsaw");
    }
    Domain domain = ckpt.bundle.target_encoder ? Domain::Target : Domain::Source;
    if (eval_domain) {
      if (*eval_domain == "source") domain = Domain::Source;
      else if (*eval_domain == "target") domain = Domain::Target;
      else throw UsageError("unknown domain '" + *eval_domain + "' (expected source|target)");
    }
    if (domain == Domain::Target && !ckpt.bundle.target_encoder) throw UsageError("checkpoint has no target encoder; run adapt first");
    const AttributedGraph graph = load_graph(eval_graph);
    if (!graph.labels) throw DataError("labels required for eval");
    const AnomalyRanking ranking = score_nodes(ckpt.bundle, graph, domain, mode);
    const MetricResult m = evaluate_metrics(ranking.scores, *graph.labels, mode);
    if (dump_ranking) {
      std::ofstream tsv(*dump_ranking, std::ios::trunc);
      tsv << "rank\tnode\tscore\tisolated\n";
      for (std::size_t r = 0; r < ranking.order.size(); ++r) {
        const NodeId v = ranking.order[r];
        std::ostringstream s;
        s.precision(17);
        s << ranking.scores[v];
        tsv << r + 1 << '\t' << v << '\t' << s.str() << '\t' << int(ranking.isolated[v]) << '\n';
      }
      if (!tsv) throw DataError("write failed: " + *dump_ranking);
    }
    if (export_dir) export_embeddings(ckpt.bundle, graph, domain, *export_dir);
    if (g.out) {
      write_json(fs::path(*g.out) / "metrics.json", to_json(m));
      write_json(fs::path(*g.out) / "histogram.json", to_json(homophily_report(ckpt.bundle, graph, domain)));
    }
    emit(g, to_json(m));
    return 0;
  }

  if (*exp_margin) {
    const FileConfig fc = read_config(g);
    margin_opts.config = resolve_config(fc, g, margin_flags);
    margin_opts.base_seed = seed;
    const json report = to_json(run_margin_experiment(margin_opts));
    if (g.out) write_json(fs::path(*g.out) / "margin.json", report);
    emit(g, report);
    return 0;
  }

  if (*exp_h) {
    const FileConfig fc = read_config(g);
    h_opts.config = resolve_config(fc, g, h_flags);
    h_opts.base_seed = seed;
    if (h_ckpt) h_opts.source = load_checkpoint(*h_ckpt);
    const json report = to_json(run_homophily_experiment(h_opts));
    if (g.out) write_json(fs::path(*g.out) / "homophily.json", report);
    emit(g, report);
    return 0;
  }

  if (*exp_t) {
    const FileConfig fc = read_config(g);
    t_opts.config = resolve_config(fc, g, t_flags);
    t_opts.base_seed = seed;
    const json report = to_json(run_transfer_experiment(t_opts));
    if (g.out) write_json(fs::path(*g.out) / "transfer.json", report);
    emit(g, report);
    return 0;
  }

  if (*exp_s) {
    const FileConfig fc = read_config(g);
    s_opts.config = resolve_config(fc, g, s_flags);
    s_opts.base_seed = seed;
    const json report = to_json(run_separation_experiment(s_opts));
    if (g.out) write_json(fs::path(*g.out) / "separation.json", report);
    emit(g, report);
    return 0;
  }

  if (*gradcheck) {
    const GradCheckSuiteResult r = run_model_gradcheck(seed, gc_points);
    emit(g, to_json(r));
    std::cout << "max relative error: " << r.max_rel_error << '\n';
    return r.passed ? 0 : 3;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
