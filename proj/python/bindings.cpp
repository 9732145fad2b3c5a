#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gadt3/error.hpp"
#include "gadt3/eval.hpp"
#include "gadt3/experiments.hpp"
#include "gadt3/graph.hpp"
#include "gadt3/pipeline.hpp"

namespace py = pybind11;
using namespace gadt3;
using nlohmann::json;

namespace {

py::array_t<double> to_numpy(const Matrix& m) {
  py::array_t<double> out({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

Matrix from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw UsageError("expected a 2-d array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  throw UsageError("unknown domain '" + s + "' (expected source|target)");
}

RunConfig parse_config(const std::string& text) { return config_from_json(json::parse(text.empty() ? "{}" : text)); }

Domain default_domain(const Checkpoint& c) { return c.bundle.target_encoder ? Domain::Target : Domain::Source; }

std::string stats_json(const AttributedGraph& g) {
  const GraphStats s = compute_stats(g);
  json j = {{"num_nodes", s.num_nodes},
            {"num_edges", s.num_edges},
            {"degree", {{"min", s.degree.min}, {"mean", s.degree.mean}, {"max", s.degree.max}}}};
  if (s.anomaly_rate) j["anomaly_rate"] = *s.anomaly_rate;
  if (s.edge_label_homophily) j["edge_label_homophily"] = *s.edge_label_homophily;
  return j.dump();
}

}  // namespace

PYBIND11_MODULE(_gadt3, m) {
  m.doc() = "Native core of the gadt3 package";

  auto base = py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  (void)base;

  py::class_<AttributedGraph>(m, "Graph")
      .def(py::init([](std::size_t n, std::vector<Edge> edges, py::array_t<double, py::array::c_style | py::array::forcecast> x,
                       std::optional<std::vector<std::uint8_t>> labels, std::string name) {
             return build_graph(std::move(name), n, edges, from_numpy(x), std::move(labels));
           }),
           py::arg("num_nodes"), py::arg("edges"), py::arg("features"), py::arg("labels") = std::nullopt,
           py::arg("name") = "graph")
      .def_readonly("name", &AttributedGraph::name)
      .def_readonly("num_nodes", &AttributedGraph::num_nodes)
      .def_property_readonly("num_edges", &AttributedGraph::num_edges)
      .def_property_readonly("feature_dim", &AttributedGraph::feature_dim)
      .def_property_readonly("features", [](const AttributedGraph& g) { return to_numpy(g.features); })
      .def_readonly("labels", &AttributedGraph::labels)
      .def("edges", &AttributedGraph::edge_list)
      .def("neighbors", [](const AttributedGraph& g, NodeId v) {
        if (v >= g.num_nodes) throw UsageError("node out of range");
        auto nb = g.neighbors(v);
        return std::vector<NodeId>(nb.begin(), nb.end());
      })
      .def("stats_json", &stats_json)
      .def("__eq__", [](const AttributedGraph& a, const AttributedGraph& b) { return a == b; });

  m.def("load_graph", &load_graph, py::arg("path"));
  m.def("save_graph", &save_graph, py::arg("graph"), py::arg("path"));
  m.def(
      "generate_synthetic",
      [](std::size_t num_nodes, std::size_t feature_dim, double anomaly_rate, double homophily, double mean_degree,
         double noise_scale, double anomaly_degree_factor, std::uint64_t seed, std::string name) {
        SyntheticSpec s;
        s.num_nodes = num_nodes;
        s.feature_dim = feature_dim;
        s.anomaly_rate = anomaly_rate;
        s.target_homophily = homophily;
        s.mean_degree = mean_degree;
        s.noise_scale = noise_scale;
        s.anomaly_degree_factor = anomaly_degree_factor;
        s.seed = seed;
        s.name = std::move(name);
        return generate_synthetic(s);
      },
      py::arg("num_nodes") = 1000, py::arg("feature_dim") = 16, py::arg("anomaly_rate") = 0.05,
      py::arg("homophily") = 0.9, py::arg("mean_degree") = 10.0, py::arg("noise_scale") = 1.0,
      py::arg("anomaly_degree_factor") = 1.0, py::arg("seed") = 0, py::arg("name") = "synthetic");
  m.def(
      "rewire_to_homophily",
      [](const AttributedGraph& g, double target, std::uint64_t seed) {
        RewireResult r = rewire_to_homophily(g, target, seed);
        json info = {{"initial_homophily", r.initial_homophily},
                     {"achieved_homophily", r.achieved_homophily},
                     {"attempted_swaps", r.attempted_swaps},
                     {"accepted_swaps", r.accepted_swaps},
                     {"reached", r.reached}};
        return py::make_tuple(std::move(r.graph), info.dump());
      },
      py::arg("graph"), py::arg("target"), py::arg("seed") = 0);

  m.def("default_config_json", [] { return to_json(RunConfig{}).dump(); });
  m.def("normalize_config_json", [](const std::string& text) {
    RunConfig c = parse_config(text);
    validate(c);
    return to_json(c).dump();
  });

  py::class_<Checkpoint>(m, "Model")
      .def_property_readonly("config_json", [](const Checkpoint& c) { return to_json(c.config).dump(); })
      .def_property_readonly("adapted", [](const Checkpoint& c) { return c.bundle.target_encoder.has_value(); })
      .def_property_readonly("embedding_dim", [](const Checkpoint& c) { return c.bundle.embedding_dim(); })
      .def_property_readonly("centroid_normal", [](const Checkpoint& c) { return to_numpy(c.centroids.normal); })
      .def_property_readonly("centroid_anomaly", [](const Checkpoint& c) { return to_numpy(c.centroids.anomaly); })
      .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(c, p); })
      .def_static("load", &load_checkpoint)
      .def(
          "embed",
          [](const Checkpoint& c, const AttributedGraph& g, std::optional<std::string> domain) {
            return to_numpy(embed(c.bundle, g, domain ? parse_domain(*domain) : default_domain(c)).embeddings);
          },
          py::arg("graph"), py::arg("domain") = std::nullopt)
      .def(
          "score",
          [](const Checkpoint& c, const AttributedGraph& g, std::string mode, std::optional<std::string> domain) {
            const AnomalyRanking r =
                score_nodes(c.bundle, g, domain ? parse_domain(*domain) : default_domain(c), parse_scoring_mode(mode));
            return py::make_tuple(r.scores, r.order);
          },
          py::arg("graph"), py::arg("mode") = "affinity", py::arg("domain") = std::nullopt)
      .def(
          "evaluate_json",
          [](const Checkpoint& c, const AttributedGraph& g, std::string mode, std::optional<std::string> domain) {
            if (!g.labels) throw DataError("labels required for eval");
            const ScoringMode sm = parse_scoring_mode(mode);
            const AnomalyRanking r = score_nodes(c.bundle, g, domain ? parse_domain(*domain) : default_domain(c), sm);
            return to_json(evaluate_metrics(r.scores, *g.labels, sm)).dump();
          },
          py::arg("graph"), py::arg("mode") = "affinity", py::arg("domain") = std::nullopt)
      .def(
          "homophily_report_json",
          [](const Checkpoint& c, const AttributedGraph& g, std::optional<std::string> domain) {
            return to_json(homophily_report(c.bundle, g, domain ? parse_domain(*domain) : default_domain(c))).dump();
          },
          py::arg("graph"), py::arg("domain") = std::nullopt)
      .def(
          "adapt",
          [](const Checkpoint& c, const AttributedGraph& target, const std::string& config_text, bool eval_labels) {
            RunConfig cfg = c.config;
            if (!config_text.empty()) merge_config(cfg, json::parse(config_text));
            validate(cfg);
            Rng rng(cfg.seed);
            AdaptResult r;
            {
              py::gil_scoped_release release;
              r = adapt_target(c.bundle, c.centroids, target, cfg, rng, AdaptOptions{eval_labels});
            }
            return py::make_tuple(Checkpoint{std::move(r.bundle), c.centroids, cfg}, to_json(r.trace).dump());
          },
          py::arg("target"), py::arg("config_json") = "", py::arg("eval_labels") = false);

  m.def(
      "train_source",
      [](const AttributedGraph& g, const std::string& config_text) {
        RunConfig cfg = parse_config(config_text);
        validate(cfg);
        Rng rng(cfg.seed);
        SourceTrainingResult r;
        {
          py::gil_scoped_release release;
          r = train_source(g, cfg, rng);
        }
        return py::make_tuple(Checkpoint{std::move(r.bundle), std::move(r.centroids), cfg}, to_json(r.log).dump());
      },
      py::arg("graph"), py::arg("config_json") = "");

  m.def(
      "auroc", [](std::vector<double> s, std::vector<std::uint8_t> y) { return auroc(s, y); }, py::arg("scores"),
      py::arg("labels"));
  m.def(
      "auprc", [](std::vector<double> s, std::vector<std::uint8_t> y) { return auprc(s, y); }, py::arg("scores"),
      py::arg("labels"));
  m.def(
      "gradcheck_json",
      [](std::uint64_t seed, std::size_t points) { return to_json(run_model_gradcheck(seed, points)).dump(); },
      py::arg("seed") = 0, py::arg("points") = 5);
}
