"""Cross-domain graph anomaly detection with test-time training."""

import json as _json

from . import _gadt3
from ._gadt3 import (
    DataError,
    Graph,
    Model,
    NumericalError,
    UsageError,
    auprc,
    auroc,
    generate_synthetic,
    load_graph,
    save_graph,
)

__all__ = [
    "DataError",
    "Graph",
    "Model",
    "NumericalError",
    "UsageError",
    "adapt",
    "auprc",
    "auroc",
    "default_config",
    "evaluate",
    "generate_synthetic",
    "gradcheck",
    "graph_stats",
    "homophily_report",
    "load_graph",
    "load_model",
    "rewire_to_homophily",
    "save_graph",
    "train_source",
]


def _dump(config):
    return "" if not config else _json.dumps(config)


def default_config():
    """Default run configuration as a dict."""
    return _json.loads(_gadt3.default_config_json())


def graph_stats(graph):
    return _json.loads(graph.stats_json())


def rewire_to_homophily(graph, target, seed=0):
    """Returns (rewired graph, info dict)."""
    g, info = _gadt3.rewire_to_homophily(graph, target, seed)
    return g, _json.loads(info)


def train_source(graph, config=None):
    """Trains on a labeled source graph. Returns (model, per-epoch log)."""
    model, log = _gadt3.train_source(graph, _dump(config))
    return model, _json.loads(log)


def adapt(model, target, config=None, eval_labels=False):
    """Test-time training on `target`. Keys in `config` override the model's
    training config. Returns (adapted model, trace dict)."""
    adapted, trace = model.adapt(target, _dump(config), eval_labels)
    return adapted, _json.loads(trace)


def evaluate(model, graph, mode="affinity", domain=None):
    return _json.loads(model.evaluate_json(graph, mode, domain))


def homophily_report(model, graph, domain=None):
    return _json.loads(model.homophily_report_json(graph, domain))


def load_model(path):
    return Model.load(str(path))


def gradcheck(seed=0, points=5):
    return _json.loads(_gadt3.gradcheck_json(seed, points))
