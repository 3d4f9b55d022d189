"""Central finite-difference checks of every engine op and of the full models."""
import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import FORWARD, REVERSE, EdgeType, HeteroGraph, Metapath, NodeType, Schema
from .model import ModelConfig, build_model

TOLERANCE = 1e-4


def toy_graph(seed=0):
    """10-node DBLP-shaped graph: 3 authors, 4 papers, 2 terms, 1 venue."""
    r = np.random.default_rng(seed)
    schema = Schema(
        [NodeType("author", 3), NodeType("paper", 4), NodeType("term", 2), NodeType("venue", 2)],
        [EdgeType("writes", "author", "paper"), EdgeType("has_term", "paper", "term"),
         EdgeType("published_in", "paper", "venue")],
    )
    feats = {nt.name: r.normal(size=(n, nt.feature_dim)) for nt, n in zip(schema.node_types, (3, 4, 2, 1))}
    edges = {
        "writes": [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (0, 3)],
        "has_term": [(0, 0), (1, 0), (2, 1), (3, 1), (3, 0)],
        "published_in": [(0, 0), (1, 0), (2, 0), (3, 0)],
    }
    mps = [
        Metapath("APA", [("writes", FORWARD), ("writes", REVERSE)]),
        Metapath("APVPA", [("writes", FORWARD), ("published_in", FORWARD),
                           ("published_in", REVERSE), ("writes", REVERSE)]),
    ]
    return HeteroGraph(schema, feats, edges, "author", [0, 1, 0], 2, mps, [[0], [1], [2]])


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place and restored."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    """``|a - b| / max(|a|, |b|)`` in the Frobenius norm; differences below 1e-10 count as exact."""
    diff = np.linalg.norm(a - b)
    if diff < 1e-10:
        return 0.0
    return float(diff / max(np.linalg.norm(a), np.linalg.norm(b)))


def check(loss_fn, params, h=1e-5):
    """``{param name: relative error}`` of the backward gradient against finite differences."""
    for p in params:
        p.grad = None
    ad.backward(loss_fn())
    out = {}
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        out[p.name] = relative_error(analytic, numeric_grad(lambda: float(loss_fn().data), p.data, h))
    for p in params:
        p.grad = None
    return out


def _op_cases(rng):
    def P(name, shape):
        return Parameter(name, rng.normal(size=shape))

    a, b, c = P("a", (4, 3)), P("b", (3, 5)), P("c", (1, 5))
    x, y = P("x", (4, 5)), P("y", (4, 5))
    w = P("w", (6, 1))
    seg = np.array([0, 2, 2, 1, 0, 2])
    src = np.array([3, 0, 0, 2, 1, 3])
    idx = np.array([3, 1, 1, 0])
    labels = np.array([0, 4, 2, 1])
    return {
        "matmul": (lambda: ad.total(ad.tanh(ad.matmul(a, b))), [a, b]),
        "add": (lambda: ad.total(ad.tanh(ad.add(x, c))), [x, c]),
        "mul": (lambda: ad.total(ad.mul(x, y)), [x, y]),
        "scale": (lambda: ad.total(ad.tanh(ad.scale(x, -1.7))), [x]),
        "tanh": (lambda: ad.total(ad.mul(ad.tanh(x), y)), [x]),
        "relu": (lambda: ad.total(ad.mul(ad.relu(x), y)), [x]),
        "leaky_relu": (lambda: ad.total(ad.mul(ad.leaky_relu(x, 0.1), y)), [x]),
        "concat": (lambda: ad.total(ad.tanh(ad.concat([a, x]))), [a, x]),
        "index_rows": (lambda: ad.total(ad.tanh(ad.index_rows(x, idx))), [x]),
        "segment_sum": (lambda: ad.total(ad.tanh(ad.segment_sum(ad.index_rows(x, src), seg, 3))), [x]),
        "segment_softmax": (lambda: ad.total(ad.mul(ad.segment_softmax(w, seg, 3), Tensor(np.arange(6.0)[:, None]))), [w]),
        "row_scale": (lambda: ad.total(ad.tanh(ad.row_scale(ad.index_rows(x, src), w))), [x, w]),
        "weighted_scatter": (lambda: ad.total(ad.tanh(ad.weighted_scatter(x, src, seg, w, 3))), [x, w]),
        "softmax": (lambda: ad.total(ad.mul(ad.softmax(x), y)), [x]),
        "log_softmax": (lambda: ad.total(ad.mul(ad.log_softmax(x), y)), [x]),
        "nll": (lambda: ad.nll_of_logsoftmax(x, labels), [x]),
    }


def op_suite(seed=0):
    """``[(group, max relative error)]`` for every op."""
    rng = np.random.default_rng(seed)
    return [(name, max(check(fn, params).values())) for name, (fn, params) in _op_cases(rng).items()]


def model_suite(seed=0, hidden_dim=3, layers=2):
    """``[(variant:parameter, relative error)]`` for DHGCN-H, DHGCN-S and RGCN on the toy graph."""
    g = toy_graph(seed)
    out = []
    for variant in ("dhgcn-h", "dhgcn-s", "rgcn"):
        cfg = ModelConfig(variant=variant, layers=layers, hidden_dim=hidden_dim)
        model = build_model(g, cfg, np.random.default_rng(seed + 1))
        batch = model.sample(g, np.arange(g.num_nodes(g.target_type)), np.random.default_rng(seed + 2))
        labels = g.labels[batch.targets]

        def loss():
            return ad.nll_of_logsoftmax(model.forward(g, batch), labels)

        errs = check(loss, list(model.params))
        out.extend((f"{variant}:{name}", err) for name, err in errs.items())
    return out


def run(seed=0):
    """Both suites; returns ``(rows, passed)``."""
    rows = op_suite(seed) + model_suite(seed)
    return rows, all(err < TOLERANCE for _, err in rows)
