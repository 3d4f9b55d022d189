"""Synthetic heterogeneous benchmark family with a tunable number of 'info' nodes per target.

Each target belongs to one of three classes; its features and the features of its
attached info nodes are draws from a class-specific Gaussian mixture over shared
components.  Three bridge types (A, B, C) link targets of the same class with
class-dependent probabilities, which the target-bridge-target metapaths expose.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .graph import FORWARD, REVERSE, EdgeType, HeteroGraph, Metapath, NodeType, Schema

TARGET = "target"
INFO = "info"
BRIDGES = ("A", "B", "C")


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    family: int = 1
    n_targets: int = 2000
    feature_dim: int = 50
    num_classes: int = 3
    components: int = 5
    dirichlet_alpha: float = 1.0
    info_count_std: float = 1.0
    mean_scale: float = 3.0
    bridge_range: tuple = (5, 10)
    bridge_features: str = "constant"
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.family <= 10:
            raise SynthConfigError(f"family must be in 1..10, got {self.family}")
        for name in ("n_targets", "feature_dim", "num_classes", "components", "folds"):
            if getattr(self, name) < 1:
                raise SynthConfigError(f"{name} must be positive")
        if self.dirichlet_alpha <= 0 or self.info_count_std <= 0 or self.mean_scale <= 0:
            raise SynthConfigError("dirichlet_alpha, info_count_std and mean_scale must be positive")
        lo, hi = self.bridge_range
        if not 1 <= lo <= hi:
            raise SynthConfigError(f"invalid bridge_range {self.bridge_range}")
        if self.feature_dim < hi:
            raise SynthConfigError("feature_dim must fit a one-hot index of every bridge node")
        self.bridge_range = (int(lo), int(hi))
        if self.bridge_features not in ("constant", "onehot"):
            raise SynthConfigError(f"bridge_features must be 'constant' or 'onehot', got {self.bridge_features!r}")


@dataclass
class GeneratorTrace:
    config: dict
    means: np.ndarray  # components x dim
    mixture: np.ndarray  # classes x components
    bridge_counts: list
    bridge_probs: list  # per bridge: classes x count
    classes: np.ndarray
    target_components: np.ndarray
    bridge_choice: np.ndarray  # targets x 3
    info_counts: np.ndarray
    info_owner: np.ndarray
    info_components: np.ndarray
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, list):
                v = [x.tolist() if isinstance(x, np.ndarray) else x for x in v]
            out[k] = v
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            config=d["config"],
            means=np.asarray(d["means"], dtype=np.float64),
            mixture=np.asarray(d["mixture"], dtype=np.float64),
            bridge_counts=list(d["bridge_counts"]),
            bridge_probs=[np.asarray(p, dtype=np.float64) for p in d["bridge_probs"]],
            classes=np.asarray(d["classes"], dtype=np.int64),
            target_components=np.asarray(d["target_components"], dtype=np.int64),
            bridge_choice=np.asarray(d["bridge_choice"], dtype=np.int64),
            info_counts=np.asarray(d["info_counts"], dtype=np.int64),
            info_owner=np.asarray(d["info_owner"], dtype=np.int64),
            info_components=np.asarray(d["info_components"], dtype=np.int64),
            extras=d.get("extras", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def synthetic_schema(feature_dim=50):
    nodes = [NodeType(TARGET, feature_dim), NodeType(INFO, feature_dim)]
    nodes += [NodeType(b, feature_dim) for b in BRIDGES]
    edges = [EdgeType("has_info", TARGET, INFO)]
    edges += [EdgeType(f"link_{b}", TARGET, b) for b in BRIDGES]
    return Schema(nodes, edges)


def synthetic_metapaths():
    return [Metapath(f"{TARGET}-{b}-{TARGET}", [(f"link_{b}", FORWARD), (f"link_{b}", REVERSE)])
            for b in BRIDGES]


def _categorical(rng, probs):
    """One draw per row of ``probs``."""
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] > cdf).sum(axis=1)


def generate(config):
    """Build one dataset of the family; returns ``(graph, trace)``."""
    c = config
    rng = np.random.default_rng(c.seed)
    means = rng.normal(0.0, c.mean_scale, size=(c.components, c.feature_dim))
    mixture = rng.dirichlet(np.full(c.components, c.dirichlet_alpha), size=c.num_classes)
    lo, hi = c.bridge_range
    bridge_counts = [int(x) for x in rng.integers(lo, hi + 1, size=len(BRIDGES))]
    bridge_probs = [rng.dirichlet(np.full(n, c.dirichlet_alpha), size=c.num_classes) for n in bridge_counts]

    n = c.n_targets
    classes = rng.integers(0, c.num_classes, size=n)
    comp = _categorical(rng, mixture[classes])
    target_feats = means[comp] + rng.standard_normal((n, c.feature_dim))
    choice = np.stack([_categorical(rng, p[classes]) for p in bridge_probs], axis=1)

    counts = np.maximum(1, np.rint(rng.normal(c.family, c.info_count_std, size=n))).astype(np.int64)
    owner = np.repeat(np.arange(n), counts)
    info_comp = _categorical(rng, mixture[classes[owner]])
    info_feats = means[info_comp] + rng.standard_normal((len(owner), c.feature_dim))

    features = {TARGET: target_feats, INFO: info_feats}
    edges = {"has_info": np.stack([owner, np.arange(len(owner))], axis=1)}
    for k, b in enumerate(BRIDGES):
        if c.bridge_features == "onehot":
            features[b] = np.eye(bridge_counts[k], c.feature_dim)
        else:
            features[b] = np.ones((bridge_counts[k], c.feature_dim))
        edges[f"link_{b}"] = np.stack([np.arange(n), choice[:, k]], axis=1)

    perm = rng.permutation(n)
    folds = [np.sort(f) for f in np.array_split(perm, c.folds)]

    graph = HeteroGraph(synthetic_schema(c.feature_dim), features, edges, TARGET, classes,
                        c.num_classes, synthetic_metapaths(), folds)
    cfg = asdict(c)
    cfg["bridge_range"] = list(c.bridge_range)
    trace = GeneratorTrace(cfg, means, mixture, bridge_counts, bridge_probs, classes, comp,
                           choice, counts, owner, info_comp)
    return graph, trace


def _component_loglik(trace, x):
    """log N(x; mu_k, I) for each row of x and component k."""
    x = np.atleast_2d(x)
    d = x.shape[1]
    sq = ((x[:, None, :] - trace.means[None, :, :]) ** 2).sum(axis=2)
    return -0.5 * sq - 0.5 * d * np.log(2.0 * np.pi)


def bayes_oracle(trace, feature_bag, prior=None):
    """Exact class posterior for a bag of feature vectors drawn i.i.d. from the class mixture."""
    prior = np.full(len(trace.mixture), 1.0 / len(trace.mixture)) if prior is None else np.asarray(prior)
    ll = _component_loglik(trace, feature_bag)  # n x K
    with np.errstate(divide="ignore"):
        log_mix = np.log(trace.mixture)  # C x K
    per_vec = logsumexp(ll[:, None, :] + log_mix[None, :, :], axis=2)  # n x C
    logpost = np.log(prior) + per_vec.sum(axis=0)
    return np.exp(logpost - logsumexp(logpost))


def bayes_predictions(graph, trace):
    """Posterior for every target from its own features plus its info nodes' features."""
    n = graph.num_nodes(TARGET)
    with np.errstate(divide="ignore"):
        log_mix = np.log(trace.mixture)

    def per_class(x):
        ll = _component_loglik(trace, x)
        return logsumexp(ll[:, None, :] + log_mix[None, :, :], axis=2)

    score = per_class(graph.features[TARGET])
    np.add.at(score, trace.info_owner, per_class(graph.features[INFO]))
    score -= logsumexp(score, axis=1, keepdims=True)
    return np.exp(score)
