"""Typed heterogeneous graph, metapaths, and the on-disk dataset directory format."""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORWARD = "forward"
REVERSE = "reverse"
DIRECTIONS = (FORWARD, REVERSE)


class GraphValidationError(ValueError):
    """Raised with every violation found, one per line."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("\n".join(self.violations))


class MetapathError(ValueError):
    pass


@dataclass(frozen=True)
class NodeType:
    name: str
    feature_dim: int


@dataclass(frozen=True)
class EdgeType:
    name: str
    src: str
    dst: str


@dataclass(frozen=True)
class Schema:
    node_types: tuple = ()
    edge_types: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        object.__setattr__(self, "edge_types", tuple(self.edge_types))

    def node_type(self, name):
        for nt in self.node_types:
            if nt.name == name:
                return nt
        raise KeyError(f"unknown node type {name!r}")

    def edge_type(self, name):
        for et in self.edge_types:
            if et.name == name:
                return et
        raise KeyError(f"unknown edge type {name!r}")

    def edge_type_id(self, name):
        return [et.name for et in self.edge_types].index(name)

    def node_type_names(self):
        return [nt.name for nt in self.node_types]

    def step_types(self, edge_type, direction):
        """(from_type, to_type) when traversing ``edge_type`` in ``direction``."""
        et = self.edge_type(edge_type)
        if direction == FORWARD:
            return et.src, et.dst
        if direction == REVERSE:
            return et.dst, et.src
        raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")

    def problems(self):
        out = []
        names = self.node_type_names()
        if len(set(names)) != len(names):
            out.append(f"duplicate node type names: {names}")
        enames = [et.name for et in self.edge_types]
        if len(set(enames)) != len(enames):
            out.append(f"duplicate edge type names: {enames}")
        for nt in self.node_types:
            if nt.feature_dim < 1:
                out.append(f"node type {nt.name!r}: feature_dim must be positive")
        for et in self.edge_types:
            for end in (et.src, et.dst):
                if end not in names:
                    out.append(f"edge type {et.name!r} references unknown node type {end!r}")
        return out


@dataclass(frozen=True)
class Metapath:
    name: str
    steps: tuple  # of (edge_type, direction)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple((str(e), str(d)) for e, d in self.steps))

    def __len__(self):
        """Number of nodes on an instance, i.e. steps + 1."""
        return len(self.steps) + 1

    def reversed(self):
        flip = {FORWARD: REVERSE, REVERSE: FORWARD}
        return Metapath(self.name, tuple((e, flip[d]) for e, d in reversed(self.steps)))


def metapath_type_check(schema, metapath):
    """Node-type sequence A1..An implied by the metapath; raises on a broken chain."""
    if not metapath.steps:
        raise MetapathError(f"metapath {metapath.name!r} has no steps")
    seq = []
    for k, (edge, direction) in enumerate(metapath.steps, start=1):
        try:
            a, b = schema.step_types(edge, direction)
        except (KeyError, ValueError) as exc:
            raise MetapathError(f"metapath {metapath.name!r}, step {k}: {exc}") from None
        if seq and seq[-1] != a:
            raise MetapathError(
                f"metapath {metapath.name!r} breaks at step {k}: "
                f"{edge} ({direction}) starts at {a!r} but previous step ended at {seq[-1]!r}"
            )
        if not seq:
            seq.append(a)
        seq.append(b)
    return seq


@dataclass
class HeteroGraph:
    """Immutable typed graph; nodes are addressed as ``(type name, local index)``."""

    schema: Schema
    features: dict  # type name -> (count x feature_dim) array
    edges: dict  # edge type name -> (n x 2) int array of (src_index, dst_index)
    target_type: str = None
    labels: np.ndarray = None
    num_classes: int = 0
    metapaths: tuple = ()
    folds: list = None  # list of arrays of target indices
    _adj: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.features = {k: np.asarray(v, dtype=np.float64) for k, v in self.features.items()}
        self.edges = {k: np.asarray(v, dtype=np.int64).reshape(-1, 2) for k, v in self.edges.items()}
        for nt in self.schema.node_types:
            self.features.setdefault(nt.name, np.zeros((0, nt.feature_dim)))
        for et in self.schema.edge_types:
            self.edges.setdefault(et.name, np.zeros((0, 2), dtype=np.int64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.metapaths = tuple(self.metapaths)
        if self.folds is not None:
            self.folds = [np.asarray(f, dtype=np.int64) for f in self.folds]

    def num_nodes(self, node_type=None):
        if node_type is None:
            return sum(len(f) for f in self.features.values())
        return len(self.features[node_type])

    def num_edges(self, edge_type=None):
        if edge_type is None:
            return sum(len(e) for e in self.edges.values())
        return len(self.edges[edge_type])

    def adjacency(self, edge_type, direction):
        """CSR ``(indptr, indices)`` with ascending neighbors per node."""
        key = (edge_type, direction)
        if key not in self._adj:
            src_t, dst_t = self.schema.step_types(edge_type, direction)
            e = self.edges[edge_type]
            frm, to = (e[:, 0], e[:, 1]) if direction == FORWARD else (e[:, 1], e[:, 0])
            order = np.lexsort((to, frm))
            counts = np.bincount(frm, minlength=self.num_nodes(src_t))
            indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            self._adj[key] = (indptr, to[order].astype(np.int64))
        return self._adj[key]

    def degree(self, node_type):
        """Total number of incident edges per node over every relation and direction."""
        deg = np.zeros(self.num_nodes(node_type), dtype=np.int64)
        for et in self.schema.edge_types:
            for direction in DIRECTIONS:
                a, _ = self.schema.step_types(et.name, direction)
                if a == node_type:
                    indptr, _ = self.adjacency(et.name, direction)
                    deg += np.diff(indptr)
        return deg

    def with_features(self, node_type, matrix):
        """Copy of the graph with one feature matrix replaced."""
        feats = dict(self.features)
        feats[node_type] = np.asarray(matrix, dtype=np.float64)
        return HeteroGraph(self.schema, feats, self.edges, self.target_type, self.labels,
                           self.num_classes, self.metapaths, self.folds)

    def summary(self):
        lines = [f"node types: {len(self.schema.node_types)}  nodes: {self.num_nodes()}",
                 f"edge types: {len(self.schema.edge_types)}  edges: {self.num_edges()}"]
        for nt in self.schema.node_types:
            lines.append(f"  nodes[{nt.name}] = {self.num_nodes(nt.name)}")
        for et in self.schema.edge_types:
            lines.append(f"  edges[{et.name}] = {self.num_edges(et.name)}")
        return "\n".join(lines)


def neighbors(graph, v, edge_type, direction):
    """Local indices adjacent to ``v = (type, index)`` under one typed relation, ascending."""
    node_type, index = v
    src_t, _ = graph.schema.step_types(edge_type, direction)
    if src_t != node_type:
        raise ValueError(
            f"edge type {edge_type!r} traversed {direction} starts at {src_t!r}, not {node_type!r}"
        )
    if not 0 <= index < graph.num_nodes(node_type):
        raise IndexError(f"node ({node_type}, {index}) out of range")
    indptr, indices = graph.adjacency(edge_type, direction)
    return indices[indptr[index]:indptr[index + 1]].tolist()


def validate(graph, extra=()):
    """Check every structural invariant and raise one error listing all violations."""
    out = list(extra) + graph.schema.problems()
    names = set(graph.schema.node_type_names())
    for nt in graph.schema.node_types:
        f = graph.features.get(nt.name)
        if f.ndim != 2 or f.shape[1] != nt.feature_dim:
            out.append(f"feature-dim mismatch: node type {nt.name!r} has features of shape "
                       f"{list(f.shape)}, expected width {nt.feature_dim}")
        elif not np.all(np.isfinite(f)):
            out.append(f"node type {nt.name!r} has non-finite features")
    for name in graph.features:
        if name not in names:
            out.append(f"features given for undeclared node type {name!r}")
    for et in graph.schema.edge_types:
        if et.src not in names or et.dst not in names:
            continue
        e = graph.edges[et.name]
        for col, end in ((0, et.src), (1, et.dst)):
            n = graph.num_nodes(end)
            bad = np.flatnonzero((e[:, col] < 0) | (e[:, col] >= n))
            for i in bad[:20]:
                out.append(f"out-of-range endpoint: edge {int(i)} of {et.name!r} "
                           f"({et.src} {e[i, 0]} -> {et.dst} {e[i, 1]}); {end} has {n} nodes")
            if len(bad) > 20:
                out.append(f"... {len(bad) - 20} more out-of-range endpoints on {et.name!r}")
    if graph.target_type is not None:
        if graph.target_type not in names:
            out.append(f"target type {graph.target_type!r} is not a node type")
        else:
            n = graph.num_nodes(graph.target_type)
            if graph.labels is None or len(graph.labels) != n:
                got = None if graph.labels is None else len(graph.labels)
                out.append(f"label count mismatch: {got} labels for {n} {graph.target_type!r} nodes")
            elif n and (graph.labels.min() < 0 or graph.labels.max() >= graph.num_classes):
                out.append(f"labels outside [0, {graph.num_classes})")
    for mp in graph.metapaths:
        try:
            metapath_type_check(graph.schema, mp)
        except MetapathError as exc:
            out.append(str(exc))
    if graph.folds is not None and graph.target_type in names:
        joined = np.concatenate(graph.folds) if graph.folds else np.zeros(0, dtype=np.int64)
        n = graph.num_nodes(graph.target_type)
        if len(joined) != n or not np.array_equal(np.sort(joined), np.arange(n)):
            out.append("splits: folds must be disjoint and cover every target node exactly once")
    if out:
        raise GraphValidationError(out)


class GraphBuilder:
    """Incremental construction with typed endpoints, checked at :meth:`build`."""

    def __init__(self, schema, target_type=None, num_classes=0):
        self.schema = schema
        self.target_type = target_type
        self.num_classes = num_classes
        self.features = {}
        self.edges = {et.name: [] for et in schema.edge_types}
        self.labels = None
        self.metapaths = []
        self._violations = []

    def add_nodes(self, node_type, features):
        self.features[node_type] = np.asarray(features, dtype=np.float64)
        return self

    def add_edge(self, edge_type, src, dst):
        et = self.schema.edge_type(edge_type)
        if src[0] != et.src or dst[0] != et.dst:
            self._violations.append(
                f"wrong-type endpoint: edge ({src[0]} {src[1]}, {dst[0]} {dst[1]}) declared on "
                f"{edge_type!r} which connects {et.src} -> {et.dst}"
            )
            return self
        self.edges[edge_type].append((src[1], dst[1]))
        return self

    def build(self):
        g = HeteroGraph(self.schema, self.features, self.edges, self.target_type,
                        self.labels, self.num_classes, self.metapaths)
        validate(g, self._violations)
        return g


# ---------------------------------------------------------------------------
# dataset directory


def _fmt(x):
    return repr(float(x))


def _write_tsv(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")


def _read_tsv(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split("\t") for line in fh if line.strip()]


def save_dataset(graph, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    schema = {
        "node_types": [{"name": nt.name, "feature_dim": nt.feature_dim} for nt in graph.schema.node_types],
        "edge_types": [{"name": et.name, "src": et.src, "dst": et.dst} for et in graph.schema.edge_types],
        "target_type": graph.target_type,
        "num_classes": int(graph.num_classes),
        "metapaths": [{"name": mp.name, "steps": [{"edge_type": e, "direction": s} for e, s in mp.steps]}
                      for mp in graph.metapaths],
    }
    (d / "schema.json").write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8")
    for nt in graph.schema.node_types:
        f = graph.features[nt.name]
        _write_tsv(d / f"nodes_{nt.name}.tsv", ([str(i)] + [_fmt(x) for x in row] for i, row in enumerate(f)))
    for et in graph.schema.edge_types:
        _write_tsv(d / f"edges_{et.name}.tsv", ([str(s), str(t)] for s, t in graph.edges[et.name]))
    if graph.labels is not None:
        _write_tsv(d / "labels.tsv", ([str(i), str(c)] for i, c in enumerate(graph.labels)))
    if graph.folds is not None:
        splits = {"folds": [[int(i) for i in f] for f in graph.folds]}
        (d / "splits.json").write_text(json.dumps(splits) + "\n", encoding="utf-8")


def load_dataset(directory, check=True):
    d = Path(directory)
    if not (d / "schema.json").is_file():
        raise GraphValidationError([f"{d}: missing schema.json"])
    raw = json.loads((d / "schema.json").read_text(encoding="utf-8"))
    schema = Schema(
        [NodeType(n["name"], int(n["feature_dim"])) for n in raw["node_types"]],
        [EdgeType(e["name"], e["src"], e["dst"]) for e in raw["edge_types"]],
    )
    problems = []
    features = {}
    for nt in schema.node_types:
        path = d / f"nodes_{nt.name}.tsv"
        if not path.is_file():
            problems.append(f"missing {path.name}")
            continue
        rows = _read_tsv(path)
        idx = [int(r[0]) for r in rows]
        if idx != list(range(len(rows))):
            problems.append(f"{path.name}: local indices must be 0..n-1 in order")
        mat = np.array([[float(x) for x in r[1:]] for r in rows], dtype=np.float64)
        features[nt.name] = mat.reshape(len(rows), -1) if rows else np.zeros((0, nt.feature_dim))
    edges = {}
    for et in schema.edge_types:
        path = d / f"edges_{et.name}.tsv"
        if not path.is_file():
            problems.append(f"missing {path.name}")
            continue
        rows = _read_tsv(path)
        edges[et.name] = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
    labels = None
    target = raw.get("target_type")
    if (d / "labels.tsv").is_file():
        rows = _read_tsv(d / "labels.tsv")
        n = len(features.get(target, ()))
        labels = np.full(max(n, len(rows)), -1, dtype=np.int64)
        for r in rows:
            labels[int(r[0])] = int(r[1])
    folds = None
    if (d / "splits.json").is_file():
        folds = json.loads((d / "splits.json").read_text(encoding="utf-8"))["folds"]
    metapaths = [Metapath(m["name"], [(s["edge_type"], s["direction"]) for s in m["steps"]])
                 for m in raw.get("metapaths", [])]
    if problems:
        raise GraphValidationError(problems)
    g = HeteroGraph(schema, features, edges, target, labels, int(raw.get("num_classes", 0)),
                    metapaths, folds)
    if check:
        validate(g)
    return g
