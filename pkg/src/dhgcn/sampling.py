"""Random-walk sampling of same-type metapath instances and multi-layer mini-batches."""
from dataclasses import dataclass, field

import numpy as np

from .graph import metapath_type_check
from .sen import derive_sen_template, sample_sen


class SamplingConfigError(ValueError):
    pass


@dataclass
class MetapathInstanceSet:
    """Instances for one destination node, each row read source -> ... -> destination."""

    node: int
    metapath: object
    instances: np.ndarray  # (n x |p|) local indices, column j has the j-th node type
    discarded: int = 0


def _check_same_type(graph, metapath):
    types = metapath_type_check(graph.schema, metapath)
    if types[0] != types[-1]:
        raise SamplingConfigError(
            f"metapath {metapath.name!r} is not same-type: {types[0]} ... {types[-1]}")
    return types


def sample_walks(graph, metapath, starts, walks, rng):
    """``walks`` uniform random walks along ``metapath`` from every node in ``starts``.

    Returns ``(start_pos, paths, discarded)``. ``paths`` rows are reversed walks, so the
    last column is the start node; walks hitting a dead end are dropped.
    """
    if walks < 1:
        raise SamplingConfigError(f"walks must be >= 1, got {walks}")
    starts = np.asarray(starts, dtype=np.int64)
    start_pos = np.repeat(np.arange(len(starts)), walks)
    cur = starts[start_pos]
    trail = [cur]
    alive = np.ones(len(cur), dtype=bool)
    for edge, direction in metapath.steps:
        indptr, indices = graph.adjacency(edge, direction)
        if len(indptr) == 1 or not len(indices):
            alive[:] = False
            cur = np.zeros_like(cur)
        else:
            cur = np.minimum(cur, len(indptr) - 2)
            deg = indptr[cur + 1] - indptr[cur]
            alive &= deg > 0
            pick = np.floor(rng.random(len(cur)) * np.maximum(deg, 1)).astype(np.int64)
            cur = np.where(alive, indices[np.minimum(indptr[cur] + pick, len(indices) - 1)], 0)
        trail.append(cur)
    paths = np.stack(trail[::-1], axis=1)[alive]
    return start_pos[alive], paths, int((~alive).sum())


def sample_instances(graph, metapath, v, walks, rng):
    """Metapath instances ending at target node ``v``."""
    types = _check_same_type(graph, metapath)
    if graph.target_type is not None and types[0] != graph.target_type:
        raise SamplingConfigError(f"metapath {metapath.name!r} does not start at {graph.target_type!r}")
    _, paths, dropped = sample_walks(graph, metapath, [v], walks, rng)
    return MetapathInstanceSet(int(v), metapath, paths, dropped)


@dataclass
class MetapathBlock:
    """Instances of one metapath feeding layer ``l``.

    ``dst`` indexes the layer-l frontier, ``src`` the layer-(l-1) frontier; ``middle``
    holds one array per intermediate slot with local node indices of that slot's type.
    """

    metapath: object
    dst: np.ndarray
    src: np.ndarray
    middle: list
    middle_types: list


@dataclass
class Batch:
    targets: np.ndarray
    frontiers: list  # frontiers[l] = F_l; F_k == targets; F_l is a prefix of F_{l-1}
    blocks: list  # blocks[l - 1][m] feeds layer l
    sen: object = None
    walks_done: int = 0
    walks_discarded: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def layers(self):
        return len(self.frontiers) - 1

    def dump(self, graph):
        lines = [f"layers={self.layers} targets={self.targets.tolist()}"]
        for l, f in enumerate(self.frontiers):
            lines.append(f"F{l} ({len(f)} nodes): {f.tolist()}")
        for l, blocks in enumerate(self.blocks, start=1):
            for b in blocks:
                lines.append(f"layer {l} metapath {b.metapath.name}: {len(b.dst)} instances")
                prev, here = self.frontiers[l - 1], self.frontiers[l]
                for i in range(len(b.dst)):
                    mid = [f"{t}:{int(m[i])}" for t, m in zip(b.middle_types, b.middle)]
                    lines.append(f"  {int(prev[b.src[i]])} -> {' -> '.join(mid)} -> {int(here[b.dst[i]])}")
        if self.sen is not None:
            for lvl in self.sen.levels[1:]:
                lines.append(f"SEN {lvl.state.node_type} via {lvl.state.edge_type}: {len(lvl.nodes)} occurrences")
        return "\n".join(lines)


def _prefix_union(prefix, extra):
    extra = np.unique(extra)
    return np.concatenate([prefix, extra[~np.isin(extra, prefix)]]).astype(np.int64)


class WalkPool:
    """One sample set per (node, metapath), reused across layers within a batch."""

    def __init__(self, graph, metapaths, walks, rng):
        self.graph = graph
        self.metapaths = metapaths
        self.walks = walks
        self.rng = rng
        self.sampled = np.zeros(graph.num_nodes(graph.target_type), dtype=bool)
        self.starts = [[] for _ in metapaths]
        self.paths = [[] for _ in metapaths]
        self.done = 0
        self.discarded = 0

    def ensure(self, nodes):
        new = nodes[~self.sampled[nodes]]
        new = np.unique(new)
        if not len(new):
            return
        self.sampled[new] = True
        for m, mp in enumerate(self.metapaths):
            pos, paths, dropped = sample_walks(self.graph, mp, new, self.walks, self.rng)
            self.starts[m].append(new[pos])
            self.paths[m].append(paths)
            self.done += len(new) * self.walks
            self.discarded += dropped

    def rows(self, m):
        if not self.starts[m]:
            n = len(self.metapaths[m])
            return np.zeros(0, dtype=np.int64), np.zeros((0, n), dtype=np.int64)
        return np.concatenate(self.starts[m]), np.concatenate(self.paths[m])


def build_batch(graph, targets, layers, rng, walks=20, fanout=20, template=None, with_sen=True):
    """Expand frontiers from the targets down through ``layers`` metapath layers.

    Deterministic for a given ``rng`` state.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if not len(targets):
        raise SamplingConfigError("build_batch needs at least one target")
    metapaths = list(graph.metapaths)
    types = [_check_same_type(graph, mp) for mp in metapaths]
    for mp, t in zip(metapaths, types):
        if t[0] != graph.target_type:
            raise SamplingConfigError(f"metapath {mp.name!r} does not start at {graph.target_type!r}")
    pool = WalkPool(graph, metapaths, walks, rng)
    frontiers = [targets]
    blocks = []
    n_target = graph.num_nodes(graph.target_type)
    for _ in range(layers):
        here = frontiers[0]
        pool.ensure(here)
        pos_here = np.full(n_target, -1, dtype=np.int64)
        pos_here[here] = np.arange(len(here))
        raw = []
        sources = []
        for m, mp in enumerate(metapaths):
            starts, paths = pool.rows(m)
            sel = pos_here[starts] >= 0
            raw.append((pos_here[starts[sel]], paths[sel]))
            sources.append(paths[sel, 0])
        prev = _prefix_union(here, np.concatenate(sources) if sources else np.zeros(0, dtype=np.int64))
        pos_prev = np.full(n_target, -1, dtype=np.int64)
        pos_prev[prev] = np.arange(len(prev))
        layer_blocks = []
        for mp, t, (dst, paths) in zip(metapaths, types, raw):
            # instance columns follow the reversed walk, so node types are reversed too
            rtypes = t[::-1]
            layer_blocks.append(MetapathBlock(
                mp, dst, pos_prev[paths[:, 0]],
                [paths[:, j] for j in range(1, paths.shape[1] - 1)], rtypes[1:-1]))
        blocks.insert(0, layer_blocks)
        frontiers.insert(0, prev)
    sen = None
    if with_sen:
        template = template or derive_sen_template(graph.schema, graph.target_type)
        sen = sample_sen(graph, template, frontiers[0], fanout, rng)
    return Batch(targets, frontiers, blocks, sen, pool.done, pool.discarded)
