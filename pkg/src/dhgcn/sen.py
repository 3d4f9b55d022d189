"""Schema-derived ego-networks: the type-level template and its sampled instances."""
from dataclasses import dataclass

import numpy as np

from .graph import DIRECTIONS


@dataclass(frozen=True)
class SenState:
    id: int
    node_type: str
    edge_type: str = None  # None at the root
    direction: str = None
    parent: int = None
    used_edge_types: frozenset = frozenset()
    depth: int = 0

    @property
    def is_root(self):
        return self.parent is None


class SenTemplate:
    """Rooted tree of :class:`SenState`, stored in depth-first preorder."""

    def __init__(self, states):
        self.states = list(states)
        self.children = {s.id: [] for s in self.states}
        for s in self.states:
            if s.parent is not None:
                self.children[s.parent].append(s.id)

    @property
    def root(self):
        return self.states[0]

    def __len__(self):
        return len(self.states)

    def path(self, state_id):
        """States from the root down to ``state_id``."""
        out = []
        s = self.states[state_id]
        while s is not None:
            out.append(s)
            s = None if s.parent is None else self.states[s.parent]
        return out[::-1]

    def path_name(self, state_id):
        """Stable identifier of the root-to-state metapath, e.g. ``author>writes:f>paper``."""
        parts = []
        for s in self.path(state_id):
            if s.is_root:
                parts.append(s.node_type)
            else:
                parts.append(f"{s.edge_type}:{s.direction[0]}>{s.node_type}")
        return ">".join(parts)

    def node_types(self):
        return sorted({s.node_type for s in self.states})

    def edge_types(self):
        return sorted({s.edge_type for s in self.states if s.edge_type is not None})

    def compact(self, state_id=0):
        """Brace notation: ``Author{Paper{Term, Venue}}``."""
        s = self.states[state_id]
        kids = self.children[s.id]
        if not kids:
            return s.node_type
        return s.node_type + "{" + ", ".join(self.compact(k) for k in kids) + "}"

    def format(self):
        lines = []
        for s in self.states:
            pad = "  " * s.depth
            if s.is_root:
                lines.append(f"{s.node_type}  (target)")
            else:
                lines.append(f"{pad}{s.node_type}  [{s.edge_type}, {s.direction}]")
        return "\n".join(lines)


def derive_sen_template(schema, target_type):
    """Depth-first expansion from ``target_type`` never reusing an edge type on a path.

    A relation and its inverse count as the same edge type.
    """
    schema.node_type(target_type)
    states = []

    def expand(node_type, edge, direction, parent, used, depth):
        sid = len(states)
        states.append(SenState(sid, node_type, edge, direction, parent, used, depth))
        for et in schema.edge_types:
            if et.name in used:
                continue
            for direction in DIRECTIONS:
                frm, to = schema.step_types(et.name, direction)
                if frm == node_type:
                    expand(to, et.name, direction, sid, used | {et.name}, depth + 1)

    expand(target_type, None, None, None, frozenset(), 0)
    return SenTemplate(states)


def sample_neighbors(graph, edge_type, direction, parents, fanout, rng):
    """Up to ``fanout`` distinct neighbors of every node in ``parents``.

    Returns ``(parent_pos, nodes)``: ``nodes[i]`` is a neighbor of ``parents[parent_pos[i]]``.
    Neighborhoods no larger than ``fanout`` are taken whole in storage order; larger ones
    are subsampled uniformly without replacement.
    """
    if fanout < 1:
        raise ValueError(f"fanout must be >= 1, got {fanout}")
    indptr, indices = graph.adjacency(edge_type, direction)
    parents = np.asarray(parents, dtype=np.int64)
    start = indptr[parents]
    deg = indptr[parents + 1] - start
    total = int(deg.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    seg = np.repeat(np.arange(len(parents)), deg)
    first = np.concatenate([[0], np.cumsum(deg)[:-1]])
    within = np.arange(total) - first[seg]
    entries = start[seg] + within
    big = deg[seg] > fanout
    if not big.any():
        return seg, indices[entries]
    keys = within.astype(np.float64)
    keys[big] = rng.random(int(big.sum()))
    order = np.lexsort((keys, seg))
    rank = np.arange(total) - first[seg[order]]
    keep = order[rank < fanout]
    keep.sort()
    return seg[keep], indices[entries[keep]]


@dataclass
class SenLevel:
    """Occurrences of one template state: sampled graph nodes and their parent occurrence."""

    state: SenState
    nodes: np.ndarray
    parent_pos: np.ndarray  # index into the parent state's ``nodes``
    root_pos: np.ndarray  # index into the roots


@dataclass
class SenSample:
    """Sampled SEN trees for a list of root nodes, flattened per template state."""

    template: SenTemplate
    roots: np.ndarray
    levels: list  # SenLevel per template state, preorder; levels[0] is the roots

    def children_of(self, state_id, occurrence):
        """``{child_state_id: [graph nodes]}`` under one occurrence of ``state_id``."""
        out = {}
        for cid in self.template.children[state_id]:
            lvl = self.levels[cid]
            out[cid] = lvl.nodes[lvl.parent_pos == occurrence].tolist()
        return out

    def tree(self, root_pos=0):
        """Nested ``(node_type, node, [children])`` tuples for one root, for inspection."""

        def build(state_id, occ):
            lvl = self.levels[state_id]
            kids = []
            for cid in self.template.children[state_id]:
                clvl = self.levels[cid]
                for j in np.flatnonzero(clvl.parent_pos == occ):
                    kids.append(build(cid, j))
            return (lvl.state.node_type, int(lvl.nodes[occ]), kids)

        return build(0, root_pos)


def sample_sen(graph, template, roots, fanout, rng):
    """Instantiate the template below every node in ``roots`` (all of the root type)."""
    roots = np.asarray(roots, dtype=np.int64)
    n = len(roots)
    levels = [SenLevel(template.root, roots, np.full(n, -1, dtype=np.int64), np.arange(n))]
    for s in template.states[1:]:
        parent = levels[s.parent]
        pos, nodes = sample_neighbors(graph, s.edge_type, s.direction, parent.nodes, fanout, rng)
        levels.append(SenLevel(s, nodes, pos, parent.root_pos[pos]))
    return SenSample(template, roots, levels)


def instantiate_sen(graph, template, a, fanout, rng):
    """Sampled SEN for a single target node ``a`` (local index of the template's root type)."""
    return sample_sen(graph, template, [a], fanout, rng)
