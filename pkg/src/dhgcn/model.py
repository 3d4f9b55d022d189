"""DHGCN forward pass (SEN aggregation + metapath attention convolutions) and an RGCN baseline."""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Activation, ParameterStore, Tensor
from .graph import DIRECTIONS, metapath_type_check
from .sampling import _prefix_union, build_batch
from .sen import derive_sen_template, sample_neighbors

VARIANTS = ("dhgcn-h", "dhgcn-s", "rgcn")
MAX_LAYERS = 4


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "dhgcn-h"
    layers: int = 1
    hidden_dim: int = 64
    activation: Activation = Activation.TANH
    leaky_slope: float = 0.01
    walks: int = 20
    fanout: int = 20
    self_term: bool = True

    def __post_init__(self):
        if isinstance(self.activation, str):
            self.activation = Activation.parse(self.activation)
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not 0 <= self.layers <= MAX_LAYERS:
            raise ModelConfigError(f"layers must be in 0..{MAX_LAYERS}, got {self.layers}")
        if self.variant == "rgcn" and self.layers < 1:
            raise ModelConfigError("rgcn needs at least one layer")
        if self.hidden_dim < 1:
            raise ModelConfigError("hidden_dim must be positive")

    def to_dict(self):
        return {"variant": self.variant, "layers": self.layers, "hidden_dim": self.hidden_dim,
                "activation": self.activation.value, "leaky_slope": self.leaky_slope,
                "walks": self.walks, "fanout": self.fanout, "self_term": self.self_term}


def _act(x, act, slope=0.01):
    return x if act is None else ad.activate(x, act, slope)


def _gather_const(matrix, idx):
    return Tensor(matrix[idx])


# ---------------------------------------------------------------------------
# step 1: SEN aggregation


def ha_aggregate(graph, sen, params, act=Activation.TANH, slope=0.01, prefix="step1.ha"):
    """Leaf-to-root hierarchical aggregation; returns one row per SEN root.

    Internal states get the non-linearity, the root does not.
    """
    tpl = sen.template
    h = {}
    for s in reversed(tpl.states):
        lvl = sen.levels[s.id]
        n = len(lvl.nodes)
        terms = []
        if n:
            terms.append(_gather_const(graph.features[s.node_type], lvl.nodes) @ params[f"{prefix}.tau.{s.node_type}"])
        for cid in tpl.children[s.id]:
            child = tpl.states[cid]
            if cid not in h:
                continue
            pooled = ad.segment_sum(h[cid], sen.levels[cid].parent_pos, n)
            terms.append(pooled @ params[f"{prefix}.phi.{child.edge_type}"])
        if not n:
            continue
        pre = ad.add_n(terms)
        h[s.id] = pre if s.is_root else _act(pre, act, slope)
    return h[0]


def sa_aggregate(graph, sen, params, prefix="step1.sa"):
    """Sum over all SEN occurrences of path-specific projections of type-projected features."""
    tpl = sen.template
    n_roots = len(sen.roots)
    terms = []
    for s in tpl.states:
        lvl = sen.levels[s.id]
        if not len(lvl.nodes):
            continue
        name = f"{prefix}.psi.{tpl.path_name(s.id)}"
        if name not in params:
            raise KeyError(f"unregistered SEN path {tpl.path_name(s.id)!r}")
        feats = graph.features[s.node_type][lvl.nodes]
        pooled = ad.scatter_rows(feats, lvl.root_pos, n_roots)
        terms.append((Tensor(pooled) @ params[f"{prefix}.tau.{s.node_type}"]) @ params[name])
    return ad.add_n(terms)


# ---------------------------------------------------------------------------
# step 2: metapath convolutions


def attention_logit(instance_middle_proj, h_src, h_dst, w_attn, act=Activation.TANH, slope=0.01):
    """``u = act(w_attn^T [h_src || middles || h_dst])`` for a single instance.

    ``instance_middle_proj`` is a list of 1 x d projected intermediate features.
    """
    parts = [h_src] + list(instance_middle_proj) + [h_dst]
    x = ad.concat(parts)
    if x.shape[1] != w_attn.shape[0]:
        raise ad.ShapeError(f"attention input width {x.shape[1]} != projection rows {w_attn.shape[0]}")
    return _act(x @ w_attn, act, slope)


def block_logits(graph, block, h_prev, w_attn, tau, d, act=Activation.TANH, slope=0.01):
    """Attention logits for every instance of a block, one n x 1 column.

    Same value as :func:`attention_logit` per row; the concatenation is split into
    per-slot products so each slot is projected once per distinct node.
    """
    slots = 2 + len(block.middle)
    if w_attn.shape[0] != slots * d:
        raise ad.ShapeError(f"attention projection has {w_attn.shape[0]} rows, expected {slots * d}")
    src_score = h_prev @ ad.index_rows(w_attn, np.arange(0, d))
    dst_score = h_prev @ ad.index_rows(w_attn, np.arange((slots - 1) * d, slots * d))
    terms = [ad.index_rows(src_score, block.src), ad.index_rows(dst_score, block.dst)]
    for j, (ntype, nodes) in enumerate(zip(block.middle_types, block.middle), start=1):
        uniq, inv = np.unique(nodes, return_inverse=True)
        proj = _gather_const(graph.features[ntype], uniq) @ tau[ntype]
        score = proj @ ad.index_rows(w_attn, np.arange(j * d, (j + 1) * d))
        terms.append(ad.index_rows(score, inv.reshape(-1)))
    return _act(ad.add_n(terms), act, slope)


def metapath_conv(h_prev, block, logits, n_dst):
    """Attention-weighted sum of source representations per destination; empty -> zero row."""
    q = ad.segment_softmax(logits, block.dst, n_dst)
    return ad.weighted_scatter(h_prev, block.src, block.dst, q, n_dst), q


def mix_metapaths(per_metapath, weights, act=Activation.TANH, slope=0.01, own=None):
    """``act(sum_m h_m W_m [+ own])``; ``own`` is the node's projected previous representation."""
    if len(per_metapath) != len(weights):
        raise ValueError(f"{len(per_metapath)} metapath inputs but {len(weights)} mixing matrices")
    terms = [h @ w for h, w in zip(per_metapath, weights)]
    if own is not None:
        terms.append(own)
    return _act(ad.add_n(terms), act, slope)


class DHGCN:
    """DHGCN-H / DHGCN-S node classifier for the graph's target type."""

    def __init__(self, graph, config, rng):
        if config.variant not in ("dhgcn-h", "dhgcn-s"):
            raise ModelConfigError(f"DHGCN does not implement variant {config.variant!r}")
        self.config = config
        self.template = derive_sen_template(graph.schema, graph.target_type)
        self.metapaths = list(graph.metapaths)
        self.metapath_len = [len(metapath_type_check(graph.schema, mp)) for mp in self.metapaths]
        self.num_classes = graph.num_classes
        self.params = ParameterStore()
        self.last_attention = {}
        self.last_coverage = {}
        d = config.hidden_dim
        dims = {nt.name: nt.feature_dim for nt in graph.schema.node_types}
        # every type used as an intermediate also needs an input projection
        needed = set(self.template.node_types())
        for mp in self.metapaths:
            needed.update(metapath_type_check(graph.schema, mp))
        p = self.params
        if config.variant == "dhgcn-h":
            self.prefix = "step1.ha"
            for t in sorted(needed):
                p.create(f"step1.ha.tau.{t}", (dims[t], d), rng)
            for e in self.template.edge_types():
                p.create(f"step1.ha.phi.{e}", (d, d), rng)
        else:
            self.prefix = "step1.sa"
            for t in sorted(needed):
                p.create(f"step1.sa.tau.{t}", (dims[t], d), rng)
            for s in self.template.states:
                p.create(f"step1.sa.psi.{self.template.path_name(s.id)}", (d, d), rng)
        for l in range(1, config.layers + 1):
            for mp, n in zip(self.metapaths, self.metapath_len):
                p.create(f"step2.attn.l{l}.{mp.name}", (n * d, 1), rng)
                p.create(f"step2.mix.l{l}.{mp.name}", (d, d), rng)
            if config.self_term:
                p.create(f"step2.self.l{l}", (d, d), rng)
        p.create("head", (d, graph.num_classes), rng)

    def tau(self):
        return {name.rsplit(".", 1)[1]: self.params[name]
                for name in self.params.names() if name.startswith(f"{self.prefix}.tau.")}

    def sample(self, graph, targets, rng):
        c = self.config
        return build_batch(graph, targets, c.layers, rng, walks=c.walks, fanout=c.fanout,
                           template=self.template)

    def step1(self, graph, sen):
        c = self.config
        if c.variant == "dhgcn-h":
            return ha_aggregate(graph, sen, self.params, c.activation, c.leaky_slope)
        return sa_aggregate(graph, sen, self.params)

    def embed(self, graph, batch):
        c = self.config
        if batch.layers != c.layers:
            raise ModelConfigError(f"batch built for {batch.layers} layers, model has {c.layers}")
        h = self.step1(graph, batch.sen)
        tau = self.tau()
        self.last_attention = {}
        self.last_coverage = {}
        for l in range(1, c.layers + 1):
            n_dst = len(batch.frontiers[l])
            per_mp, mixers = [], []
            for m, block in enumerate(batch.blocks[l - 1]):
                name = block.metapath.name
                logits = block_logits(graph, block, h, self.params[f"step2.attn.l{l}.{name}"], tau,
                                      c.hidden_dim, c.activation, c.leaky_slope)
                agg, q = metapath_conv(h, block, logits, n_dst)
                self.last_attention[(l, name)] = (q.data[:, 0], block.dst)
                self.last_coverage[(l, name)] = float(np.mean(np.bincount(block.dst, minlength=n_dst) == 0))
                per_mp.append(agg)
                mixers.append(self.params[f"step2.mix.l{l}.{name}"])
            own = None
            if c.self_term:
                own = ad.index_rows(h, np.arange(n_dst)) @ self.params[f"step2.self.l{l}"]
            h = mix_metapaths(per_mp, mixers, c.activation, c.leaky_slope, own)
        return ad.index_rows(h, np.arange(len(batch.targets)))

    def forward(self, graph, batch):
        """Class logits, one row per batch target."""
        return self.embed(graph, batch) @ self.params["head"]


# ---------------------------------------------------------------------------
# RGCN baseline


@dataclass
class RelationBlock:
    edge_type: str
    direction: str
    src_type: str
    dst_type: str
    dst: np.ndarray
    src: np.ndarray
    weight: np.ndarray  # n x 1 normalisation per message


@dataclass
class RgcnBatch:
    targets: np.ndarray
    frontiers: list  # frontiers[l] = {type: nodes}; frontiers[l][t] is a prefix of frontiers[l-1][t]
    blocks: list  # blocks[l - 1] = list of RelationBlock
    self_weight: list  # self_weight[l - 1] = {type: n x 1}
    meta: dict = field(default_factory=dict)

    @property
    def layers(self):
        return len(self.frontiers) - 1


def build_rgcn_batch(graph, targets, layers, rng, fanout=20):
    """One-hop typed neighbor sampling per layer, both directions of every relation.

    Messages are scaled by ``1/sqrt(|N(v)||N(u)|)`` using full-graph degrees with a
    self-loop, times ``deg_r(v)/sampled_r(v)`` so a capped neighborhood keeps its mass.
    """
    schema = graph.schema
    targets = np.asarray(targets, dtype=np.int64)
    norm_deg = {nt.name: graph.degree(nt.name) + 1.0 for nt in schema.node_types}
    frontiers = [{graph.target_type: targets}]
    blocks, self_weight = [], []
    for _ in range(layers):
        here = frontiers[0]
        sampled = []
        extra = {}
        for et in schema.edge_types:
            for direction in DIRECTIONS:
                frm, to = schema.step_types(et.name, direction)
                if frm not in here:
                    continue
                pos, nodes = sample_neighbors(graph, et.name, direction, here[frm], fanout, rng)
                sampled.append((et.name, direction, frm, to, pos, nodes))
                extra.setdefault(to, []).append(nodes)
        prev = {}
        for t in list(here) + [t for t in extra if t not in here]:
            base = here.get(t, np.zeros(0, dtype=np.int64))
            prev[t] = _prefix_union(base, np.concatenate(extra.get(t, [np.zeros(0, dtype=np.int64)])))
        layer_blocks = []
        for edge, direction, frm, to, pos, nodes in sampled:
            if not len(nodes):
                continue
            lookup = np.full(graph.num_nodes(to), -1, dtype=np.int64)
            lookup[prev[to]] = np.arange(len(prev[to]))
            indptr, _ = graph.adjacency(edge, direction)
            parents = here[frm]
            full = (indptr[parents + 1] - indptr[parents]).astype(np.float64)
            taken = np.bincount(pos, minlength=len(parents)).astype(np.float64)
            ratio = full[pos] / taken[pos]
            w = ratio / np.sqrt(norm_deg[frm][parents[pos]] * norm_deg[to][nodes])
            layer_blocks.append(RelationBlock(edge, direction, to, frm, pos, lookup[nodes], w[:, None]))
        blocks.insert(0, layer_blocks)
        self_weight.insert(0, {t: (1.0 / norm_deg[t][nodes])[:, None] for t, nodes in here.items()})
        frontiers.insert(0, prev)
    return RgcnBatch(targets, frontiers, blocks, self_weight)


class RGCN:
    def __init__(self, graph, config, rng):
        if config.variant != "rgcn":
            raise ModelConfigError(f"RGCN does not implement variant {config.variant!r}")
        self.config = config
        self.target_type = graph.target_type
        self.num_classes = graph.num_classes
        self.params = ParameterStore()
        d = config.hidden_dim
        p = self.params
        for nt in graph.schema.node_types:
            p.create(f"rgcn.tau.{nt.name}", (nt.feature_dim, d), rng)
        for l in range(1, config.layers + 1):
            for et in graph.schema.edge_types:
                for direction in DIRECTIONS:
                    p.create(f"rgcn.l{l}.{et.name}.{direction}", (d, d), rng)
            p.create(f"rgcn.l{l}.self", (d, d), rng)
        p.create("head", (d, graph.num_classes), rng)

    def sample(self, graph, targets, rng):
        return build_rgcn_batch(graph, targets, self.config.layers, rng, self.config.fanout)

    def embed(self, graph, batch):
        c = self.config
        if batch.layers != c.layers:
            raise ModelConfigError(f"batch built for {batch.layers} layers, model has {c.layers}")
        h = {t: _gather_const(graph.features[t], nodes) @ self.params[f"rgcn.tau.{t}"]
             for t, nodes in batch.frontiers[0].items()}
        for l in range(1, c.layers + 1):
            here = batch.frontiers[l]
            terms = {t: [] for t in here}
            for t, nodes in here.items():
                own = ad.index_rows(h[t], np.arange(len(nodes)))
                terms[t].append(ad.row_scale(own, Tensor(batch.self_weight[l - 1][t])) @ self.params[f"rgcn.l{l}.self"])
            for b in batch.blocks[l - 1]:
                pooled = ad.weighted_scatter(h[b.src_type], b.src, b.dst, Tensor(b.weight), len(here[b.dst_type]))
                terms[b.dst_type].append(pooled @ self.params[f"rgcn.l{l}.{b.edge_type}.{b.direction}"])
            h = {t: _act(ad.add_n(ts), c.activation, c.leaky_slope) for t, ts in terms.items()}
        return h[self.target_type]

    def forward(self, graph, batch):
        return self.embed(graph, batch) @ self.params["head"]


def build_model(graph, config, rng):
    if config.variant == "rgcn":
        return RGCN(graph, config, rng)
    return DHGCN(graph, config, rng)
