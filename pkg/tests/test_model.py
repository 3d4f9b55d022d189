import math

import numpy as np
import pytest

from dhgcn import autodiff as ad
from dhgcn.autodiff import Activation, Parameter, ParameterStore, Tensor
from dhgcn.graph import EdgeType, HeteroGraph, NodeType, Schema
from dhgcn.model import (ModelConfig, ModelConfigError, attention_logit, block_logits, build_model,
                         ha_aggregate, metapath_conv, mix_metapaths, sa_aggregate)
from dhgcn.sampling import MetapathBlock
from dhgcn.sen import derive_sen_template, sample_sen
from dhgcn.synthetic import SynthConfig, generate

from .conftest import numeric_grad, rel_err, toy_dblp


def _store(**values):
    store = ParameterStore()
    for name, v in values.items():
        store.add(Parameter(name.replace("__", "."), np.atleast_2d(np.asarray(v, dtype=np.float64))))
    return store


def _two_level(fa=1.0, fc=2.0):
    s = Schema([NodeType("A", 1), NodeType("C", 1)], [EdgeType("e", "A", "C")])
    g = HeteroGraph(s, {"A": np.array([[fa]]), "C": np.array([[fc]])}, {"e": [(0, 0)]}, "A", [0], 2)
    sen = sample_sen(g, derive_sen_template(s, "A"), [0], 20, np.random.default_rng(0))
    return g, sen


def test_ha_scalar_hand_case():
    g, sen = _two_level()
    p = _store(**{"step1.ha.tau.A": 3.0, "step1.ha.tau.C": 4.0, "step1.ha.phi.e": 5.0})
    z = ha_aggregate(g, sen, p, Activation.TANH)
    assert float(z.data[0, 0]) == pytest.approx(3 + 5 * math.tanh(8), abs=1e-12)
    assert float(z.data[0, 0]) == pytest.approx(7.9999989, abs=1e-6)


def test_ha_degenerate_cases():
    g, sen = _two_level()
    zero = _store(**{"step1.ha.tau.A": 0.0, "step1.ha.tau.C": 0.0, "step1.ha.phi.e": 0.0})
    assert ha_aggregate(g, sen, zero).data.tolist() == [[0.0]]
    s = Schema([NodeType("A", 3)], [])
    f = np.array([[0.5, -1.0, 2.0]])
    lone = HeteroGraph(s, {"A": f}, {}, "A", [0], 2)
    sen = sample_sen(lone, derive_sen_template(s, "A"), [0], 20, np.random.default_rng(0))
    p = ParameterStore()
    p.add(Parameter("step1.ha.tau.A", np.eye(3)))
    np.testing.assert_array_equal(ha_aggregate(lone, sen, p).data, f)


def test_sa_scalar_cases():
    g, sen = _two_level()
    p = _store(**{"step1.sa.tau.A": 3.0, "step1.sa.tau.C": 4.0,
                  "step1.sa.psi.A": 0.5, "step1.sa.psi.A>e:f>C": 5.0})
    # 1*3*0.5 + 2*4*5
    assert float(sa_aggregate(g, sen, p).data[0, 0]) == pytest.approx(41.5, abs=1e-12)
    for name in list(p.names()):
        p[name].data[...] = 0
    assert sa_aggregate(g, sen, p).data.tolist() == [[0.0]]


def test_sa_equals_linear_ha_on_depth_one_schema(rng):
    g, _ = generate(SynthConfig(family=3, n_targets=25, feature_dim=10, seed=2))
    tpl = derive_sen_template(g.schema, "target")
    sen = sample_sen(g, tpl, np.arange(25), 4, rng)
    ha, sa = ParameterStore(), ParameterStore()
    for t in tpl.node_types():
        w = rng.normal(size=(10, 3))
        ha.add(Parameter(f"step1.ha.tau.{t}", w))
        sa.add(Parameter(f"step1.sa.tau.{t}", w))
    sa.add(Parameter(f"step1.sa.psi.{tpl.path_name(0)}", np.eye(3)))
    for s in tpl.states[1:]:
        w = rng.normal(size=(3, 3))
        ha.add(Parameter(f"step1.ha.phi.{s.edge_type}", w))
        sa.add(Parameter(f"step1.sa.psi.{tpl.path_name(s.id)}", w))
    np.testing.assert_allclose(ha_aggregate(g, sen, ha, act=None).data, sa_aggregate(g, sen, sa).data,
                               rtol=0, atol=1e-12)


def test_attention_logit_cases():
    u = attention_logit([], Tensor([[0.5]]), Tensor([[0.25]]), Tensor([[1.0], [1.0]]))
    assert float(u.data[0, 0]) == pytest.approx(math.tanh(0.75), abs=1e-15)
    assert float(u.data[0, 0]) == pytest.approx(0.63514, abs=1e-5)
    zero = attention_logit([Tensor([[3.0]])], Tensor([[1.0]]), Tensor([[2.0]]), Tensor(np.zeros((3, 1))))
    assert zero.data.tolist() == [[0.0]]
    with pytest.raises(ad.ShapeError):
        attention_logit([], Tensor([[1.0]]), Tensor([[1.0]]), Tensor(np.zeros((3, 1))))


def test_block_logits_match_literal_concatenation(dblp_graph, rng):
    d = 3
    g = dblp_graph
    tau = {t: Tensor(rng.normal(size=(g.schema.node_type(t).feature_dim, d))) for t in ("paper", "venue")}
    h = Tensor(rng.normal(size=(4, d)))
    w = Tensor(rng.normal(size=(5 * d, 1)))
    block = MetapathBlock(g.metapaths[1], np.array([0, 0, 1]), np.array([2, 3, 1]),
                          [np.array([0, 3, 1]), np.array([0, 0, 0]), np.array([1, 3, 2])],
                          ["paper", "venue", "paper"])
    got = block_logits(g, block, h, w, tau, d).data[:, 0]
    for i in range(3):
        mids = [Tensor(g.features[t][[m[i]]]) @ tau[t] for t, m in zip(block.middle_types, block.middle)]
        want = attention_logit(mids, Tensor(h.data[[block.src[i]]]), Tensor(h.data[[block.dst[i]]]), w)
        assert got[i] == pytest.approx(float(want.data[0, 0]), abs=1e-13)


def _block(dst, src):
    return MetapathBlock(None, np.array(dst), np.array(src), [], [])


def test_metapath_conv_cases():
    h = Tensor([[1.0, 2.0], [3.0, 6.0], [5.0, -1.0]])
    agg, q = metapath_conv(h, _block([0, 0, 0], [0, 1, 2]), Tensor(np.zeros((3, 1))), 2)
    np.testing.assert_allclose(agg.data[0], h.data.mean(axis=0), atol=1e-15)
    assert agg.data[1].tolist() == [0.0, 0.0]
    agg, _ = metapath_conv(h, _block([1], [2]), Tensor([[7.0]]), 2)
    assert agg.data[1].tolist() == [5.0, -1.0]
    logits = Tensor([[0.0], [math.log(2)], [math.log(3)]])
    agg, q = metapath_conv(h, _block([0, 0, 0], [0, 1, 2]), logits, 1)
    np.testing.assert_allclose(q.data[:, 0], [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    np.testing.assert_allclose(agg.data[0], [(1 + 6 + 15) / 6, (2 + 12 - 3) / 6], atol=1e-14)


def test_mix_cases():
    x = Tensor([[0.5, 2.0]])
    assert mix_metapaths([x], [Tensor(np.eye(2))], Activation.RELU).data.tolist() == [[0.5, 2.0]]
    assert mix_metapaths([Tensor([[0.0]])], [Tensor([[3.0]])]).data.tolist() == [[0.0]]
    out = mix_metapaths([Tensor([[0.2]]), Tensor([[-0.4]])], [Tensor([[1.5]]), Tensor([[0.5]])])
    assert float(out.data[0, 0]) == pytest.approx(math.tanh(0.3 - 0.2), abs=1e-15)
    with pytest.raises(ValueError):
        mix_metapaths([x], [])


def test_config_validation():
    with pytest.raises(ModelConfigError, match="dhgcn-h, dhgcn-s, rgcn"):
        ModelConfig(variant="dhgcn-x")
    with pytest.raises(ModelConfigError):
        ModelConfig(layers=5)
    with pytest.raises(ModelConfigError):
        ModelConfig(variant="rgcn", layers=0)
    assert ModelConfig(activation="relu").activation is Activation.RELU


def _model(graph, variant="dhgcn-h", layers=1, d=4, seed=0, **kw):
    return build_model(graph, ModelConfig(variant=variant, layers=layers, hidden_dim=d, **kw),
                       np.random.default_rng(seed))


def test_zero_layer_forward_is_head_of_sen(dblp_graph, rng):
    m = _model(dblp_graph, layers=0)
    batch = m.sample(dblp_graph, np.array([0, 2]), rng)
    z = ha_aggregate(dblp_graph, batch.sen, m.params)
    np.testing.assert_array_equal(m.forward(dblp_graph, batch).data, (z @ m.params["head"]).data)


def test_zero_step2_gives_uniform_predictions(dblp_graph, rng):
    m = _model(dblp_graph, layers=2)
    for name in m.params.names():
        if name.startswith("step2."):
            m.params[name].data[...] = 0
    logits = m.forward(dblp_graph, m.sample(dblp_graph, np.arange(3), rng)).data
    assert np.all(logits == 0)


def _straight_line_dhgcn_h(graph, model, batch):
    """Per-node loop evaluation of a 1-layer DHGCN-H with self term."""
    p = {n: model.params[n].data for n in model.params.names()}
    tpl, sen = batch.sen.template, batch.sen
    f = graph.features

    def ha(state_id, occ):
        s = tpl.states[state_id]
        total = f[s.node_type][sen.levels[state_id].nodes[occ]] @ p[f"step1.ha.tau.{s.node_type}"]
        for cid in tpl.children[state_id]:
            child = tpl.states[cid]
            for j in np.flatnonzero(sen.levels[cid].parent_pos == occ):
                total = total + ha(cid, j) @ p[f"step1.ha.phi.{child.edge_type}"]
        return total if s.is_root else np.tanh(total)

    z = np.stack([ha(0, i) for i in range(len(batch.frontiers[0]))])
    out = []
    for v in range(len(batch.targets)):
        acc = z[v] @ p["step2.self.l1"]
        for block in batch.blocks[0]:
            name = block.metapath.name
            rows = np.flatnonzero(block.dst == v)
            if not len(rows):
                continue
            us, srcs = [], []
            for i in rows:
                mids = [f[t][m[i]] @ p[f"step1.ha.tau.{t}"] for t, m in zip(block.middle_types, block.middle)]
                x = np.concatenate([z[block.src[i]]] + mids + [z[v]])
                us.append(np.tanh(x @ p[f"step2.attn.l1.{name}"][:, 0]))
                srcs.append(z[block.src[i]])
            q = np.exp(us) / np.sum(np.exp(us))
            acc = acc + (q @ np.array(srcs)) @ p[f"step2.mix.l1.{name}"]
        out.append(np.tanh(acc) @ p["head"])
    return np.array(out)


def test_one_layer_forward_matches_straight_line(dblp_graph, rng):
    m = _model(dblp_graph, layers=1, d=3)
    batch = m.sample(dblp_graph, np.array([0, 1, 2]), rng)
    np.testing.assert_allclose(m.forward(dblp_graph, batch).data,
                               _straight_line_dhgcn_h(dblp_graph, m, batch), rtol=0, atol=1e-12)


def _synthetic(n=60, family=2, seed=0):
    g, _ = generate(SynthConfig(family=family, n_targets=n, feature_dim=10, seed=seed))
    return g


def test_attention_is_a_distribution():
    g = _synthetic()
    m = _model(g, layers=2, d=5)
    m.forward(g, m.sample(g, np.arange(10), np.random.default_rng(1)))
    for q, dst in m.last_attention.values():
        assert np.all(q >= 0)
        sums = np.bincount(dst, weights=q)
        np.testing.assert_allclose(sums[np.bincount(dst) > 0], 1.0, atol=1e-12)


def test_instance_order_does_not_matter(rng):
    g = _synthetic()
    m = _model(g, layers=1, d=5)
    batch = m.sample(g, np.arange(8), rng)
    before = m.forward(g, batch).data
    for b in batch.blocks[0]:
        perm = rng.permutation(len(b.dst))
        b.dst, b.src = b.dst[perm], b.src[perm]
        b.middle = [x[perm] for x in b.middle]
    for lvl in batch.sen.levels[1:]:
        perm = rng.permutation(len(lvl.nodes))
        lvl.nodes, lvl.parent_pos, lvl.root_pos = lvl.nodes[perm], lvl.parent_pos[perm], lvl.root_pos[perm]
    np.testing.assert_allclose(m.forward(g, batch).data, before, rtol=0, atol=1e-12)


def test_batch_layer_mismatch(dblp_graph, rng):
    m1, m2 = _model(dblp_graph, layers=1), _model(dblp_graph, layers=2)
    with pytest.raises(ModelConfigError):
        m1.forward(dblp_graph, m2.sample(dblp_graph, np.arange(3), rng))


def _info_of(graph, target):
    e = graph.edges["has_info"]
    return e[e[:, 0] == target, 1]


def _receptive_field_case(layers):
    g = _synthetic(n=80, family=2, seed=4)
    m = _model(g, layers=layers, d=4, seed=1)
    target = np.array([0])
    batch = m.sample(g, target, np.random.default_rng(5))
    base = m.forward(g, batch).data.copy()
    in_batch = set(batch.frontiers[0].tolist())
    return g, m, target, batch, base, in_batch


@pytest.mark.parametrize("layers", [1, 2])
def test_receptive_field(layers):
    g, m, target, batch, base, in_batch = _receptive_field_case(layers)
    far = [t for t in batch.frontiers[0].tolist() if t not in batch.frontiers[1].tolist()]
    assert far, "expected targets reached only through the deepest layer"
    # an info node hanging off the farthest frontier: 3 hops for one layer, 5 for two
    sen_info = batch.sen.levels[1]
    info = sen_info.nodes[np.isin(batch.frontiers[0][sen_info.root_pos], far)][0]
    g.features["info"][info] += 1.0
    changed = m.forward(g, batch).data
    assert np.any(changed != base)
    g.features["info"][info] -= 1.0
    outside = [t for t in range(g.num_nodes("target")) if t not in in_batch]
    for t in outside[:5]:
        for i in _info_of(g, t):
            g.features["info"][i] += 100.0
        g.features["target"][t] += 100.0
    assert m.forward(g, batch).data.tobytes() == base.tobytes()


def test_rgcn_isolated_self_loop_nodes():
    s = Schema([NodeType("n", 1)], [EdgeType("e", "n", "n")])
    g = HeteroGraph(s, {"n": np.array([[0.3], [-1.2]])}, {"e": np.zeros((0, 2), dtype=int)}, "n", [0, 1], 2)
    m = _model(g, variant="rgcn", layers=1, d=1)
    for name in m.params.names():
        m.params[name].data[...] = 1.0
    emb = m.embed(g, m.sample(g, np.array([0, 1]), np.random.default_rng(0))).data
    np.testing.assert_allclose(emb[:, 0], np.tanh([0.3, -1.2]), atol=1e-15)


def test_rgcn_path_normalisation():
    # 0 -e-> 1 -e-> 2; node 1 has degree 2, the ends degree 1 (plus self-loop each)
    s = Schema([NodeType("n", 1)], [EdgeType("e", "n", "n")])
    f = np.array([[0.7], [0.2], [-0.5]])
    g = HeteroGraph(s, {"n": f}, {"e": [(0, 1), (1, 2)]}, "n", [0, 1, 0], 2)
    m = _model(g, variant="rgcn", layers=1, d=1)
    vals = {"rgcn.tau.n": 1.0, "rgcn.l1.e.forward": 2.0, "rgcn.l1.e.reverse": -3.0, "rgcn.l1.self": 0.5}
    for name, v in vals.items():
        m.params[name].data[...] = v
    emb = m.embed(g, m.sample(g, np.array([1]), np.random.default_rng(0))).data
    want = math.tanh(0.5 * 0.2 / 3 + 2.0 * -0.5 / math.sqrt(3 * 2) + -3.0 * 0.7 / math.sqrt(3 * 2))
    assert emb[0, 0] == pytest.approx(want, abs=1e-15)


def test_rgcn_zero_weights_give_uniform_predictions(dblp_graph, rng):
    m = _model(dblp_graph, variant="rgcn", layers=2)
    for name in m.params.names():
        m.params[name].data[...] = 0
    assert np.all(m.forward(dblp_graph, m.sample(dblp_graph, np.arange(3), rng)).data == 0)


@pytest.mark.parametrize("variant,layers", [("dhgcn-h", 2), ("dhgcn-s", 2), ("rgcn", 2), ("dhgcn-h", 0)])
def test_full_model_gradients(variant, layers):
    g = toy_dblp(1)
    m = _model(g, variant=variant, layers=layers, d=3, seed=2)
    batch = m.sample(g, np.array([0, 1, 2]), np.random.default_rng(3))
    labels = g.labels[batch.targets]

    def loss():
        return ad.nll_of_logsoftmax(m.forward(g, batch), labels)

    ad.backward(loss())
    for p in m.params:
        num = numeric_grad(lambda: float(loss().data), p.data)
        assert rel_err(p.grad, num) < 1e-4, p.name
