import numpy as np
import pytest

from dhgcn.graph import FORWARD, REVERSE, EdgeType, HeteroGraph, Metapath, NodeType, Schema, neighbors
from dhgcn.sampling import SamplingConfigError, build_batch, sample_instances, sample_walks


def _apa_graph(edges, n_authors, n_papers):
    s = Schema([NodeType("author", 2), NodeType("paper", 2)], [EdgeType("writes", "author", "paper")])
    mp = Metapath("APA", [("writes", FORWARD), ("writes", REVERSE)])
    return HeteroGraph(s, {"author": np.zeros((n_authors, 2)), "paper": np.zeros((n_papers, 2))},
                       {"writes": edges}, "author", np.zeros(n_authors, dtype=int), 2, [mp])


def test_unique_walk_is_reversed_path():
    # a -> p -> b is the only walk from a; stored source-first it reads [b, p, a]
    g = _apa_graph([(0, 0), (1, 0)], 2, 1)
    s = Schema([NodeType("author", 2), NodeType("paper", 2), NodeType("venue", 2)],
               [EdgeType("writes", "author", "paper"), EdgeType("at", "paper", "venue")])
    mp = Metapath("APV", [("writes", FORWARD), ("at", FORWARD)])
    g2 = HeteroGraph(s, {"author": np.zeros((1, 2)), "paper": np.zeros((1, 2)), "venue": np.zeros((1, 2))},
                     {"writes": [(0, 0)], "at": [(0, 0)]})
    _, paths, dropped = sample_walks(g2, mp, [0], 5, np.random.default_rng(0))
    assert dropped == 0 and paths.tolist() == [[0, 0, 0]] * 5
    inst = sample_instances(g, g.metapaths[0], 0, 40, np.random.default_rng(1))
    assert set(map(tuple, inst.instances.tolist())) == {(0, 0, 0), (1, 0, 0)}


def test_isolated_node_has_no_instances():
    g = _apa_graph([(0, 0)], 2, 1)
    inst = sample_instances(g, g.metapaths[0], 1, 20, np.random.default_rng(0))
    assert inst.instances.shape == (0, 3) and inst.discarded == 20


def test_star_walks_split_evenly():
    # author 0 wrote paper 0 with co-author 1; both endpoints equally likely
    g = _apa_graph([(0, 0), (1, 0)], 2, 1)
    walks = 4000
    _, paths, _ = sample_walks(g, g.metapaths[0], [0], walks, np.random.default_rng(3))
    ones = int((paths[:, 0] == 1).sum())
    assert abs(ones - walks / 2) < 3 * np.sqrt(walks / 4)


def test_walk_conservation(rng):
    edges = [(int(a), int(p)) for a, p in zip(rng.integers(0, 20, 25), rng.integers(0, 15, 25))]
    g = _apa_graph(edges, 25, 15)
    starts = np.arange(25)
    pos, paths, dropped = sample_walks(g, g.metapaths[0], starts, 7, rng)
    assert len(paths) + dropped == 25 * 7
    for row in paths:
        b, p, a = (int(x) for x in row)
        assert p in neighbors(g, ("author", a), "writes", FORWARD)
        assert b in neighbors(g, ("paper", p), "writes", REVERSE)


def test_non_same_type_metapath_rejected():
    g = _apa_graph([(0, 0)], 1, 1)
    g.metapaths = [Metapath("AP", [("writes", FORWARD)])]
    with pytest.raises(SamplingConfigError, match="same-type"):
        build_batch(g, [0], 1, np.random.default_rng(0))
    with pytest.raises(SamplingConfigError):
        sample_walks(g, g.metapaths[0], [0], 0, np.random.default_rng(0))


def _chain(n):
    # authors i and i+1 share paper i
    edges = [(i, i) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)]
    return _apa_graph(edges, n, n - 1)


@pytest.mark.parametrize("layers", [0, 1, 2])
def test_frontier_is_metapath_ball(layers):
    g = _chain(12)
    batch = build_batch(g, [5], layers, np.random.default_rng(0), walks=200)
    assert sorted(batch.frontiers[0].tolist()) == list(range(5 - layers, 5 + layers + 1))
    assert batch.frontiers[-1].tolist() == [5]


def test_frontiers_are_prefixes_and_blocks_close(rng):
    g = _chain(30)
    batch = build_batch(g, [3, 17, 9], 3, rng, walks=5)
    for l in range(1, batch.layers + 1):
        here, prev = batch.frontiers[l], batch.frontiers[l - 1]
        assert np.array_equal(prev[:len(here)], here)
        assert len(np.unique(prev)) == len(prev)
        for b in batch.blocks[l - 1]:
            assert b.dst.min() >= 0 and b.dst.max() < len(here)
            assert b.src.min() >= 0 and b.src.max() < len(prev)
            for i in range(len(b.dst)):
                a, p, src = int(here[b.dst[i]]), int(b.middle[0][i]), int(prev[b.src[i]])
                assert p in neighbors(g, ("author", a), "writes", FORWARD)
                assert src in neighbors(g, ("paper", p), "writes", REVERSE)
    assert batch.walks_done == len(batch.frontiers[1]) * 5


def test_batch_is_deterministic():
    g = _chain(30)
    a = build_batch(g, [3, 17], 2, np.random.default_rng(9), walks=3, fanout=2)
    b = build_batch(g, [3, 17], 2, np.random.default_rng(9), walks=3, fanout=2)
    assert a.dump(g) == b.dump(g)
    assert "layer 1 metapath APA" in a.dump(g)


def test_empty_targets_rejected():
    with pytest.raises(SamplingConfigError):
        build_batch(_chain(3), [], 1, np.random.default_rng(0))
