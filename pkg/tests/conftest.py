import numpy as np
import pytest

from dhgcn.gradcheck import toy_graph
from dhgcn.graph import EdgeType, NodeType, Schema


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if num < 1e-10 else num / den


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dblp_schema():
    return Schema(
        [NodeType("author", 3), NodeType("paper", 4), NodeType("term", 2), NodeType("venue", 2)],
        [EdgeType("writes", "author", "paper"), EdgeType("has_term", "paper", "term"),
         EdgeType("published_in", "paper", "venue")],
    )


def toy_dblp(seed=0):
    return toy_graph(seed)


@pytest.fixture
def dblp_graph():
    return toy_dblp()
