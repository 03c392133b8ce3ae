import numpy as np
import pytest
from hypothesis import settings

from boxdiff.treepart import SplitTree, Node

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_tree(rng: np.random.Generator, splits: int) -> SplitTree:
    """Random valid tree built by repeatedly splitting a random leaf."""
    from boxdiff.treepart import leaves

    t = SplitTree([Node(1)])
    for _ in range(splits):
        q = leaves(t)
        k = int(rng.integers(len(q)))
        b, nid = q.leaves[k], q.leaf_nodes[k]
        axis = "x" if rng.random() < 0.5 else "y"
        lo, hi = (b.xlo, b.xhi) if axis == "x" else (b.ylo, b.yhi)
        thr = lo + (hi - lo) * rng.uniform(0.05, 0.95)
        if lo < thr < hi:
            t = t.extend(nid, axis, thr)
    return t


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
