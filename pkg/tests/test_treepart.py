import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from boxdiff.boxgeom import UNIT_BOX, BasicBox, area, contains, diameter
from boxdiff.treepart import (
    Node,
    SplitTree,
    TreeStructureError,
    build_enclosing_partition,
    dumps_tree,
    enclosing_norm,
    leaves,
    loads_tree,
    locate,
    norm,
    validate,
)

from conftest import random_tree


def quadrants() -> SplitTree:
    return SplitTree([
        Node(1, "x", 0.5, 2, 3),
        Node(2, "y", 0.5, 4, 5),
        Node(3, "y", 0.5, 6, 7),
        Node(4), Node(5), Node(6), Node(7),
    ])


def test_single_node_tree():
    q = leaves(SplitTree([Node(1)]))
    assert q.leaves == (UNIT_BOX,)
    assert norm(q) == pytest.approx(math.sqrt(2))


def test_root_split_halves():
    q = leaves(SplitTree([Node(1, "x", 0.5, 2, 3), Node(2), Node(3)]))
    assert q.leaves == (BasicBox.half_open(0, 0.5, 0, 1), BasicBox.half_open(0.5, 1, 0, 1))


def test_nested_split_areas():
    t = SplitTree([Node(1, "x", 0.5, 2, 3), Node(2, "y", 0.25, 4, 5), Node(3), Node(4), Node(5)])
    assert sorted(leaves(t).areas()) == pytest.approx([0.125, 0.375, 0.5])


def test_locate_quadrant_and_tie_rule():
    q = leaves(quadrants())
    assert locate(q, (0.25, 0.75)) == BasicBox.half_open(0, 0.5, 0.5, 1)
    assert locate(q, (0.5, 0.25)) == BasicBox.half_open(0, 0.5, 0, 0.5)
    with pytest.raises(ValueError):
        locate(q, (0.0, 0.5))
    with pytest.raises(ValueError):
        locate(q, (0.5, 1.2))


def test_quadrant_norm():
    assert norm(leaves(quadrants())) == pytest.approx(0.70710678, abs=1e-8)


def test_locate_matches_membership_scan(rng):
    t = random_tree(rng, 40)
    q = leaves(t)
    pts = 1.0 - rng.random((1000, 2))
    fast = q.locate_many(pts)
    for p, k in zip(pts, fast):
        hits = [i for i, b in enumerate(q.leaves) if contains(b, p)]
        assert hits == [k]
        assert q.leaf_index(p) == k


def test_random_trees_tile_the_square(rng):
    for _ in range(1000):
        q = leaves(random_tree(rng, int(rng.integers(0, 12))))
        assert math.fsum(q.areas()) == pytest.approx(1.0, rel=1e-12)
        assert (q.areas() > 0).all()
        pts = 1.0 - rng.random((1000, 2))
        hits = np.zeros(len(pts), dtype=int)
        for b in q.leaves:
            hits += (pts[:, 0] > b.xlo) & (pts[:, 0] <= b.xhi) & (pts[:, 1] > b.ylo) & (pts[:, 1] <= b.yhi)
        assert (hits == 1).all()


@given(st.integers(0, 2**32 - 1), st.integers(0, 15))
def test_refinement_never_increases_norm(seed, n):
    r = np.random.default_rng(seed)
    t = random_tree(r, n)
    q = leaves(t)
    k = int(r.integers(len(q)))
    b = q.leaves[k]
    t2 = t.extend(q.leaf_nodes[k], "x", 0.5 * (b.xlo + b.xhi))
    assert norm(leaves(t2)) <= norm(q)


def test_validate_quadrants_passes():
    assert validate(quadrants()).ok


def test_validate_child_id_not_larger():
    t = SplitTree([Node(2, "x", 0.5, 1, 3), Node(1), Node(3)])
    r = validate(t)
    assert not r.ok
    assert any("ids strictly increase" in m for _, m in r.failures)
    with pytest.raises(TreeStructureError):
        leaves(t)


def test_validate_threshold_outside_parent():
    t = SplitTree([Node(1, "x", 0.5, 2, 3), Node(2, "x", 0.7, 4, 5), Node(3), Node(4), Node(5)])
    r = validate(t)
    assert not r.ok
    assert any(nid == 2 for nid, _ in r.failures)


def test_validate_orphan_and_one_child():
    assert not validate(SplitTree([Node(1), Node(2)])).ok
    assert not validate(SplitTree([Node(1, "x", 0.5, 2, None), Node(2)])).ok


def test_enclosing_whole_square():
    t = build_enclosing_partition(UNIT_BOX, 2.0)
    q = leaves(t)
    assert len(q) == 1 and norm(q) == pytest.approx(math.sqrt(2))


def test_enclosing_quarter_target():
    target = BasicBox.half_open(0.25, 0.5, 0.25, 0.5)
    t = build_enclosing_partition(target, 0.4)
    q = leaves(t)
    assert validate(t).ok
    assert target in q.leaves
    assert max(diameter(b) for b in q.leaves) < 0.4
    assert not t.target_exceeds_mesh


def test_enclosing_tiny_target_leaf_count():
    target = BasicBox.half_open(0.3, 0.3 + 7e-4, 0.6, 0.6 + 7e-4)
    assert diameter(target) < 1e-3
    mesh = 0.1
    q = leaves(build_enclosing_partition(target, mesh))
    assert target in q.leaves
    assert norm(q) < mesh
    # each of the four discarded pieces is cut into at most a full dyadic grid
    # of cells with diameter just under mesh
    per_piece = 2 ** (2 * math.ceil(math.log2(math.sqrt(2) / mesh)) + 1)
    assert len(q) <= 1 + 4 * per_piece


def test_enclosing_large_target_flag():
    target = BasicBox.half_open(0.0, 0.9, 0.0, 0.9)
    t = build_enclosing_partition(target, 0.5)
    assert t.target_exceeds_mesh
    q = leaves(t)
    assert all(diameter(b) < 0.5 for b in q.leaves if b != target)


def test_enclosing_rejects_degenerate():
    with pytest.raises(ValueError):
        build_enclosing_partition(BasicBox.half_open(0.2, 0.2, 0, 1), 0.1)
    with pytest.raises(ValueError):
        build_enclosing_partition(UNIT_BOX, 0.0)


@given(
    st.floats(0, 0.98), st.floats(0.001, 0.5), st.floats(0, 0.98), st.floats(0.001, 0.5),
    st.floats(0.05, 1.5),
)
def test_enclosing_invariants(x0, w, y0, h, mesh):
    target = BasicBox.half_open(x0, min(1.0, x0 + w), y0, min(1.0, y0 + h))
    t = build_enclosing_partition(target, mesh)
    assert validate(t).ok
    q = leaves(t)
    assert target in q.leaves
    others = [diameter(b) for b in q.leaves if b != target]
    assert all(d < mesh for d in others)
    # the analytic norm agrees with the built tree
    assert enclosing_norm(target, mesh) == pytest.approx(norm(q), rel=1e-12)


def test_serialization_round_trip(rng):
    for _ in range(20):
        t = random_tree(rng, 25)
        back = loads_tree(dumps_tree(t))
        assert back == t
        assert leaves(back).leaves == leaves(t).leaves
    t = build_enclosing_partition(BasicBox.half_open(0.1, 0.2, 0.3, 0.4), 0.3)
    back = loads_tree(dumps_tree(t))
    assert back.target == t.target and back.target_exceeds_mesh == t.target_exceeds_mesh


def test_loads_rejects_other_documents():
    with pytest.raises(ValueError):
        loads_tree("NOT A TREE\n1 - - - -\n")
