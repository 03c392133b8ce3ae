import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from boxdiff import quadsum
from boxdiff.boxgeom import UNIT_BOX, BasicBox, area, split
from boxdiff.rectfn import WeightedRectFn
from boxdiff.treepart import Node, SplitTree, leaves

from conftest import random_tree
from test_rectfn import random_box, random_fn


def quadrant_partition():
    return leaves(SplitTree([
        Node(1, "x", 0.5, 2, 3), Node(2, "y", 0.5, 4, 5), Node(3, "y", 0.5, 6, 7),
        Node(4), Node(5), Node(6), Node(7),
    ]))


def test_integrate_constant():
    assert quadsum.integrate(WeightedRectFn.constant(1.0), BasicBox.half_open(0, 0.3, 0, 0.4)) == pytest.approx(0.12, rel=1e-15)


def test_integrate_overlap_counts_twice():
    f = WeightedRectFn([0.0, 0.4], [0.6, 1.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0])
    assert quadsum.integrate(f, UNIT_BOX) == pytest.approx(1.2, rel=1e-15)


def test_integrate_matches_scan_large(rng):
    f = random_fn(rng, 100_000, max_side=0.02)
    for _ in range(200):
        b = random_box(rng)
        assert quadsum.integrate(f, b) == pytest.approx(quadsum.integrate_scan(f, b), rel=1e-12, abs=1e-300)


def test_l1_norm_examples(rng):
    assert quadsum.l1_norm(WeightedRectFn()) == 0.0
    assert quadsum.l1_norm(WeightedRectFn([0], [0.5], [0], [0.5], [2.0])) == 0.5
    for _ in range(1000):
        f = random_fn(rng, int(rng.integers(1, 30)), max_side=0.5)
        assert quadsum.l1_norm(f) == pytest.approx(quadsum.integrate(f, UNIT_BOX), rel=1e-12)


def test_cond_exp_examples(rng):
    q = quadrant_partition()
    c = WeightedRectFn.constant(2.5)
    for p in 1 - rng.random((20, 2)):
        assert quadsum.cond_exp(c, q, p) == pytest.approx(2.5, rel=1e-15)
    half = WeightedRectFn([0], [0.5], [0], [1], [1.0])
    assert quadsum.cond_exp(half, q, (0.25, 0.25)) == 1.0
    assert quadsum.cond_exp(half, q, (0.75, 0.25)) == 0.0


def test_cond_exp_preserves_mass(rng):
    for _ in range(50):
        f = random_fn(rng, 200, max_side=0.3)
        q = leaves(random_tree(rng, 30))
        total = math.fsum(quadsum.leaf_averages(f, q) * q.areas())
        assert total == pytest.approx(f.mass, rel=1e-12)


def test_integrate_boxes_matches_single(rng):
    f = random_fn(rng, 500)
    q = leaves(random_tree(rng, 20))
    got = quadsum.integrate_boxes(f, q.bounds_array())
    want = [quadsum.integrate(f, b) for b in q.leaves]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-300)


@given(st.integers(0, 2**32 - 1), st.sampled_from("xy"), st.floats(0.01, 0.99))
def test_additivity(seed, axis, frac):
    r = np.random.default_rng(seed)
    f = random_fn(r, 100, max_side=0.3)
    b = BasicBox(*random_box(r))
    lo, hi = (b.xlo, b.xhi) if axis == "x" else (b.ylo, b.yhi)
    t = lo + frac * (hi - lo)
    if not lo < t < hi:
        return
    b1, b2 = split(b, axis, t)
    whole = quadsum.integrate(f, b)
    assert quadsum.integrate(f, b1) + quadsum.integrate(f, b2) == pytest.approx(whole, rel=1e-12, abs=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_monotone_in_box(seed):
    r = np.random.default_rng(seed)
    f = random_fn(r, 100, max_side=0.3)
    outer = random_box(r)
    u = np.sort(r.random(2))
    v = np.sort(r.random(2))
    inner = (
        outer[0] + u[0] * (outer[1] - outer[0]), outer[0] + u[1] * (outer[1] - outer[0]),
        outer[2] + v[0] * (outer[3] - outer[2]), outer[2] + v[1] * (outer[3] - outer[2]),
    )
    assert quadsum.integrate(f, inner) <= quadsum.integrate(f, outer) * (1 + 1e-12)


def test_tower_property(rng):
    f = random_fn(rng, 300, max_side=0.3)
    coarse = random_tree(rng, 8)
    fine = coarse
    for _ in range(40):
        q = leaves(fine)
        k = int(rng.integers(len(q)))
        b = q.leaves[k]
        fine = fine.extend(q.leaf_nodes[k], "y", 0.5 * (b.ylo + b.yhi))
    qc, qf = leaves(coarse), leaves(fine)
    fine_avg = quadsum.leaf_averages(f, qf)
    fine_fn = WeightedRectFn(*qf.bounds_array().T, fine_avg)
    np.testing.assert_allclose(quadsum.leaf_averages(fine_fn, qc), quadsum.leaf_averages(f, qc), rtol=1e-12)


def test_projection_fixed_point(rng):
    q = leaves(random_tree(rng, 25))
    vals = rng.exponential(size=len(q))
    f = WeightedRectFn(*q.bounds_array().T, vals)
    np.testing.assert_allclose(quadsum.leaf_averages(f, q), vals, rtol=1e-12)
    for p in 1 - rng.random((50, 2)):
        assert quadsum.cond_exp(f, q, p) == pytest.approx(f(p), rel=1e-12)


def test_mc_constant_and_empty():
    b = BasicBox.half_open(0.1, 0.4, 0.2, 0.7)
    est = quadsum.mc_integrate(WeightedRectFn.constant(3.0), b, 1000, seed=1)
    assert est.value == pytest.approx(3.0 * area(b), rel=1e-12)
    assert est.std_error == pytest.approx(0.0, abs=1e-12)
    empty = quadsum.mc_integrate(WeightedRectFn(), b, 1000, seed=1)
    assert (empty.value, empty.std_error) == (0.0, 0.0)
    with pytest.raises(ValueError):
        quadsum.mc_integrate(WeightedRectFn(), b, 10, seed=1)


def test_mc_reproducible(rng):
    f = random_fn(rng, 50, max_side=0.3)
    a = quadsum.mc_integrate(f, UNIT_BOX, 1000, seed=5)
    b = quadsum.mc_integrate(f, UNIT_BOX, 1000, seed=5)
    assert a == b


@pytest.mark.slow
def test_mc_oracle_agrees_with_exact():
    rng = np.random.default_rng(7)
    misses = 0
    for i in range(1000):
        f = random_fn(rng, 20, max_side=0.5)
        b = random_box(rng)
        exact = quadsum.integrate(f, b)
        est = quadsum.mc_integrate(f, b, 100_000, seed=i)
        misses += abs(est.value - exact) > 4 * est.std_error + 1e-15
    # 4 sigma: expected misses are well under one in a thousand
    assert misses <= 2


def test_integrate_functional_identity_and_min(rng):
    f = random_fn(rng, 400, max_side=0.2)
    assert quadsum.integrate_functional(f, lambda t: t) == pytest.approx(f.mass, rel=1e-12)
    # grid-point oracle for a nonlinear functional
    n = 1024
    c = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(c, c, indexing="ij")
    vals = f.evaluate(np.column_stack((xx.ravel(), yy.ravel())))
    approx = np.minimum(vals, 1.0).mean()
    assert quadsum.integrate_functional(f, lambda t: np.minimum(t, 1.0)) == pytest.approx(approx, abs=5e-3)


def test_sup_value(rng):
    f = WeightedRectFn([0.0, 0.4, 0.45], [0.6, 1.0, 0.5], [0.0, 0.0, 0.1], [1.0, 1.0, 0.2], [1.0, 2.0, 4.0])
    assert quadsum.sup_value(f) == 7.0
    g = random_fn(rng, 300)
    pts = 1 - rng.random((20000, 2))
    assert g.evaluate(pts).max() <= quadsum.sup_value(g) <= g.sup_bound
