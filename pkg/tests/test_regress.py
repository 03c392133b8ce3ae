import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from boxdiff import quadsum
from boxdiff.adversary import Lemma21Target, build_composite, build_partition_catalog
from boxdiff.rectfn import WeightedRectFn
from boxdiff.regress import (
    DETERMINISTIC,
    TRAJECTORY_FIELDS,
    Generator,
    LearnSample,
    decompose,
    decompose_values,
    equivariance_check,
    estimator_report,
    h_emp,
    h_emp_detail,
    h_pop,
    h_true,
    hoeffding_union_n,
    leaf_stats,
    projection_check,
    sample,
    schedule_runner,
)
from boxdiff.treepart import Node, SplitTree, leaves

from conftest import random_tree
from test_rectfn import random_fn

QUADRANTS = SplitTree([
    Node(1, "x", 0.5, 2, 3), Node(2, "y", 0.5, 4, 5), Node(3, "y", 0.5, 6, 7),
    Node(4), Node(5), Node(6), Node(7),
])


@pytest.fixture(scope="module")
def desk():
    levels = [Lemma21Target(1.0, t, m, 0.5) for t, m in ((2.0, 0.3), (4.0, 0.15), (8.0, 0.08))]
    comp = build_composite(levels, seed=3, grid=64)
    return comp, build_partition_catalog(comp)


def test_sample_reproducible_and_exact(rng):
    f = random_fn(rng, 40, max_side=0.4)
    a, b = sample(f, 3, seed=12), sample(f, 3, seed=12)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    s = sample(f, 5000, seed=1)
    assert ((s.x > 0) & (s.x <= 1)).all()
    assert all(y == f(x) for x, y in s.pairs[:500])
    np.testing.assert_array_equal(s.y, f.evaluate(s.x))


def test_sample_mean_matches_mass(rng):
    f = random_fn(rng, 60, max_side=0.4)
    s = sample(f, 1_000_000, seed=2)
    se = s.y.std(ddof=1) / math.sqrt(len(s))
    assert abs(s.y.mean() - f.mass) <= 4 * se


def test_noisy_generator(rng):
    f = random_fn(rng, 10)
    s = sample(f, 20000, seed=3, generator=Generator.noisy(0.5))
    resid = s.y - f.evaluate(s.x)
    assert abs(resid.mean()) < 4 * 0.5 / math.sqrt(len(s))
    assert resid.std() == pytest.approx(0.5, rel=0.05)
    with pytest.raises(ValueError):
        Generator("deterministic_y", 1.0)
    with pytest.raises(ValueError):
        sample(f, 0, seed=1)


def test_h_true_examples():
    f = WeightedRectFn([0.0, 0.1, 0.15], [0.3, 0.2, 0.25], [0.0, 0.1, 0.1], [0.3, 0.2, 0.2], [0.0, 1.0, 2.0])
    assert h_true(WeightedRectFn([0.5], [0.6], [0.5], [0.6], [4.0]), (0.1, 0.1)) == 0.0
    assert h_true(WeightedRectFn([0.5], [0.6], [0.5], [0.6], [4.0]), (0.55, 0.55)) == 4.0
    assert h_true(f, (0.18, 0.15)) == 3.0


def test_h_pop_delegates_bitwise(rng):
    f = random_fn(rng, 300, max_side=0.3)
    t = random_tree(rng, 30)
    q = leaves(t)
    for p in 1 - rng.random((1000, 2)):
        assert h_pop(f, q, p) == quadsum.cond_exp(f, q, p)
    half = WeightedRectFn([0], [0.5], [0], [1], [1.0])
    assert h_pop(half, QUADRANTS, (0.25, 0.25)) == 1.0
    assert h_pop(half, QUADRANTS, (0.75, 0.25)) == 0.0


def test_h_pop_leaf_constant(rng):
    q = leaves(random_tree(rng, 10))
    f = WeightedRectFn(*q.bounds_array().T, rng.random(len(q)))
    for p in 1 - rng.random((100, 2)):
        assert h_pop(f, q, p) == pytest.approx(h_true(f, p), rel=1e-12)


def test_h_emp_examples():
    s = LearnSample.from_pairs([((0.2, 0.2), 1.0), ((0.8, 0.8), 3.0)])
    assert h_emp(s, QUADRANTS, (0.1, 0.1)) == 1.0
    e = h_emp_detail(s, QUADRANTS, (0.9, 0.1))
    assert e.value == 0.0 and e.empty_leaf
    dup = LearnSample.from_pairs([((0.2, 0.2), 1.0), ((0.2, 0.2), 2.0)])
    assert h_emp(dup, QUADRANTS, (0.3, 0.4)) == 1.5


def test_h_emp_against_brute_force(rng):
    f = random_fn(rng, 50, max_side=0.4)
    s = sample(f, 500, seed=4)
    q = leaves(random_tree(rng, 12))
    counts, sums = leaf_stats(s, q)
    for p in 1 - rng.random((50, 2)):
        leaf = q.leaves[q.leaf_index(p)]
        ys = [y for x, y in s.pairs if leaf.contains(x)]
        assert h_emp(s, q, p) == pytest.approx(np.mean(ys) if ys else 0.0, rel=1e-12)
    assert counts.sum() == len(s)


def test_estimator_report(rng):
    f = random_fn(rng, 50, max_side=0.4)
    s = sample(f, 2000, seed=5)
    rep = estimator_report(s, f, QUADRANTS, partition_id=7)
    assert rep.n == 2000 and rep.partition_id == 7 and len(rep.records) == 4
    for r in rep.records:
        assert r.deviation == abs(r.empirical_mean - r.population_mean)


def test_decompose_examples():
    d = decompose_values(5.0, 3.0, 1.0)
    assert (d.I, d.II, d.lower_bound) == (2.0, 2.0, 0.0)
    d = decompose_values(0.0, 4.0, 0.0, empty_leaf=True)
    assert (d.I, d.II) == (4.0, 4.0) and d.empty_leaf


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_decompose_triangle(emp, pop, true):
    d = decompose_values(emp, pop, true)
    assert d.total >= d.II - d.I - 1e-9
    assert d.lower_bound == max(d.II - d.I, 0.0)


def test_decompose_random_configurations(rng):
    for _ in range(1000):
        f = random_fn(rng, 5, max_side=0.6)
        s = sample(f, 20, seed=int(rng.integers(1 << 30)))
        p = 1 - rng.random(2)
        d = decompose(s, f, QUADRANTS, p)
        emp, pop, tru = h_emp(s, QUADRANTS, p), h_pop(f, QUADRANTS, p), h_true(f, p)
        assert d.I == abs(emp - pop) and d.II == abs(pop - tru)
        assert abs(emp - tru) >= d.II - d.I - 1e-12 * max(abs(emp), abs(pop), abs(tru))


def test_hoeffding_union_n():
    n = hoeffding_union_n(0.1, 0.9, 10, 0.01, 1.0)
    assert n == pytest.approx(100 * math.log(40 / 0.1) / 0.01, rel=1e-12)
    # the count term dominates when the range is zero
    assert hoeffding_union_n(0.1, 0.9, 10, 0.01, 0.0) == pytest.approx(8 * math.log(20 / 0.1) / 0.01)
    with pytest.raises(ValueError):
        hoeffding_union_n(0.0, 0.9, 10, 0.01, 1.0)


def test_bound_holds_over_replications(rng):
    f = random_fn(rng, 30, max_side=0.5)
    q = leaves(random_tree(rng, 8))
    while q.areas().min() < 0.02:
        q = leaves(random_tree(rng, 8))
    m = quadsum.sup_value(f)
    k, p, delta = len(q), float(q.areas().min()), 0.1
    for n in (10_000, 100_000):
        assert n >= 8 * math.log(2 * k / delta) / p
        eps = m * math.sqrt(math.log(4 * k / delta) / (n * p))
        assert hoeffding_union_n(eps, 0.9, k, p, m) == pytest.approx(n, rel=1e-9)
        fails = 0
        for rep in range(20):
            s = sample(f, n, seed=1000 * n + rep)
            r = estimator_report(s, f, q)
            fails += max(x.deviation for x in r.records) > eps
        assert fails <= 2


def test_runner_trivial_function(desk):
    _, pc = desk
    tr = schedule_runner(pc, WeightedRectFn(), [0.1], 0.9, seed=1, stages=[0])
    r = tr.stages[0]
    assert r.max_I_floored == 0.0 and r.witness_I == 0.0 and r.witness_II == 0.0


def test_runner_bound_monotone(desk):
    _, pc = desk
    eps = [0.5**n for n in range(1, 8)]
    tr = schedule_runner(pc, desk[0].f, eps, 0.9, seed=1, stages=[0] * len(eps), cap=0, value_range=1.0)
    nb = [r.n_bound for r in tr.stages]
    assert nb == sorted(nb)
    assert all("skipped_infeasible" in r.flags for r in tr.stages)


def test_runner_clamped_stage_and_csv(desk):
    comp, pc = desk
    tr = schedule_runner(pc, comp.f, [0.1, 0.05, 0.025], 0.9, seed=2, cap=20_000, on_cap="clamp")
    assert len(tr.stages) == 3
    for r in tr.stages:
        assert r.n == 20_000 and "capped" in r.flags
        assert r.witness_II >= 0 and r.lower_bound == max(r.witness_II - r.witness_I, 0.0)
    lines = tr.to_csv().splitlines()
    assert lines[0].split(",") == TRAJECTORY_FIELDS
    assert len(lines) == 4


def test_runner_rejects_bad_input(desk):
    comp, pc = desk
    with pytest.raises(ValueError):
        schedule_runner(pc, comp.f, [0.1, math.inf], 0.9, seed=1, stages=[0, 1])
    with pytest.raises(ValueError):
        schedule_runner(pc, comp.f, [0.1], 1.0, seed=1, stages=[0])
    with pytest.raises(ValueError):
        schedule_runner(pc, comp.f, [0.1], 0.9, seed=1, stages=[0, 1])


def test_equivariance_identity_and_cubic(rng):
    f = random_fn(rng, 80, max_side=0.3)
    s = sample(f, 1000, seed=6)
    t = random_tree(rng, 20)
    queries = 1 - rng.random((1000, 2))
    ident = (lambda a: a, lambda a: a)
    assert equivariance_check(s, t, ident, queries).ok
    warp = (lambda a: a**3, lambda a: a / (1 + a))
    rep = equivariance_check(s, t, warp, queries)
    assert rep.ok and rep.checked == 1000


def test_equivariance_rejects_decreasing(rng):
    s = sample(random_fn(rng, 5), 10, seed=1)
    with pytest.raises(ValueError, match="strictly increasing"):
        equivariance_check(s, QUADRANTS, (lambda a: 1 - a, lambda a: a), [(0.5, 0.5)])


def test_projection_constant():
    s = sample(WeightedRectFn.constant(2.0), 1000, seed=1)
    rep = projection_check(WeightedRectFn.constant(2.0), QUADRANTS, s)
    assert rep.ok
    assert np.all(rep.exact_residuals == 0) and np.all(rep.stat_means == 0)


def test_projection_desk_quadrants(desk):
    comp, _ = desk
    s = sample(comp.f, 100_000, seed=8)
    rep = projection_check(comp.f, QUADRANTS, s)
    assert rep.exact_ok and rep.stat_ok


def test_projection_exact_part_any_partition(rng):
    f = random_fn(rng, 200, max_side=0.3)
    rep = projection_check(f, random_tree(rng, 25), sample(f, 100, seed=1))
    assert rep.exact_ok
    with pytest.raises(ValueError):
        projection_check(f, QUADRANTS, sample(f, 100, seed=1, generator=Generator.noisy(1.0)))
