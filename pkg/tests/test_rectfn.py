import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from boxdiff.boxgeom import BasicBox
from boxdiff.rectfn import WeightedRectFn, dumps_fn, loads_fn


def random_fn(rng, n, max_side=0.1):
    x0 = rng.random(n) * (1 - max_side)
    y0 = rng.random(n) * (1 - max_side)
    w = rng.random(n) * max_side
    h = rng.random(n) * max_side
    return WeightedRectFn(x0, x0 + w, y0, y0 + h, rng.exponential(size=n))


def random_box(rng):
    x0, x1 = np.sort(rng.random(2))
    y0, y1 = np.sort(rng.random(2))
    s = 10 ** rng.uniform(-3, 0)
    return (x0, x0 + (x1 - x0) * s, y0, y0 + (y1 - y0) * s)


def test_rejects_bad_terms():
    with pytest.raises(ValueError):
        WeightedRectFn([0], [1], [0], [1], [-1.0])
    with pytest.raises(ValueError):
        WeightedRectFn([0], [1.5], [0], [1], [1.0])
    with pytest.raises(ValueError):
        WeightedRectFn([0.5], [0.4], [0], [1], [1.0])
    with pytest.raises(ValueError):
        WeightedRectFn([0, 0], [1], [0], [1], [1.0])


def test_sum_semantics():
    f = WeightedRectFn([0.0, 0.4], [0.6, 1.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0])
    assert f((0.5, 0.5)) == 2.0
    assert f((0.2, 0.5)) == 1.0
    # half-open: the closed upper edge belongs, the open lower edge does not
    assert f((0.6, 0.5)) == 2.0
    assert f((0.4, 0.5)) == 1.0
    assert f.mass == pytest.approx(1.2, rel=1e-15)


def test_query_matches_scan_large(rng):
    f = random_fn(rng, 100_000, max_side=0.02)
    for _ in range(1000):
        b = random_box(rng)
        assert np.array_equal(f.query(b), f.query_scan(b))


def test_evaluate_matches_scan(rng):
    f = random_fn(rng, 300)
    pts = 1 - rng.random((2000, 2))
    # include points exactly on term edges
    edge = np.column_stack((f.xhi[:100], f.ylo[:100] + 0.5 * (f.yhi[:100] - f.ylo[:100])))
    pts = np.vstack((pts, edge, np.column_stack((f.xlo[:100], f.yhi[:100]))))
    np.testing.assert_array_equal(f.evaluate(pts), f.evaluate_scan(pts))


@given(st.integers(0, 2**32 - 1))
def test_query_matches_scan_property(seed):
    r = np.random.default_rng(seed)
    f = random_fn(r, int(r.integers(1, 400)), max_side=float(r.uniform(0.001, 1.0)))
    b = random_box(r)
    assert np.array_equal(f.query(b), f.query_scan(b))


def test_concat_and_scale(rng):
    f, g = random_fn(rng, 10), random_fn(rng, 5)
    h = f + g.scaled(3.0)
    assert len(h) == 15
    assert h.mass == pytest.approx(f.mass + 3 * g.mass, rel=1e-12)
    p = (0.31, 0.47)
    assert h(p) == pytest.approx(f(p) + 3 * g(p))


def test_sup_bound_dominates_values(rng):
    f = random_fn(rng, 500)
    pts = 1 - rng.random((5000, 2))
    assert f.evaluate(pts).max() <= f.sup_bound


def test_boxfn_round_trip(rng):
    f = random_fn(rng, 50)
    text = dumps_fn(f)
    assert text.startswith("BOXFN 1 50 ")
    g = loads_fn(text)
    for k in ("xlo", "xhi", "ylo", "yhi", "weight"):
        assert np.array_equal(getattr(f, k), getattr(g, k))
    assert g.mass == f.mass


def test_boxfn_rejects_tampered_mass(rng):
    lines = dumps_fn(random_fn(rng, 3)).splitlines()
    head = lines[0].split()
    head[3] = (1.5).hex()
    with pytest.raises(ValueError, match="mass"):
        loads_fn("\n".join([" ".join(head)] + lines[1:]))


def test_empty_function():
    f = WeightedRectFn()
    assert f.mass == 0.0 and len(f) == 0
    assert f((0.5, 0.5)) == 0.0
    assert len(f.query((0, 1, 0, 1))) == 0
