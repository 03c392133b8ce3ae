"""Regression estimators on tree partitions and their error decomposition.

With ``X`` uniform on the unit square and ``Y = f(X)``, the regression
function is ``f`` itself, the population partition estimator is the leaf
average ``E(f|Q)`` and the empirical one is the mean response over sample
points sharing the query's leaf (0 on an empty leaf). Their gap ``I`` and the
bias ``II`` bound the total error from below by ``II - I``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import quadsum
from .boxgeom import BasicBox
from .rectfn import WeightedRectFn
from .seeding import substream
from .treepart import Node, Partition, SplitTree, leaves

CHUNK = 1_000_000


@dataclass(frozen=True)
class Generator:
    """Response model: ``deterministic_y`` (sigma 0) or ``noisy_y`` with additive N(0, sigma^2)."""

    kind: str = "deterministic_y"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("deterministic_y", "noisy_y"):
            raise ValueError(f"unknown generator {self.kind!r}")
        if self.kind == "deterministic_y" and self.sigma != 0:
            raise ValueError("deterministic_y has no noise")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def noisy(cls, sigma: float) -> "Generator":
        return cls("noisy_y", sigma)


DETERMINISTIC = Generator()


@dataclass
class LearnSample:
    x: np.ndarray
    y: np.ndarray
    seed: int
    generator: Generator = DETERMINISTIC

    def __len__(self) -> int:
        return len(self.y)

    @property
    def pairs(self):
        return [((float(a), float(b)), float(v)) for (a, b), v in zip(self.x, self.y)]

    @classmethod
    def from_pairs(cls, pairs, seed: int = 0, generator: Generator = DETERMINISTIC) -> "LearnSample":
        pairs = list(pairs)
        x = np.array([p for p, _ in pairs], dtype=float).reshape(-1, 2)
        y = np.array([v for _, v in pairs], dtype=float)
        return cls(x, y, seed, generator)


def uniform_points(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` uniform points in (0,1]^2."""
    return 1.0 - rng.random((n, 2))


def evaluate_chunked(f: WeightedRectFn, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    for i in range(0, len(x), CHUNK):
        out[i:i + CHUNK] = f.evaluate(x[i:i + CHUNK])
    return out


def sample(f: WeightedRectFn, n: int, seed: int, generator: Generator = DETERMINISTIC) -> LearnSample:
    """``n`` i.i.d. pairs with uniform ``x`` and ``y = f(x)`` (+ noise)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = substream(seed, "sample")
    x = uniform_points(rng, n)
    y = evaluate_chunked(f, x)
    if generator.kind == "noisy_y":
        y = y + generator.sigma * substream(seed, "noise").standard_normal(n)
    return LearnSample(x, y, seed, generator)


def _partition(q) -> Partition:
    return leaves(q) if isinstance(q, SplitTree) else q


def h_true(f: WeightedRectFn, p) -> float:
    return f(p)


def h_pop(f: WeightedRectFn, q, p) -> float:
    return quadsum.cond_exp(f, _partition(q), p)


def leaf_stats(s: LearnSample, q) -> tuple[np.ndarray, np.ndarray]:
    """Per-leaf sample counts and response sums."""
    q = _partition(q)
    idx = q.locate_many(s.x) if len(s) else np.zeros(0, dtype=np.int64)
    counts = np.bincount(idx, minlength=len(q))
    sums = np.bincount(idx, weights=s.y, minlength=len(q))
    return counts, sums


@dataclass(frozen=True)
class EmpiricalValue:
    value: float
    count: int

    @property
    def empty_leaf(self) -> bool:
        return self.count == 0


def h_emp_detail(s: LearnSample, q, p) -> EmpiricalValue:
    q = _partition(q)
    leaf = q.leaves[q.leaf_index(p)]
    xs, ys = s.x, s.y
    m = (xs[:, 0] > leaf.xlo) & (xs[:, 0] <= leaf.xhi) & (xs[:, 1] > leaf.ylo) & (xs[:, 1] <= leaf.yhi)
    k = int(m.sum())
    return EmpiricalValue(float(ys[m].mean()) if k else 0.0, k)


def h_emp(s: LearnSample, q, p) -> float:
    """Mean response in the query's leaf; 0 when no sample point falls there."""
    return h_emp_detail(s, q, p).value


@dataclass(frozen=True)
class LeafRecord:
    box: BasicBox
    count: int
    empirical_mean: float
    population_mean: float

    @property
    def deviation(self) -> float:
        return abs(self.empirical_mean - self.population_mean)

    @property
    def empty_leaf(self) -> bool:
        return self.count == 0


@dataclass
class EstimatorReport:
    records: list[LeafRecord]
    n: int
    partition_id: int | None = None


def estimator_report(s: LearnSample, f: WeightedRectFn, q, partition_id: int | None = None) -> EstimatorReport:
    q = _partition(q)
    counts, sums = leaf_stats(s, q)
    pop = quadsum.leaf_averages(f, q)
    emp = np.divide(sums, counts, out=np.zeros(len(q)), where=counts > 0)
    recs = [LeafRecord(b, int(c), float(e), float(h)) for b, c, e, h in zip(q.leaves, counts, emp, pop)]
    return EstimatorReport(recs, len(s), partition_id)


@dataclass(frozen=True)
class Decomposition:
    I: float
    II: float
    lower_bound: float
    total: float
    empty_leaf: bool = False


def decompose_values(emp: float, pop: float, true: float, empty_leaf: bool = False) -> Decomposition:
    i_term = abs(emp - pop)
    ii_term = abs(pop - true)
    total = abs(emp - true)
    # exact in real arithmetic; allow a few ulps of rounding in the differences
    slack = 8 * np.finfo(float).eps * max(abs(emp), abs(pop), abs(true))
    if total < ii_term - i_term - slack:
        raise AssertionError(f"triangle inequality violated: {total} < {ii_term} - {i_term}")
    return Decomposition(i_term, ii_term, max(ii_term - i_term, 0.0), total, empty_leaf)


def decompose(s: LearnSample, f: WeightedRectFn, q, p) -> Decomposition:
    q = _partition(q)
    e = h_emp_detail(s, q, p)
    return decompose_values(e.value, h_pop(f, q, p), h_true(f, p), e.empty_leaf)


# ------------------------------------------------------------ sample sizes


def hoeffding_union_n(eps: float, confidence: float, leaf_count: int, min_prob: float, value_range: float) -> float:
    """Sample size making every audited leaf mean ``eps``-accurate at ``confidence``.

    For ``K`` leaves of probability at least ``p`` and responses in
    ``[0, M]``, a leaf gets at least ``Np/2`` points except with probability
    ``exp(-Np/8)`` (Chernoff), and then its mean deviates by more than
    ``eps`` with probability at most ``2 exp(-Np eps^2 / M^2)`` (Hoeffding).
    A union bound over the leaves gives the returned ``N``.
    """
    if not (eps > 0 and 0 < confidence < 1 and leaf_count >= 1 and min_prob > 0):
        raise ValueError("need eps > 0, confidence in (0,1), leaf_count >= 1, min_prob > 0")
    delta = 1.0 - confidence
    k = leaf_count
    n_count = 8.0 * math.log(2.0 * k / delta) / min_prob
    n_mean = (value_range / eps) ** 2 * math.log(4.0 * k / delta) / min_prob if value_range > 0 else 0.0
    return max(n_count, n_mean)


# ------------------------------------------------------------ stage runner


@dataclass
class StageRecord:
    stage: int
    partition_id: int
    n: int
    eps: float
    n_bound: float
    max_I_floored: float = float("nan")
    witness_II: float = float("nan")
    witness_I: float = float("nan")
    lower_bound: float = float("nan")
    threshold: float = float("nan")
    floored_leaves: int = 0
    flags: list[str] = field(default_factory=list)


TRAJECTORY_FIELDS = ["stage", "partition_id", "N", "eps", "max_I_floored", "witness_II", "witness_I", "lower_bound", "flags"]


@dataclass
class Trajectory:
    stages: list[StageRecord]
    area_floor: float
    confidence: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_FIELDS)
        for r in self.stages:
            w.writerow([
                r.stage, r.partition_id, r.n, repr(r.eps), repr(r.max_I_floored), repr(r.witness_II),
                repr(r.witness_I), repr(r.lower_bound), ";".join(r.flags),
            ])
        return buf.getvalue()


def _check_eps(eps_sequence) -> list[float]:
    eps = [float(e) for e in eps_sequence]
    if not eps or any(not (e > 0 and math.isfinite(e)) for e in eps):
        raise ValueError("eps_sequence must be a nonempty sequence of positive finite values")
    if not math.isfinite(math.fsum(eps)):
        raise ValueError("eps_sequence must be summable")
    return eps


def _leaf_moments(f: WeightedRectFn, q: Partition, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    counts = np.zeros(len(q), dtype=np.int64)
    sums = np.zeros(len(q))
    for i in range(0, n, CHUNK):
        x = uniform_points(rng, min(CHUNK, n - i))
        idx = q.locate_many(x)
        counts += np.bincount(idx, minlength=len(q))
        sums += np.bincount(idx, weights=f.evaluate(x), minlength=len(q))
    return counts, sums


def schedule_runner(
    catalog,
    f: WeightedRectFn,
    eps_sequence: Sequence[float],
    confidence: float,
    seed: int,
    stages: Sequence[int] | None = None,
    area_floor: float = 1e-3,
    cap: float = 1e7,
    on_cap: str = "skip",
    value_range: float | None = None,
) -> Trajectory:
    """Run the estimator along catalog partitions with per-stage sample sizes.

    ``catalog`` is a :class:`~boxdiff.adversary.PartitionCatalog`; ``stages``
    selects catalog entries (default: the first entry of every level). The
    sample size of stage ``k`` comes from :func:`hoeffding_union_n` over the
    leaves of area at least ``area_floor``, with ``eps_sequence[k]`` and the
    range ``value_range`` (default: the exact supremum of ``f``). When it exceeds ``cap`` the stage is skipped
    (``on_cap="skip"``) or run with ``cap`` points (``on_cap="clamp"``); both
    are flagged. The stage's witness leaf is always audited.
    """
    eps = _check_eps(eps_sequence)
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if on_cap not in ("skip", "clamp"):
        raise ValueError("on_cap must be 'skip' or 'clamp'")
    if stages is None:
        stages = [int(o) for o, nxt in zip(catalog.offsets[:-1], catalog.offsets[1:]) if nxt > o]
    if len(eps) < len(stages):
        raise ValueError(f"{len(stages)} stages but only {len(eps)} eps values")
    m = quadsum.sup_value(f) if value_range is None else float(value_range)
    out = []
    for k, pid in enumerate(stages):
        q = leaves(catalog[pid])
        box, point, thr = catalog.witness(pid)
        areas = q.areas()
        floored = np.flatnonzero(areas >= area_floor)
        rec = StageRecord(k, int(pid), 0, eps[k], float("nan"), threshold=thr, floored_leaves=len(floored))
        out.append(rec)
        if len(floored) < len(q):
            rec.flags.append("area_floored")
        if len(floored):
            nb = hoeffding_union_n(eps[k], confidence, len(floored), float(areas[floored].min()), m)
        else:
            nb = 0.0
        rec.n_bound = nb
        n = max(1, math.ceil(nb))
        if n > cap:
            if on_cap == "skip":
                rec.flags.append("skipped_infeasible")
                continue
            rec.flags.append("capped")
            n = int(cap)
        rec.n = n
        counts, sums = _leaf_moments(f, q, n, substream(seed, "stage", k))
        wi = q.leaf_index(point)
        audit = np.union1d(floored, [wi])
        pop = quadsum.integrate_boxes(f, q.bounds_array()[audit]) / areas[audit]
        emp = np.divide(sums[audit], counts[audit], out=np.zeros(len(audit)), where=counts[audit] > 0)
        dev = np.abs(emp - pop)
        fl = np.isin(audit, floored)
        rec.max_I_floored = float(dev[fl].max()) if fl.any() else 0.0
        w = int(np.searchsorted(audit, wi))
        true_w = f(point)
        d = decompose_values(float(emp[w]), float(pop[w]), true_w, counts[wi] == 0)
        rec.witness_I, rec.witness_II, rec.lower_bound = d.I, d.II, d.lower_bound
        if d.empty_leaf:
            rec.flags.append("empty_leaf")
    return Trajectory(out, area_floor, confidence)


# ------------------------------------------------------------ checks


MonotoneMap = tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]


def _check_monotone(maps: MonotoneMap, probes: int = 1000) -> None:
    t = np.sort(np.concatenate((np.linspace(0.0, 1.0, probes), np.random.default_rng(0).random(probes))))
    t = np.unique(t)
    for name, g in zip("xy", maps):
        v = np.asarray(g(t), dtype=float)
        if not np.all(np.diff(v) > 0):
            raise ValueError(f"map for axis {name} is not strictly increasing on [0, 1]")


def map_tree(t: SplitTree, maps: MonotoneMap) -> SplitTree:
    """The tree with every threshold pushed through the axis's map."""
    gx, gy = maps
    nodes = []
    for n in t.nodes.values():
        if n.is_terminal:
            nodes.append(n)
            continue
        g = gx if n.axis == "x" else gy
        nodes.append(Node(n.id, n.axis, float(g(np.array([n.threshold]))[0]), n.left, n.right))
    return SplitTree(nodes)


@dataclass
class EquivarianceReport:
    checked: int
    mismatches: int

    @property
    def ok(self) -> bool:
        return self.mismatches == 0


def equivariance_check(s: LearnSample, q: SplitTree, monotone_map: MonotoneMap, queries) -> EquivarianceReport:
    """Compare ``h_emp`` before and after mapping data, thresholds and queries."""
    _check_monotone(monotone_map)
    gx, gy = monotone_map
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)

    def push(a):
        return np.column_stack((gx(a[:, 0]), gy(a[:, 1])))

    s2 = LearnSample(push(s.x), s.y.copy(), s.seed, s.generator)
    p1, p2 = leaves(q), leaves(map_tree(q, monotone_map))
    c1, m1 = leaf_stats(s, p1)
    c2, m2 = leaf_stats(s2, p2)
    v1 = np.divide(m1, c1, out=np.zeros(len(p1)), where=c1 > 0)[p1.locate_many(queries)]
    v2 = np.divide(m2, c2, out=np.zeros(len(p2)), where=c2 > 0)[p2.locate_many(push(queries))]
    return EquivarianceReport(len(queries), int(np.sum(v1 != v2)))


@dataclass
class ProjectionReport:
    exact_residuals: np.ndarray
    stat_means: np.ndarray
    stat_se: np.ndarray
    rtol: float = 1e-12
    sigmas: float = 4.0

    @property
    def exact_ok(self) -> bool:
        return bool(np.all(self.exact_residuals <= self.rtol))

    @property
    def stat_ok(self) -> bool:
        return bool(np.all(np.abs(self.stat_means) <= self.sigmas * self.stat_se + 1e-12))

    @property
    def ok(self) -> bool:
        return self.exact_ok and self.stat_ok


def projection_check(f: WeightedRectFn, q, s: LearnSample) -> ProjectionReport:
    """Leafwise projection identities for the population estimator.

    Exact part: relative residual of ``integral_B f - h_N area(B)`` per leaf.
    Statistical part: ``mean((y - h_N(x)) 1_B(x))`` per leaf with its
    standard error.
    """
    if s.generator.kind != "deterministic_y":
        raise ValueError("projection_check expects a deterministic_y sample")
    q = _partition(q)
    areas = q.areas()
    ints = np.array([quadsum.integrate(f, leaf) for leaf in q.leaves])
    hp = ints / areas
    scale = np.maximum(np.abs(ints), np.finfo(float).tiny)
    resid = np.abs(ints - hp * areas) / scale
    idx = q.locate_many(s.x)
    r = s.y - hp[idx]
    n = len(s)
    means = np.bincount(idx, weights=r, minlength=len(q)) / n
    sq = np.bincount(idx, weights=r * r, minlength=len(q)) / n
    var = np.maximum(sq - means**2, 0.0) * n / max(n - 1, 1)
    se = np.sqrt(var / n)
    return ProjectionReport(resid, means, se)
