"""Two-class problem with a piecewise-constant class-1 density.

Class 1 has density ``density1`` (unit mass) and class 2 is uniform, with
equal priors. The Bayes rule picks class 1 where ``density1 > 1``; a tree rule
takes a per-leaf majority vote with ties and empty leaves going to class 2.
Risks are computed exactly from leaf integrals.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import quadsum
from .adversary import PartitionCatalog, grid_points, mix
from .rectfn import WeightedRectFn
from .regress import uniform_points
from .seeding import substream
from .treepart import Partition, SplitTree, leaves


@dataclass(frozen=True)
class ClassSetup:
    density1: WeightedRectFn
    prior: float = 0.5

    def __post_init__(self):
        if self.prior != 0.5:
            raise ValueError("class priors are fixed at 1/2")
        if not math.isclose(self.density1.mass, 1.0, rel_tol=1e-12):
            raise ValueError(f"density1 must have unit mass, got {self.density1.mass!r}")


def make_setup(f: WeightedRectFn) -> ClassSetup:
    """Normalise ``f`` by its exact mass."""
    m = f.mass
    if not m > 0:
        raise ValueError("cannot normalise a function with zero mass")
    return ClassSetup(f.scaled(1.0 / m))


def _partition(q) -> Partition:
    return leaves(q) if isinstance(q, SplitTree) else q


def bayes_rule_many(setup: ClassSetup, points) -> np.ndarray:
    return np.where(setup.density1.evaluate(points) > 1.0, 1, 2)


def bayes_rule(setup: ClassSetup, p) -> int:
    return 1 if setup.density1(p) > 1.0 else 2


# ----------------------------------------------------------------- sampling


@dataclass
class LabeledSample:
    x: np.ndarray
    labels: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def sample_density(f: WeightedRectFn, n: int, rng: np.random.Generator, method: str = "mixture") -> np.ndarray:
    """``n`` points from the density ``f / mass(f)`` on (0,1]^2.

    ``mixture`` picks a term with probability proportional to its mass and a
    uniform point inside it, which is exact under sum semantics.
    ``rejection`` proposes uniform points and accepts with probability
    ``f(x) / sup f``.
    """
    if method == "mixture":
        w = f.weight * f.term_areas
        k = rng.choice(len(f), size=n, p=w / w.sum())
        u = 1.0 - rng.random((n, 2))
        return np.column_stack((
            f.xhi[k] - u[:, 0] * (f.xhi[k] - f.xlo[k]),
            f.yhi[k] - u[:, 1] * (f.yhi[k] - f.ylo[k]),
        ))
    if method == "rejection":
        top = quadsum.sup_value(f)
        out = []
        have = 0
        while have < n:
            x = uniform_points(rng, max(1024, 2 * (n - have)))
            keep = x[rng.random(len(x)) * top < f.evaluate(x)]
            out.append(keep)
            have += len(keep)
        return np.concatenate(out)[:n]
    raise ValueError(f"unknown sampling method {method!r}")


def sample_labeled(setup: ClassSetup, n: int, seed: int, method: str = "mixture") -> LabeledSample:
    """Fair-coin labels, class-1 points from ``density1``, class-2 points uniform."""
    rng = substream(seed, "labeled")
    labels = np.where(rng.random(n) < 0.5, 1, 2)
    x = np.empty((n, 2))
    one = labels == 1
    x[one] = sample_density(setup.density1, int(one.sum()), rng, method)
    x[~one] = uniform_points(rng, int((~one).sum()))
    return LabeledSample(x, labels, seed)


# ----------------------------------------------------------------- rules


def leaf_counts(s: LabeledSample, q) -> tuple[np.ndarray, np.ndarray]:
    q = _partition(q)
    idx = q.locate_many(s.x) if len(s) else np.zeros(0, dtype=np.int64)
    c1 = np.bincount(idx[s.labels == 1], minlength=len(q))
    c2 = np.bincount(idx[s.labels == 2], minlength=len(q))
    return c1, c2


def majority(c1, c2) -> np.ndarray:
    """Leaf decisions: 1 on a strict class-1 majority, otherwise 2."""
    return np.where(np.asarray(c1) > np.asarray(c2), 1, 2)


def tree_decisions(s: LabeledSample, q) -> np.ndarray:
    return majority(*leaf_counts(s, q))


def tree_rule(s: LabeledSample, q, p) -> int:
    q = _partition(q)
    return int(tree_decisions(s, q)[q.leaf_index(p)])


def leaf_masses(setup: ClassSetup, q) -> np.ndarray:
    """Exact class-1 probability of every leaf."""
    q = _partition(q)
    return np.array([quadsum.integrate(setup.density1, b) for b in q.leaves])


def leafwise_bayes(setup: ClassSetup, q) -> np.ndarray:
    """Decide 1 on leaves whose exact density1 average exceeds 1."""
    q = _partition(q)
    return majority(leaf_masses(setup, q), q.areas())


def risk_from_masses(masses: np.ndarray, areas: np.ndarray, decisions) -> float:
    d = np.asarray(decisions)
    if d.shape != masses.shape or not np.all((d == 1) | (d == 2)):
        raise ValueError("decisions must be 1 or 2 on every leaf")
    return 0.5 * math.fsum(np.where(d == 2, masses, areas).tolist())


def exact_risk(setup: ClassSetup, q, leaf_decisions) -> float:
    """``1/2 sum_{decide 2} P1(leaf) + 1/2 sum_{decide 1} area(leaf)``."""
    q = _partition(q)
    return risk_from_masses(leaf_masses(setup, q), q.areas(), leaf_decisions)


@dataclass(frozen=True)
class BayesRisk:
    value: float
    error_bound: float = 0.0


def bayes_risk(setup: ClassSetup) -> BayesRisk:
    """``1/2 integral of min(density1, 1)``, exact over the term arrangement."""
    v = quadsum.integrate_functional(setup.density1, lambda t: np.minimum(t, 1.0))
    return BayesRisk(0.5 * v, 0.0)


@dataclass(frozen=True)
class RuleReport:
    decisions: np.ndarray
    risk: float
    disagreement: float
    partition_id: int | None = None


def rule_report(setup: ClassSetup, q, decisions, grid: int = 256, partition_id: int | None = None) -> RuleReport:
    """Exact risk plus the grid measure of ``{density1 < 1, rule != Bayes}``."""
    q = _partition(q)
    pts = grid_points(grid)
    d = np.asarray(decisions)[q.locate_many(pts)]
    dens = setup.density1.evaluate(pts)
    wrong = (dens < 1.0) & (d != np.where(dens > 1.0, 1, 2))
    return RuleReport(np.asarray(decisions), exact_risk(setup, q, decisions), float(wrong.mean()), partition_id)


@dataclass(frozen=True)
class MCRisk:
    value: float
    std_error: float
    samples: int


def mc_risk(setup: ClassSetup, rule: Callable[[np.ndarray], np.ndarray], n: int, seed: int) -> MCRisk:
    """Test-set estimate of the risk of a vectorised rule."""
    s = sample_labeled(setup, n, seed)
    err = (rule(s.x) != s.labels).astype(float)
    return MCRisk(float(err.mean()), float(err.std(ddof=1) / math.sqrt(n)), n)


# ----------------------------------------------------------------- experiment


STAGE_FIELDS = ["stage", "N", "risk", "bayes_risk", "gap", "disagreement_measure", "cum_misclassified_fraction"]


@dataclass
class SeparationStage:
    stage: int
    partition_id: int
    level: int
    n: int
    risk: float
    bayes_risk: float
    disagreement: float
    cum_misclassified: float
    witness_decision: int
    witness_average: float
    cum_witness_misclassified: float = 0.0

    @property
    def gap(self) -> float:
        return self.risk - self.bayes_risk


@dataclass
class SeparationReport:
    stages: list[SeparationStage]
    alpha: float
    grid: int
    low_density_points: int
    misclassified_any: np.ndarray = field(repr=False)
    witness_misclassified_any: np.ndarray = field(repr=False, default=None)

    @property
    def cum_misclassified_fraction(self) -> float:
        return self.stages[-1].cum_misclassified if self.stages else 0.0

    @property
    def max_gap(self) -> float:
        return max((s.gap for s in self.stages), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STAGE_FIELDS)
        for s in self.stages:
            w.writerow([s.stage, s.n, repr(s.risk), repr(s.bayes_risk), repr(s.gap), repr(s.disagreement), repr(s.cum_misclassified)])
        return buf.getvalue()


def mixed_density(f: WeightedRectFn, alpha: float) -> WeightedRectFn:
    """``(1 - alpha) + alpha f / |f|_1``: unit mass, Bayes rule 2 off the kernels."""
    return mix(WeightedRectFn.constant(1.0), f.scaled(1.0 / f.mass), alpha)


def default_stages(catalog: PartitionCatalog, per_level: int, seed: int) -> list[int]:
    rng = substream(seed, "stages")
    out = []
    for lv, (a, b) in enumerate(zip(catalog.offsets[:-1], catalog.offsets[1:])):
        k = min(per_level, int(b - a))
        out.extend(sorted(int(a) + rng.choice(int(b - a), size=k, replace=False)))
    return out


def separation_experiment(
    catalog: PartitionCatalog,
    f: WeightedRectFn,
    sample_sizes: Sequence[int] | int,
    seed: int,
    alpha: float = 0.02,
    stages: Sequence[int] | None = None,
    per_level: int = 20,
    grid: int = 256,
) -> SeparationReport:
    """Tree rules along catalog partitions versus the Bayes rule.

    The class-1 density is :func:`mixed_density` of ``f``. For stage ``k``
    the ``sample_sizes[k]`` labeled points enter the tree rule only through
    per-leaf class counts, which are drawn exactly as a binomial class split
    followed by multinomial leaf counts with the exact leaf probabilities.
    """
    # with no kernels both classes are uniform
    dens1 = mixed_density(f, alpha) if f.mass > 0 else WeightedRectFn.constant(1.0)
    setup = ClassSetup(dens1)
    if stages is None:
        stages = default_stages(catalog, per_level, seed)
    if isinstance(sample_sizes, (int, np.integer)):
        sample_sizes = [int(sample_sizes)] * len(stages)
    if len(sample_sizes) < len(stages):
        raise ValueError(f"{len(stages)} stages but only {len(sample_sizes)} sample sizes")
    pts = grid_points(grid)
    dens = setup.density1.evaluate(pts)
    low = dens < 1.0
    bayes_pt = np.where(dens > 1.0, 1, 2)
    br = bayes_risk(setup).value
    any_wrong = np.zeros(len(pts), dtype=bool)
    any_witness = np.zeros(len(pts), dtype=bool)
    out = []
    for k, pid in enumerate(stages):
        q = leaves(catalog[pid])
        areas = q.areas()
        masses = quadsum.integrate_boxes(setup.density1, q.bounds_array())
        n = int(sample_sizes[k])
        rng = substream(seed, "separation", k)
        n1 = int(rng.binomial(n, 0.5))
        c1 = rng.multinomial(n1, masses / masses.sum())
        c2 = rng.multinomial(n - n1, areas / areas.sum())
        dec = majority(c1, c2)
        risk = risk_from_masses(masses, areas, dec)
        where = q.locate_many(pts)
        wrong = low & (dec[where] != bayes_pt)
        any_wrong |= wrong
        _, point, _ = catalog.witness(pid)
        wi = q.leaf_index(point)
        any_witness |= wrong & (where == wi)
        out.append(SeparationStage(
            k, int(pid), catalog.level_of(pid), n, risk, br,
            float(wrong.mean()), float(any_wrong[low].mean()) if low.any() else 0.0,
            int(dec[wi]), float(masses[wi] / areas[wi]),
            float(any_witness[low].mean()) if low.any() else 0.0,
        ))
    return SeparationReport(out, alpha, grid, int(low.sum()), any_wrong, any_witness)
