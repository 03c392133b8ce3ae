"""Counterexample functions with certified large averages on fine boxes.

Two kernel shapes are available. ``two_arm`` is the L-shaped set made of two
oblong rectangles along the local axes, with the asymptotic parameter schedule
``beta_n = 1/(n ln^2 n)``, ``eta_n = 1/ln n``, ``gamma_n = sqrt(ln n)``.
``blob`` is a small square of side ``s`` at the local origin; a corner box
``(0,a] x (0,b]`` containing it has average ``gamma s^2 / (ab)``, which is at
least ``T`` on the whole hyperbolic region ``ab <= gamma s^2 / T``.

Desk-scale constructions stack randomly offset tilings of blob kernels until a
target fraction of a certification grid is covered by corner boxes whose exact
average reaches the threshold, then wrap each such box in a fine tree
partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import quadsum
from .boxgeom import BasicBox, Point2, area
from .rectfn import WeightedRectFn
from .seeding import substream
from .treepart import SplitTree, build_enclosing_partition, enclosing_norm


class FeasibilityError(ValueError):
    """The requested construction needs more layers than the configured cap."""

    def __init__(self, message: str, log_layers: float):
        super().__init__(message)
        self.log_layers = log_layers


class DegenerateQueryError(ValueError):
    pass


# ----------------------------------------------------------------- kernels


@dataclass(frozen=True)
class KernelParams:
    shape: str
    beta: float
    eta: float
    gamma: float
    s: float | None = None

    def __post_init__(self):
        if self.shape not in ("two_arm", "blob"):
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        if not (self.beta > 0 and self.gamma > 0 and 0 < self.eta):
            raise ValueError(f"kernel parameters must be positive: {self}")
        if self.shape == "two_arm":
            if not self.eta < 0.5:
                raise ValueError(f"eta must be below 1/2, got {self.eta}")
            if self.beta / self.eta > self.eta:
                raise ValueError("arm width beta/eta must not exceed eta")
        else:
            if self.s is None or not 0 < self.s <= self.eta:
                raise ValueError(f"blob side must lie in (0, eta], got {self.s}")
            if self.eta > 1.0:
                raise ValueError("blob tile side must not exceed 1")

    @property
    def arm_width(self) -> float:
        return self.beta / self.eta

    @classmethod
    def blob(cls, eta: float, gamma: float, s: float) -> "KernelParams":
        return cls("blob", s * s, eta, gamma, s)


def schedule(n: int) -> KernelParams:
    """Two-arm parameters at index ``n`` of the asymptotic schedule."""
    if n < 8:
        raise ValueError(f"n={n}: eta_n = 1/ln n >= 1/2 leaves no room for the placement square; need n >= 8")
    ln = math.log(n)
    return KernelParams("two_arm", 1.0 / (n * ln * ln), 1.0 / ln, math.sqrt(ln))


def kernel_mass(params: KernelParams) -> float:
    if params.shape == "two_arm":
        return params.gamma * params.beta * (2.0 - params.beta / params.eta**2)
    return params.gamma * params.s**2


def make_kernel(params: KernelParams) -> WeightedRectFn:
    """The kernel as a rectangle sum in local coordinates (anchor at the origin)."""
    g, eta = params.gamma, params.eta
    if params.shape == "two_arm":
        w = params.arm_width
        return WeightedRectFn([0.0, w], [w, eta], [0.0, 0.0], [eta, w], [g, g])
    s = params.s
    return WeightedRectFn([0.0], [s], [0.0], [s], [g])


def region_area(params: KernelParams) -> float:
    """Area of the two-arm divergence region: the arms plus ``{xy <= beta}``."""
    if params.shape != "two_arm":
        raise ValueError("region_area is defined for the two_arm shape only")
    b = params.beta
    return b * (1.0 + math.log(params.eta**2 / b))


def in_region(params: KernelParams, x, y):
    """Membership in the two-arm divergence region, local coordinates in (0, eta]."""
    w = params.arm_width
    return (x <= w) | (y <= w) | (x * y <= params.beta)


def _arm_overlap(a, b, w):
    """Area of the two-arm set inside the corner box (0,a] x (0,b], a, b <= eta."""
    ma, mb = min(a, w), min(b, w)
    return ma * b + a * mb - ma * mb


def corner_average(params: KernelParams, a: float, b: float) -> float:
    """Exact kernel average over the corner box (0,a] x (0,b] inside the kernel square."""
    if params.shape == "two_arm":
        return params.gamma * _arm_overlap(a, b, params.arm_width) / (a * b)
    s = params.s
    return params.gamma * min(a, s) * min(b, s) / (a * b)


@dataclass(frozen=True)
class KernelPlacement:
    """A kernel copy anchored at ``origin``.

    With no flips the anchor is the lower-left corner of the placed square and
    the square extends up and to the right; a flip mirrors that axis. The
    scale factors shrink the local frame anisotropically, which is how tiles
    clipped by the unit square carry a proportionally smaller kernel. Box
    averages are invariant under such axis scalings.
    """

    params: KernelParams
    origin: Point2
    flip_x: bool = False
    flip_y: bool = False
    scale_x: float = 1.0
    scale_y: float = 1.0

    def __post_init__(self):
        lo_x, hi_x, lo_y, hi_y = self.square
        if lo_x < 0 or lo_y < 0 or hi_x > 1 or hi_y > 1:
            raise ValueError(f"placed square {self.square} leaves the unit square")

    @property
    def square(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        ex, ey = self.params.eta * self.scale_x, self.params.eta * self.scale_y
        xs = (ox - ex, ox) if self.flip_x else (ox, ox + ex)
        ys = (oy - ey, oy) if self.flip_y else (oy, oy + ey)
        return (xs[0], xs[1], ys[0], ys[1])

    def to_local(self, p) -> tuple[float, float]:
        ox, oy = self.origin
        u = (ox - p[0]) if self.flip_x else (p[0] - ox)
        v = (oy - p[1]) if self.flip_y else (p[1] - oy)
        return u / self.scale_x, v / self.scale_y

    def local_box(self, a: float, b: float) -> BasicBox:
        """Global half-open box of the local corner box (0,a] x (0,b]."""
        ox, oy = self.origin
        ea, eb = a * self.scale_x, b * self.scale_y
        xs = (max(ox - ea, 0.0), ox) if self.flip_x else (ox, min(ox + ea, 1.0))
        ys = (max(oy - eb, 0.0), oy) if self.flip_y else (oy, min(oy + eb, 1.0))
        return BasicBox(xs[0], xs[1], ys[0], ys[1])

    def function(self) -> WeightedRectFn:
        k = make_kernel(self.params)
        rects = [self.local_box(float(b_), float(d_)) for b_, d_ in zip(k.xhi, k.yhi)]
        if self.params.shape == "two_arm":
            # the second arm starts at x = w
            w = self.params.arm_width
            inner = self.local_box(w, w)
            full = self.local_box(self.params.eta, w)
            x0, x1 = (full.xlo, inner.xlo) if self.flip_x else (inner.xhi, full.xhi)
            rects[1] = BasicBox(x0, x1, full.ylo, full.yhi)
        return WeightedRectFn.from_terms((r, float(wt)) for r, wt in zip(rects, k.weight))


@dataclass(frozen=True)
class Witness:
    box: BasicBox
    average: float


def _local_query(k: KernelPlacement, p):
    u, v = k.to_local(p)
    eta = k.params.eta
    if u == 0.0 or v == 0.0:
        raise DegenerateQueryError(f"point {tuple(p)} lies on a local axis of the kernel")
    if not (0.0 < u <= eta and 0.0 < v <= eta):
        return None
    return u, v


def witness_box(k: KernelPlacement, p) -> Witness | None:
    """Best corner-anchored box through ``p`` for one placed kernel."""
    loc = _local_query(k, p)
    if loc is None:
        return None
    u, v = loc
    m = k.params.arm_width if k.params.shape == "two_arm" else k.params.s
    a, b = max(u, m), max(v, m)
    box = k.local_box(a, b)
    if not box.contains(p):
        # the far edge rounded onto the wrong side of p
        (x0,), (x1,) = _contain(np.array([box.xlo]), np.array([box.xhi]), p[0])
        (y0,), (y1,) = _contain(np.array([box.ylo]), np.array([box.yhi]), p[1])
        box = BasicBox(float(x0), min(float(x1), 1.0), float(y0), min(float(y1), 1.0))
    return Witness(box, corner_average(k.params, a, b))


@dataclass(frozen=True)
class HyperbolaProbe:
    best_endpoint_average: float
    unconstrained_average: float


def hyperbola_vertex_probe(k: KernelPlacement, p) -> HyperbolaProbe:
    """Averages of corner boxes with their far vertex on ``xy = beta``.

    Boxes ``(0,a] x (0,beta/a]`` contain the local point ``(x, y)`` exactly
    when ``x <= a <= beta/y``; the two endpoint boxes of that range are
    evaluated and the larger average is reported next to the unconstrained
    corner-box optimum from :func:`witness_box`.
    """
    prm = k.params
    if prm.shape != "two_arm":
        raise ValueError("hyperbola probe needs the two_arm shape")
    loc = _local_query(k, p)
    # relative slack so points placed on the hyperbola itself qualify
    if loc is None or not (loc[0] * loc[1] <= prm.beta * (1 + 1e-12)):
        raise ValueError(f"point {tuple(p)} is not in the hyperbolic part of the divergence region")
    x, y = loc
    lo = max(x, prm.beta / prm.eta)
    hi = min(prm.beta / y, prm.eta)
    ends = [corner_average(prm, a, prm.beta / a) for a in (lo, hi)]
    return HyperbolaProbe(max(ends), witness_box(k, p).average)


# ----------------------------------------------------------------- catalogs


@dataclass
class WitnessCatalog:
    """Certified witness boxes, one per served grid point.

    Each entry's partition is ``build_enclosing_partition(box, mesh)``; it is
    deterministic, so partitions are materialised on demand.
    """

    points: np.ndarray
    boxes: np.ndarray
    thresholds: np.ndarray
    layers: np.ndarray
    tiles: np.ndarray
    mesh: float
    level: int = 0

    def __len__(self) -> int:
        return len(self.points)

    def box(self, i: int) -> BasicBox:
        return BasicBox(*(float(v) for v in self.boxes[i]))

    def partition(self, i: int) -> SplitTree:
        return _enclosing(tuple(float(v) for v in self.boxes[i]), self.mesh)

    def norm(self, i: int) -> float:
        return enclosing_norm(self.box(i), self.mesh)

    @classmethod
    def empty(cls, mesh: float, level: int = 0) -> "WitnessCatalog":
        z = np.zeros((0, 2))
        return cls(z, np.zeros((0, 4)), np.zeros(0), np.zeros(0, int), np.zeros(0, int), mesh, level)


@lru_cache(maxsize=256)
def _enclosing(bounds: tuple[float, float, float, float], mesh: float) -> SplitTree:
    return build_enclosing_partition(BasicBox(*bounds), mesh)


@dataclass(frozen=True)
class Lemma21Target:
    epsilon: float
    threshold: float
    mesh: float
    coverage: float
    margin: float = 1.0 / 64

    def __post_init__(self):
        if not (self.epsilon > 0 and self.mesh > 0):
            raise ValueError("epsilon and mesh must be positive")
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")
        if not 0 < self.coverage < 1:
            raise ValueError("coverage must lie in (0, 1)")
        if not 0 < self.margin < 0.5:
            raise ValueError("margin must lie in (0, 1/2)")


@dataclass
class Lemma21Report:
    achieved_coverage: float
    exact_l1: float
    layer_count: int
    budget_exhausted: bool = False
    trivial: bool = False
    kappa: float = float("nan")
    eta: float = float("nan")
    s: float = float("nan")
    gamma: float = float("nan")
    predicted_layers: float = float("nan")
    inset_points: int = 0
    terms: int = 0


@dataclass
class Lemma21Result:
    f: WeightedRectFn
    catalog: WitnessCatalog
    report: Lemma21Report
    target: Lemma21Target


def grid_points(grid: int) -> np.ndarray:
    """Cell-centre grid ``((i+0.5)/G, (j+0.5)/G)`` in row-major order (x outer)."""
    c = (np.arange(grid) + 0.5) / grid
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack((xx.ravel(), yy.ravel()))


def inset_mask(points: np.ndarray, margin: float) -> np.ndarray:
    return np.all((points >= margin) & (points <= 1.0 - margin), axis=1)


def sizing_log_kappa(threshold: float, epsilon: float, coverage: float) -> float:
    """``ln kappa = (T / eps) ln(1 / (1 - coverage))``, kappa = tile area / witness area."""
    return (threshold / epsilon) * math.log(1.0 / (1.0 - coverage))


def tile_side(mesh: float) -> float:
    """Largest tile side whose corner boxes stay strictly finer than ``mesh``."""
    return min(1.0, mesh / math.sqrt(2.0) * (1.0 - 1e-9))


def _tile_edges(offset: float, eta: float) -> np.ndarray:
    k = math.ceil((1.0 - offset) / eta)
    edges = offset + eta * np.arange(-1, k + 1)
    edges = np.unique(np.clip(edges, 0.0, 1.0))
    return edges


def _tile_flips(edges: np.ndarray, eta: float, flip: bool) -> np.ndarray:
    """Per-tile anchor side along one axis (True: anchor at the tile's upper edge).

    Full tiles follow the layer's flip. Tiles clipped by the unit square anchor
    at their inner edge; anchoring at the boundary would bias clipped tiles'
    local coordinates away from the kernel axes and lose coverage.
    """
    widths = np.diff(edges)
    out = np.full(len(widths), flip)
    clipped = widths < eta * (1.0 - 1e-12)
    if len(widths) > 1:
        out[0] = True if clipped[0] else flip
        out[-1] = False if clipped[-1] else flip
    return out


def _layer_tiled(rng, prm: KernelParams):
    """One randomly offset, randomly oriented tiling of blob kernels."""
    eta = prm.eta
    ox, oy = rng.random(2) * eta
    fx, fy = rng.random(2) < 0.5
    ex, ey = _tile_edges(ox, eta), _tile_edges(oy, eta)
    return ex, ey, _tile_flips(ex, eta, bool(fx)), _tile_flips(ey, eta, bool(fy))


def _anchored(lo, hi, flip, length):
    """Interval of ``length`` inside (lo, hi] at the anchored end."""
    return np.where(flip, np.maximum(hi - length, lo), lo), np.where(flip, hi, np.minimum(lo + length, hi))


# witness corners are stretched by this relative amount so that no box edge
# passes through the grid point it serves
STRETCH = 1e-6


def _contain(lo, hi, v):
    """Widen (lo, hi] if needed so that ``v`` lies strictly inside despite rounding."""
    return np.minimum(lo, np.nextafter(v, -np.inf)), np.maximum(hi, np.nextafter(v, np.inf))


def _layer_terms(ex, ey, fx, fy, prm: KernelParams):
    eta, s = prm.eta, prm.s
    ax, bx, ay, by = ex[:-1], ex[1:], ey[:-1], ey[1:]
    X0, X1 = _anchored(ax, bx, fx, (bx - ax) / eta * s)
    Y0, Y1 = _anchored(ay, by, fy, (by - ay) / eta * s)
    xlo, ylo = np.meshgrid(X0, Y0, indexing="ij")
    xhi, yhi = np.meshgrid(X1, Y1, indexing="ij")
    return xlo.ravel(), xhi.ravel(), ylo.ravel(), yhi.ravel(), np.full(xlo.size, prm.gamma)


def _layer_witness(ex, ey, fx, fy, prm: KernelParams, pts: np.ndarray, threshold: float):
    """Witness boxes of this layer for ``pts``; returns (covered mask, boxes, tile ids)."""
    eta, s = prm.eta, prm.s
    c = prm.gamma * s * s / threshold
    ix = np.clip(np.searchsorted(ex, pts[:, 0], side="left") - 1, 0, len(ex) - 2)
    iy = np.clip(np.searchsorted(ey, pts[:, 1], side="left") - 1, 0, len(ey) - 2)
    ax, bx, ay, by = ex[ix], ex[ix + 1], ey[iy], ey[iy + 1]
    gx, gy = fx[ix], fy[iy]
    sx, sy = (bx - ax) / eta, (by - ay) / eta
    u = np.where(gx, bx - pts[:, 0], pts[:, 0] - ax) / sx
    v = np.where(gy, by - pts[:, 1], pts[:, 1] - ay) / sy
    A, B = np.maximum(u * (1 + STRETCH), s), np.maximum(v * (1 + STRETCH), s)
    # a small safety factor keeps borderline boxes clear of rounding in the exact re-check
    ok = (u > 0) & (v > 0) & (A * B <= c * (1.0 - 1e-9))
    X0, X1 = _contain(*_anchored(ax, bx, gx, sx * A), pts[:, 0])
    Y0, Y1 = _contain(*_anchored(ay, by, gy, sy * B), pts[:, 1])
    boxes = np.column_stack((X0, X1, Y0, Y1))
    tiles = ix * (len(ey) - 1) + iy
    return ok, boxes, tiles


def _layer_random(rng, prm: KernelParams):
    """Kernels at independent uniform anchors, about 1/eta^2 of them per layer."""
    eta = prm.eta
    k = max(1, math.ceil(1.0 / eta**2))
    xy = rng.random((k, 2)) * (1.0 - eta)
    flips = rng.random((k, 2)) < 0.5
    return xy, flips


def _random_terms(xy, flips, prm):
    s, eta = prm.s, prm.eta
    x0 = np.where(flips[:, 0], xy[:, 0] + eta - s, xy[:, 0])
    y0 = np.where(flips[:, 1], xy[:, 1] + eta - s, xy[:, 1])
    n = len(xy)
    return x0, x0 + s, y0, y0 + s, np.full(n, prm.gamma)


def _random_witness(xy, flips, prm, pts, threshold):
    s, eta = prm.s, prm.eta
    c = prm.gamma * s * s / threshold
    ok = np.zeros(len(pts), dtype=bool)
    boxes = np.zeros((len(pts), 4))
    tiles = np.full(len(pts), -1)
    for t, ((x, y), (fx, fy)) in enumerate(zip(xy, flips)):
        u = (x + eta - pts[:, 0]) if fx else (pts[:, 0] - x)
        v = (y + eta - pts[:, 1]) if fy else (pts[:, 1] - y)
        inside = (u > 0) & (u <= eta) & (v > 0) & (v <= eta) & ~ok
        A, B = np.maximum(u * (1 + STRETCH), s), np.maximum(v * (1 + STRETCH), s)
        hit = inside & (A * B <= c * (1.0 - 1e-9))
        if not hit.any():
            continue
        X0, X1 = _contain(*((x + eta - A, x + eta) if fx else (x, x + A)), pts[:, 0])
        Y0, Y1 = _contain(*((y + eta - B, y + eta) if fy else (y, y + B)), pts[:, 1])
        bx = np.column_stack((X0, np.broadcast_to(X1, X0.shape), Y0, np.broadcast_to(Y1, Y0.shape)))
        boxes[hit] = bx[hit]
        tiles[hit] = t
        ok |= hit
    return ok, boxes, tiles


def build_lemma21(
    target: Lemma21Target,
    seed: int,
    grid: int = 256,
    layer_cap: int = 100_000,
    mode: str = "tiled",
    kappa: float | None = None,
    level: int = 0,
) -> Lemma21Result:
    """Stack blob layers until ``target.coverage`` of the inset grid is certified.

    Sizing: a blob kernel on a tile of side ``eta`` with ``kappa`` = tile area
    over witness-box area covers a fraction ``(1 + ln kappa)/kappa`` of its
    tile at mass ``T/kappa`` per unit area, so ``ln kappa = (T/eps) ln(1/(1-c))``
    reaches coverage ``c`` within budget ``eps``. ``kappa`` may be overridden.
    """
    T, eps, mesh = target.threshold, target.epsilon, target.mesh
    pts_all = grid_points(grid)
    inset = inset_mask(pts_all, target.margin)
    pts = pts_all[inset]
    if T == 0:
        rep = Lemma21Report(1.0, 0.0, 0, trivial=True, inset_points=len(pts))
        return Lemma21Result(WeightedRectFn(), WitnessCatalog.empty(mesh, level), rep, target)

    log_kappa = math.log(kappa) if kappa is not None else sizing_log_kappa(T, eps, target.coverage)
    log_layers = math.log(eps) - math.log(T) + log_kappa
    if log_layers > math.log(layer_cap):
        raise FeasibilityError(
            f"T={T}, eps={eps}, coverage={target.coverage}: about exp({log_layers:.4g}) layers needed "
            f"(ln kappa = {log_kappa:.4g}), cap is {layer_cap}",
            log_layers,
        )
    kap = math.exp(log_kappa)
    eta = tile_side(mesh)
    s = eta / kap
    prm = KernelParams.blob(eta, kap * T, s)
    rng = substream(seed, "placement", level)

    covered = np.zeros(len(pts), dtype=bool)
    boxes = np.zeros((len(pts), 4))
    layer_of = np.full(len(pts), -1)
    tile_of = np.full(len(pts), -1)
    chunks = []
    mass = 0.0
    layers = 0
    exhausted = False
    need = math.ceil(target.coverage * len(pts))
    while covered.sum() < need and layers < layer_cap:
        if mode == "tiled":
            ex, ey, fx, fy = _layer_tiled(rng, prm)
            terms = _layer_terms(ex, ey, fx, fy, prm)
        elif mode == "random":
            xy, flips = _layer_random(rng, prm)
            terms = _random_terms(xy, flips, prm)
        else:
            raise ValueError(f"unknown placement mode {mode!r}")
        lm = math.fsum((terms[4] * (terms[1] - terms[0]) * (terms[3] - terms[2])).tolist())
        if mass + lm > eps:
            exhausted = True
            break
        open_ = np.flatnonzero(~covered)
        if mode == "tiled":
            ok, bx, tl = _layer_witness(ex, ey, fx, fy, prm, pts[open_], T)
        else:
            ok, bx, tl = _random_witness(xy, flips, prm, pts[open_], T)
        new = open_[ok]
        boxes[new] = bx[ok]
        layer_of[new] = layers
        tile_of[new] = tl[ok]
        covered[new] = True
        chunks.append(terms)
        mass += lm
        layers += 1

    f = WeightedRectFn(*(np.concatenate([c[k] for c in chunks]) if chunks else () for k in range(5)))
    sel = np.flatnonzero(covered)
    catalog = WitnessCatalog(
        pts[sel], boxes[sel], np.full(len(sel), float(T)), layer_of[sel], tile_of[sel], mesh, level
    )
    rep = Lemma21Report(
        achieved_coverage=float(covered.mean()) if len(pts) else 0.0,
        exact_l1=f.mass,
        layer_count=layers,
        budget_exhausted=exhausted and covered.sum() < need,
        kappa=kap,
        eta=eta,
        s=s,
        gamma=prm.gamma,
        predicted_layers=math.exp(log_layers),
        inset_points=len(pts),
        terms=len(f),
    )
    return Lemma21Result(f, catalog, rep, target)


@dataclass
class CertifiedEntries:
    averages: np.ndarray
    norms: np.ndarray
    ok: np.ndarray


def certify_entries(f: WeightedRectFn, catalog: WitnessCatalog) -> CertifiedEntries:
    """Exact averages of ``f`` over every witness box and the norms of their partitions."""
    n = len(catalog)
    avg = np.empty(n)
    nrm = np.empty(n)
    for i in range(n):
        b = catalog.box(i)
        avg[i] = quadsum.integrate(f, b) / area(b)
        nrm[i] = catalog.norm(i)
    p, b = catalog.points, catalog.boxes
    inside = (p[:, 0] > b[:, 0]) & (p[:, 0] <= b[:, 1]) & (p[:, 1] > b[:, 2]) & (p[:, 1] <= b[:, 3])
    ok = (avg >= catalog.thresholds) & (nrm < catalog.mesh) & inside
    return CertifiedEntries(avg, nrm, ok)


@dataclass
class AmplificationReport:
    """Single-layer weak-type comparison on the certification grid."""

    threshold: float
    rho: float
    mass: float
    certified_fraction: float
    certified_points: int
    grid: int

    @property
    def naive_bound(self) -> float:
        """``|f|_1 / T``, the measure a weak-(1,1) inequality with constant 1 would allow."""
        return self.mass / self.threshold

    @property
    def factor(self) -> float:
        return self.certified_fraction / self.naive_bound if self.mass > 0 else float("inf")


def single_layer_amplification(
    threshold: float, rho: float, seed: int, mesh: float = 0.015, grid: int = 256
) -> AmplificationReport:
    """One layer of blob kernels with witness-to-square area ratio ``rho``.

    About ``1/eta^2`` kernels sit at independent uniform anchors. Each carries
    mass ``T rho eta^2`` while corner boxes with average at least ``T`` cover
    ``rho (1 + ln(1/rho)) eta^2`` of its square. Small squares keep each
    kernel's grid count bounded, so the grid measure concentrates. Every
    counted grid point has its witness average re-checked exactly.
    """
    if not (threshold > 0 and 0 < rho < 1):
        raise ValueError("need threshold > 0 and rho in (0, 1)")
    eta = tile_side(mesh)
    prm = KernelParams.blob(eta, threshold / rho, eta * rho)
    xy, flips = _layer_random(substream(seed, "amplification"), prm)
    f = WeightedRectFn(*_random_terms(xy, flips, prm))
    # grid points inside each kernel square: (i + 0.5)/G for i in a short range
    m = math.ceil(eta * grid) + 1
    base = np.floor(xy * grid - 0.5).astype(np.int64)
    off = np.arange(m + 1)
    ii = (base[:, 0, None, None] + off[None, :, None]).repeat(m + 1, axis=2)
    jj = (base[:, 1, None, None] + off[None, None, :]).repeat(m + 1, axis=1)
    kk = np.broadcast_to(np.arange(len(xy))[:, None, None], ii.shape)
    keep = (ii >= 0) & (ii < grid) & (jj >= 0) & (jj < grid)
    ii, jj, kk = ii[keep], jj[keep], kk[keep]
    px, py = (ii + 0.5) / grid, (jj + 0.5) / grid
    x, y = xy[kk, 0], xy[kk, 1]
    fx, fy = flips[kk, 0], flips[kk, 1]
    u = np.where(fx, x + eta - px, px - x)
    v = np.where(fy, y + eta - py, py - y)
    A, B = np.maximum(u * (1 + STRETCH), prm.s), np.maximum(v * (1 + STRETCH), prm.s)
    c = prm.gamma * prm.s**2 / threshold
    hit = (u > 0) & (u <= eta) & (v > 0) & (v <= eta) & (A * B <= c * (1.0 - 1e-9))
    X0, X1 = _contain(*(np.where(fx, x + eta - A, x), np.where(fx, x + eta, x + A)), px)
    Y0, Y1 = _contain(*(np.where(fy, y + eta - B, y), np.where(fy, y + eta, y + B)), py)
    served = set()
    for i in np.flatnonzero(hit):
        key = (int(ii[i]), int(jj[i]))
        if key in served:
            continue
        b = BasicBox(float(X0[i]), float(X1[i]), float(Y0[i]), float(Y1[i]))
        if b.contains((px[i], py[i])) and quadsum.integrate(f, b) / area(b) >= threshold:
            served.add(key)
    return AmplificationReport(threshold, rho, f.mass, len(served) / grid**2, len(served), grid)


# ----------------------------------------------------------------- composite


@dataclass
class Composite:
    f: WeightedRectFn
    levels: list[Lemma21Result]

    @property
    def catalogs(self) -> list[WitnessCatalog]:
        return [lv.catalog for lv in self.levels]

    @property
    def thresholds(self) -> list[float]:
        return [lv.target.threshold for lv in self.levels]

    @property
    def meshes(self) -> list[float]:
        return [lv.target.mesh for lv in self.levels]


def build_composite(levels: Sequence[Lemma21Target], seed: int, **kw) -> Composite:
    """Sum of per-level constructions; each level keeps its own catalog."""
    levels = list(levels)
    if not levels:
        raise ValueError("need at least one level")
    live = [t for t in levels if t.threshold > 0]
    for a, b in zip(live, live[1:]):
        if not b.threshold > a.threshold:
            raise ValueError("level thresholds must increase strictly")
        if not b.mesh < a.mesh:
            raise ValueError("level meshes must decrease strictly")
    results = [build_lemma21(t, seed, level=i, **kw) for i, t in enumerate(levels)]
    f = WeightedRectFn.concat([r.f for r in results])
    return Composite(f, results)


@dataclass
class PartitionCatalog:
    """Level-ordered flat sequence of catalog partitions Q^(1), Q^(2), ..."""

    catalogs: list[WitnessCatalog]
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.offsets = np.concatenate(([0], np.cumsum([len(c) for c in self.catalogs])))

    def __len__(self) -> int:
        return int(self.offsets[-1])

    def locate_entry(self, n: int) -> tuple[int, int]:
        if not 0 <= n < len(self):
            raise IndexError(n)
        lv = int(np.searchsorted(self.offsets, n, side="right") - 1)
        return lv, n - int(self.offsets[lv])

    def __getitem__(self, n: int) -> SplitTree:
        lv, i = self.locate_entry(n)
        return self.catalogs[lv].partition(i)

    def level_of(self, n: int) -> int:
        return self.locate_entry(n)[0]

    def mesh_of(self, n: int) -> float:
        return self.catalogs[self.level_of(n)].mesh

    def norm_of(self, n: int) -> float:
        lv, i = self.locate_entry(n)
        return self.catalogs[lv].norm(i)

    def witness(self, n: int) -> tuple[BasicBox, np.ndarray, float]:
        lv, i = self.locate_entry(n)
        c = self.catalogs[lv]
        return c.box(i), c.points[i], float(c.thresholds[i])


def build_partition_catalog(composite: Composite) -> PartitionCatalog:
    return PartitionCatalog(composite.catalogs)


def mix(h_background: WeightedRectFn, f: WeightedRectFn, alpha: float) -> WeightedRectFn:
    """Terms of ``(1 - alpha) h + alpha f``."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha == 1:
        return f
    return WeightedRectFn.concat([h_background.scaled(1.0 - alpha), f.scaled(alpha)])
