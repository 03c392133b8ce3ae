"""Nonnegative sums of weighted rectangle indicators, with a uniform-grid index.

The represented function is the pointwise *sum* of ``weight * 1[(xlo,xhi] x (ylo,yhi]]``
over all terms; overlapping terms add. Terms are stored column-wise in numpy
arrays and are immutable once the function is built.
"""

from __future__ import annotations

import math
from functools import cached_property

import numpy as np

from .boxgeom import BasicBox

GRID_CELLS = 256
COARSE_CELLS = 32


class GridIndex:
    """CSR lists of term ids per cell of a ``cells x cells`` grid on the unit square.

    A term is registered in every cell its closed rectangle touches;
    :meth:`candidates` returns a superset of the overlapping terms, and
    callers filter by actual overlap.
    """

    def __init__(self, xlo, xhi, ylo, yhi, cells: int = GRID_CELLS):
        self.cells = cells
        self.size = len(xlo)
        g = cells
        i0 = np.clip(np.floor(xlo * g).astype(np.int64), 0, g - 1)
        i1 = np.clip(np.floor(xhi * g).astype(np.int64), 0, g - 1)
        j0 = np.clip(np.floor(ylo * g).astype(np.int64), 0, g - 1)
        j1 = np.clip(np.floor(yhi * g).astype(np.int64), 0, g - 1)
        self.first_i, self.first_j = i0, j0
        ni, nj = i1 - i0 + 1, j1 - j0 + 1
        per = ni * nj
        total = int(per.sum())
        term = np.repeat(np.arange(len(xlo), dtype=np.int64), per)
        k = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(per) - per, per)
        nj_r = np.repeat(nj, per)
        ci = np.repeat(i0, per) + k // nj_r
        cj = np.repeat(j0, per) + k % nj_r
        cell = ci * g + cj
        order = np.lexsort((term, cell))
        self.term_ids = term[order]
        counts = np.bincount(cell, minlength=g * g)
        self.start = np.zeros(g * g + 1, dtype=np.int64)
        np.cumsum(counts, out=self.start[1:])

    def cell_of(self, v):
        return np.clip(np.floor(np.asarray(v) * self.cells).astype(np.int64), 0, self.cells - 1)

    def candidates(self, xlo, xhi, ylo, yhi) -> np.ndarray:
        """Sorted ids, without repeats, of a superset of the terms overlapping the box.

        A term registered in several touched cells is reported only from the
        cell holding the lower-left corner of its overlap with the box, so no
        deduplication pass is needed. Boxes touching more than an eighth of
        the grid return every term.
        """
        g = self.cells
        i0, i1 = (int(c) for c in self.cell_of([xlo, xhi]))
        j0, j1 = (int(c) for c in self.cell_of([ylo, yhi]))
        if (i1 - i0 + 1) * (j1 - j0 + 1) * 8 > g * g:
            return np.arange(self.size, dtype=np.int64)
        cols = np.arange(i0, i1 + 1)
        starts = self.start[cols * g + j0]
        stops = self.start[cols * g + j1 + 1]
        ids = np.concatenate([self.term_ids[a:b] for a, b in zip(starts, stops)])
        col = np.repeat(cols, stops - starts)
        cells = np.arange(j0, j1 + 1)[None, :] + (cols * g)[:, None]
        cnt = (self.start[cells + 1] - self.start[cells]).ravel()
        row = np.repeat(np.tile(np.arange(j0, j1 + 1), len(cols)), cnt)
        keep = (np.maximum(self.first_i[ids], i0) == col) & (np.maximum(self.first_j[ids], j0) == row)
        return np.sort(ids[keep])


class WeightedRectFn:
    """A finite sum of nonnegative weighted rectangle indicators on (0,1]^2."""

    def __init__(self, xlo=(), xhi=(), ylo=(), yhi=(), weight=(), cells: int = GRID_CELLS):
        arrs = [np.array(a, dtype=np.float64).reshape(-1) for a in (xlo, xhi, ylo, yhi, weight)]
        n = len(arrs[0])
        if any(len(a) != n for a in arrs):
            raise ValueError("term arrays must have equal length")
        self.xlo, self.xhi, self.ylo, self.yhi, self.weight = arrs
        for a in arrs:
            a.setflags(write=False)
        if n:
            if not np.all(np.isfinite(np.stack(arrs))):
                raise ValueError("term data must be finite")
            if self.weight.min() < 0.0:
                raise ValueError("weights must be nonnegative")
            if self.xlo.min() < 0.0 or self.ylo.min() < 0.0 or self.xhi.max() > 1.0 or self.yhi.max() > 1.0:
                raise ValueError("rectangles must lie in the unit square")
            if np.any(self.xlo > self.xhi) or np.any(self.ylo > self.yhi):
                raise ValueError("rectangle bounds out of order")
        self.cells = cells

    @classmethod
    def from_terms(cls, terms) -> "WeightedRectFn":
        """Build from an iterable of ``(BasicBox, weight)`` pairs."""
        rows = [(b.xlo, b.xhi, b.ylo, b.yhi, w) for b, w in terms]
        if not rows:
            return cls()
        return cls(*np.array(rows, dtype=float).T)

    @classmethod
    def constant(cls, value: float) -> "WeightedRectFn":
        return cls([0.0], [1.0], [0.0], [1.0], [value])

    @classmethod
    def concat(cls, fns) -> "WeightedRectFn":
        fns = list(fns)
        if not fns:
            return cls()
        return cls(*(np.concatenate([getattr(f, k) for f in fns]) for k in ("xlo", "xhi", "ylo", "yhi", "weight")))

    def scaled(self, factor: float) -> "WeightedRectFn":
        if factor < 0:
            raise ValueError("scale factor must be nonnegative")
        return WeightedRectFn(self.xlo, self.xhi, self.ylo, self.yhi, self.weight * factor)

    def __len__(self) -> int:
        return len(self.weight)

    def __add__(self, other: "WeightedRectFn") -> "WeightedRectFn":
        return WeightedRectFn.concat([self, other])

    def __repr__(self) -> str:
        return f"WeightedRectFn({len(self)} terms, mass={self.mass:.6g})"

    @property
    def terms(self) -> list[tuple[BasicBox, float]]:
        return [
            (BasicBox(float(a), float(b), float(c), float(d)), float(w))
            for a, b, c, d, w in zip(self.xlo, self.xhi, self.ylo, self.yhi, self.weight)
        ]

    @cached_property
    def term_areas(self) -> np.ndarray:
        return (self.xhi - self.xlo) * (self.yhi - self.ylo)

    @cached_property
    def mass(self) -> float:
        """Exact L1 norm, compensated summation in term-id order."""
        return math.fsum((self.weight * self.term_areas).tolist())

    @cached_property
    def index(self) -> GridIndex:
        return GridIndex(self.xlo, self.xhi, self.ylo, self.yhi, self.cells)

    @cached_property
    def coarse_index(self) -> GridIndex:
        """Second grid for wide queries, where the fine grid touches too many cells."""
        return GridIndex(self.xlo, self.xhi, self.ylo, self.yhi, min(COARSE_CELLS, self.cells))

    @cached_property
    def sup_bound(self) -> float:
        """Upper bound on sup f: the largest per-cell sum of registered weights."""
        if not len(self):
            return 0.0
        idx = self.index
        cell_sums = np.add.reduceat(
            np.append(self.weight[idx.term_ids], 0.0), np.minimum(idx.start[:-1], len(idx.term_ids))
        )
        empty = idx.start[1:] == idx.start[:-1]
        cell_sums[empty] = 0.0
        return float(cell_sums.max())

    def query(self, b) -> np.ndarray:
        """Ids of terms whose rectangle overlaps ``b`` in positive area, ascending."""
        xlo, xhi, ylo, yhi = b.bounds if isinstance(b, BasicBox) else b
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        wide = max(xhi - xlo, yhi - ylo) * COARSE_CELLS > 2.0
        ids = (self.coarse_index if wide else self.index).candidates(xlo, xhi, ylo, yhi)
        keep = (
            (np.minimum(self.xhi[ids], xhi) > np.maximum(self.xlo[ids], xlo))
            & (np.minimum(self.yhi[ids], yhi) > np.maximum(self.ylo[ids], ylo))
        )
        return ids[keep]

    def query_scan(self, b) -> np.ndarray:
        xlo, xhi, ylo, yhi = b.bounds if isinstance(b, BasicBox) else b
        keep = (np.minimum(self.xhi, xhi) > np.maximum(self.xlo, xlo)) & (
            np.minimum(self.yhi, yhi) > np.maximum(self.ylo, ylo)
        )
        return np.flatnonzero(keep)

    def evaluate(self, points) -> np.ndarray:
        """Pointwise values at an ``(n, 2)`` array of points (half-open membership)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        out = np.zeros(len(pts))
        if not len(self) or not len(pts):
            return out
        idx = self.index
        # floor is monotone, so the point's own cell lists every term containing it
        c = idx.cell_of(pts[:, 0]) * idx.cells + idx.cell_of(pts[:, 1])
        cnt = idx.start[c + 1] - idx.start[c]
        total = int(cnt.sum())
        if not total:
            return out
        pi = np.repeat(np.arange(len(pts)), cnt)
        off = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ti = idx.term_ids[np.repeat(idx.start[c], cnt) + off]
        x, y = pts[pi, 0], pts[pi, 1]
        hit = (x > self.xlo[ti]) & (x <= self.xhi[ti]) & (y > self.ylo[ti]) & (y <= self.yhi[ti])
        out += np.bincount(pi[hit], weights=self.weight[ti[hit]], minlength=len(pts))
        return out

    def evaluate_scan(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        out = np.zeros(len(pts))
        for a, b, c, d, w in zip(self.xlo, self.xhi, self.ylo, self.yhi, self.weight):
            m = (pts[:, 0] > a) & (pts[:, 0] <= b) & (pts[:, 1] > c) & (pts[:, 1] <= d)
            out[m] += w
        return out

    def __call__(self, p) -> float:
        return float(self.evaluate(np.array([p], dtype=float))[0])


# ---------------------------------------------------------------- text format

FN_HEADER = "BOXFN 1"


def dumps_fn(f: WeightedRectFn) -> str:
    lines = [f"{FN_HEADER} {len(f)} {f.mass.hex()} {f.mass!r}"]
    for row in zip(f.xlo, f.xhi, f.ylo, f.yhi, f.weight):
        lines.append(" ".join(float(v).hex() for v in row))
    return "\n".join(lines) + "\n"


def loads_fn(text: str) -> WeightedRectFn:
    lines = text.splitlines()
    head = lines[0].split()
    if " ".join(head[:2]) != FN_HEADER:
        raise ValueError(f"not a {FN_HEADER} document")
    n = int(head[2])
    mass = float.fromhex(head[3])
    rows = [[float.fromhex(v) for v in ln.split()] for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise ValueError(f"header declares {n} terms, found {len(rows)}")
    f = WeightedRectFn(*np.array(rows, dtype=float).reshape(-1, 5).T)
    if f.mass != mass:
        raise ValueError(f"mass mismatch: header {mass!r}, recomputed {f.mass!r}")
    return f
