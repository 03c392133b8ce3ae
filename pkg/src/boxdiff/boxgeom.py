"""Axis-parallel boxes on the closed unit square.

A :class:`BasicBox` carries one open/closed flag per edge. Partition leaves use
the half-open form ``(lo, hi]`` on both axes so neighbouring leaves share no
points; covers built from open boxes set all four flags to ``False``.
Area and integration never look at the flags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple


class Point2(NamedTuple):
    x: float
    y: float


def as_point(p) -> Point2:
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"point coordinates must be finite, got {(x, y)}")
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"point {(x, y)} lies outside the unit square")
    return Point2(x, y)


@dataclass(frozen=True, slots=True)
class BasicBox:
    xlo: float
    xhi: float
    ylo: float
    yhi: float
    xlo_closed: bool = False
    xhi_closed: bool = True
    ylo_closed: bool = False
    yhi_closed: bool = True

    def __post_init__(self):
        for v in (self.xlo, self.xhi, self.ylo, self.yhi):
            if not math.isfinite(v):
                raise ValueError(f"box bounds must be finite: {self}")
        if self.xlo > self.xhi or self.ylo > self.yhi:
            raise ValueError(f"box bounds out of order: {self}")
        if self.xlo < 0.0 or self.ylo < 0.0 or self.xhi > 1.0 or self.yhi > 1.0:
            raise ValueError(f"box not contained in the unit square: {self}")

    @classmethod
    def half_open(cls, xlo, xhi, ylo, yhi) -> "BasicBox":
        return cls(float(xlo), float(xhi), float(ylo), float(yhi))

    @classmethod
    def open(cls, xlo, xhi, ylo, yhi) -> "BasicBox":
        return cls(float(xlo), float(xhi), float(ylo), float(yhi), False, False, False, False)

    @classmethod
    def closed(cls, xlo, xhi, ylo, yhi) -> "BasicBox":
        return cls(float(xlo), float(xhi), float(ylo), float(yhi), True, True, True, True)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.xlo, self.xhi, self.ylo, self.yhi)

    @property
    def width(self) -> float:
        return self.xhi - self.xlo

    @property
    def height(self) -> float:
        return self.yhi - self.ylo

    def canonical(self) -> "BasicBox":
        """The same bounds in half-open ``(lo, hi]`` form."""
        return BasicBox(self.xlo, self.xhi, self.ylo, self.yhi)

    def contains(self, p) -> bool:
        return contains(self, p)


UNIT_BOX = BasicBox(0.0, 1.0, 0.0, 1.0)


def _inside(v, lo, hi, lo_closed, hi_closed) -> bool:
    above = v >= lo if lo_closed else v > lo
    below = v <= hi if hi_closed else v < hi
    return above and below


def contains(b: BasicBox, p) -> bool:
    x, y = p
    return _inside(x, b.xlo, b.xhi, b.xlo_closed, b.xhi_closed) and _inside(
        y, b.ylo, b.yhi, b.ylo_closed, b.yhi_closed
    )


def _tighter_lo(v1, c1, v2, c2):
    if v1 > v2:
        return v1, c1
    if v2 > v1:
        return v2, c2
    return v1, c1 and c2


def _tighter_hi(v1, c1, v2, c2):
    if v1 < v2:
        return v1, c1
    if v2 < v1:
        return v2, c2
    return v1, c1 and c2


def intersect(b1: BasicBox, b2: BasicBox) -> BasicBox | None:
    """Intersection of two boxes, or ``None`` when it is empty.

    A zero-width intersection survives only when both bounding edges on that
    axis are closed (two boxes sharing a closed edge).
    """
    xlo, xlo_c = _tighter_lo(b1.xlo, b1.xlo_closed, b2.xlo, b2.xlo_closed)
    xhi, xhi_c = _tighter_hi(b1.xhi, b1.xhi_closed, b2.xhi, b2.xhi_closed)
    ylo, ylo_c = _tighter_lo(b1.ylo, b1.ylo_closed, b2.ylo, b2.ylo_closed)
    yhi, yhi_c = _tighter_hi(b1.yhi, b1.yhi_closed, b2.yhi, b2.yhi_closed)
    for lo, hi, lo_c, hi_c in ((xlo, xhi, xlo_c, xhi_c), (ylo, yhi, ylo_c, yhi_c)):
        if lo > hi:
            return None
        if lo == hi and not (lo_c and hi_c):
            return None
    return BasicBox(xlo, xhi, ylo, yhi, xlo_c, xhi_c, ylo_c, yhi_c)


def area(b: BasicBox) -> float:
    return (b.xhi - b.xlo) * (b.yhi - b.ylo)


def diameter(b: BasicBox) -> float:
    return math.hypot(b.xhi - b.xlo, b.yhi - b.ylo)


def split(b: BasicBox, axis: str, threshold: float) -> tuple[BasicBox, BasicBox]:
    """Cut ``b`` at ``threshold``; the left part keeps ``<= threshold``."""
    if axis == "x":
        if not b.xlo < threshold < b.xhi:
            raise ValueError(f"threshold {threshold} not inside x-extent of {b}")
        left = BasicBox(b.xlo, threshold, b.ylo, b.yhi, b.xlo_closed, True, b.ylo_closed, b.yhi_closed)
        right = BasicBox(threshold, b.xhi, b.ylo, b.yhi, False, b.xhi_closed, b.ylo_closed, b.yhi_closed)
    elif axis == "y":
        if not b.ylo < threshold < b.yhi:
            raise ValueError(f"threshold {threshold} not inside y-extent of {b}")
        left = BasicBox(b.xlo, b.xhi, b.ylo, threshold, b.xlo_closed, b.xhi_closed, b.ylo_closed, True)
        right = BasicBox(b.xlo, b.xhi, threshold, b.yhi, b.xlo_closed, b.xhi_closed, False, b.yhi_closed)
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    return left, right
