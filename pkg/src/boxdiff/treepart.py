"""Rooted binary trees of axis-parallel splits and their leaf partitions.

Node ids follow the CART convention: every child id is larger than its parent
id, the root is the smallest id, and a node is terminal exactly when it has no
children. Splitting a box at ``t`` sends ``coord <= t`` to the left child, so
every leaf is a half-open box ``(lo, hi]`` and point location is single-valued.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .boxgeom import UNIT_BOX, BasicBox, area, as_point, diameter, split


class TreeStructureError(ValueError):
    """Raised when a tree violates a structural invariant."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("; ".join(f"node {nid}: {msg}" for nid, msg in report.failures))


@dataclass(frozen=True)
class Node:
    id: int
    axis: str | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None

    @property
    def is_terminal(self) -> bool:
        return self.left is None and self.right is None


class SplitTree:
    """A finite rooted binary tree whose internal nodes carry axis splits.

    ``target`` and ``target_exceeds_mesh`` are set by
    :func:`build_enclosing_partition` and are ``None``/``False`` otherwise.
    """

    def __init__(
        self,
        nodes: Mapping[int, Node] | Iterable[Node],
        target: BasicBox | None = None,
        target_exceeds_mesh: bool = False,
    ):
        if isinstance(nodes, Mapping):
            nodes = nodes.values()
        self.nodes: dict[int, Node] = {n.id: n for n in sorted(nodes, key=lambda n: n.id)}
        if not self.nodes:
            raise ValueError("a tree needs at least one node")
        self.target = target
        self.target_exceeds_mesh = target_exceeds_mesh

    @property
    def root(self) -> int:
        return next(iter(self.nodes))

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other) -> bool:
        return isinstance(other, SplitTree) and self.nodes == other.nodes

    def __repr__(self) -> str:
        return f"SplitTree({len(self.nodes)} nodes, root={self.root})"

    def extend(self, leaf_id: int, axis: str, threshold: float) -> "SplitTree":
        """A copy with terminal node ``leaf_id`` split at ``threshold``."""
        node = self.nodes[leaf_id]
        if not node.is_terminal:
            raise ValueError(f"node {leaf_id} is not terminal")
        nxt = max(self.nodes) + 1
        nodes = dict(self.nodes)
        nodes[leaf_id] = Node(leaf_id, axis, float(threshold), nxt, nxt + 1)
        nodes[nxt] = Node(nxt)
        nodes[nxt + 1] = Node(nxt + 1)
        return SplitTree(nodes)


@dataclass
class ValidationReport:
    failures: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, node_id: int, message: str) -> None:
        self.failures.append((node_id, message))


def validate(t: SplitTree) -> ValidationReport:
    report = ValidationReport()
    nodes = t.nodes
    root = t.root
    parents: dict[int, list[int]] = {nid: [] for nid in nodes}
    for nid, node in nodes.items():
        if not isinstance(nid, (int, np.integer)) or nid <= 0:
            report.fail(nid, "ids must be positive integers")
        if (node.left is None) != (node.right is None):
            report.fail(nid, "a node has either two children or none")
            continue
        has_split = node.axis is not None or node.threshold is not None
        if node.is_terminal:
            if has_split:
                report.fail(nid, "terminal node carries a split")
            continue
        if node.axis not in ("x", "y") or node.threshold is None:
            report.fail(nid, "internal node needs an axis in {x, y} and a threshold")
        for child in (node.left, node.right):
            if child <= nid:
                report.fail(nid, f"ids strictly increase from parent to child (child {child})")
            if child not in nodes:
                report.fail(nid, f"child {child} does not exist")
            else:
                parents[child].append(nid)
        if node.left == node.right:
            report.fail(nid, "left and right child coincide")
    for nid, ps in parents.items():
        if nid == root:
            if ps:
                report.fail(nid, "root has a parent")
        elif len(ps) != 1:
            report.fail(nid, f"expected exactly one parent, found {len(ps)}")
    if not report.ok:
        return report

    # geometric checks need a well-formed tree
    stack = [(root, UNIT_BOX)]
    while stack:
        nid, box = stack.pop()
        node = nodes[nid]
        if node.is_terminal:
            if area(box) <= 0.0:
                report.fail(nid, "leaf has zero area")
            continue
        lo, hi = (box.xlo, box.xhi) if node.axis == "x" else (box.ylo, box.yhi)
        thr = node.threshold
        if not (math.isfinite(thr) and 0.0 < thr < 1.0 and lo < thr < hi):
            report.fail(nid, f"threshold {thr} outside parent extent ({lo}, {hi})")
            continue
        left, right = split(box, node.axis, thr)
        stack.append((node.right, right))
        stack.append((node.left, left))
    return report


class Partition:
    """Leaf boxes of a split tree, in depth-first (left before right) order."""

    def __init__(self, leaves, tree: SplitTree | None = None, leaf_nodes=None, source=None):
        self.leaves: tuple[BasicBox, ...] = tuple(leaves)
        self.tree = tree
        self.leaf_nodes: tuple[int, ...] = tuple(leaf_nodes) if leaf_nodes is not None else ()
        self.source = source
        self._flat = None

    def __len__(self) -> int:
        return len(self.leaves)

    def __iter__(self):
        return iter(self.leaves)

    def bounds_array(self) -> np.ndarray:
        return np.array([b.bounds for b in self.leaves], dtype=float).reshape(-1, 4)

    def areas(self) -> np.ndarray:
        b = self.bounds_array()
        return (b[:, 1] - b[:, 0]) * (b[:, 3] - b[:, 2])

    def leaf_index(self, p) -> int:
        p = as_point(p)
        if p.x <= 0.0 or p.y <= 0.0:
            raise ValueError(f"point {tuple(p)} outside (0,1]^2")
        if self.tree is None:
            hits = [i for i, b in enumerate(self.leaves) if b.contains(p)]
            if len(hits) != 1:
                raise ValueError(f"point {tuple(p)} lies in {len(hits)} leaves")
            return hits[0]
        nodes = self.tree.nodes
        nid = self.tree.root
        node = nodes[nid]
        while not node.is_terminal:
            v = p.x if node.axis == "x" else p.y
            nid = node.left if v <= node.threshold else node.right
            node = nodes[nid]
        return self._leaf_pos[nid]

    @property
    def _leaf_pos(self) -> dict[int, int]:
        if self._flat is None:
            self._build_flat()
        return self._flat[5]

    def _build_flat(self):
        ids = list(self.tree.nodes)
        pos = {nid: i for i, nid in enumerate(ids)}
        axis = np.full(len(ids), -1, dtype=np.int8)
        thr = np.zeros(len(ids))
        left = np.zeros(len(ids), dtype=np.int64)
        right = np.zeros(len(ids), dtype=np.int64)
        leaf_of = np.full(len(ids), -1, dtype=np.int64)
        leaf_pos = {nid: i for i, nid in enumerate(self.leaf_nodes)}
        for nid, node in self.tree.nodes.items():
            i = pos[nid]
            if node.is_terminal:
                leaf_of[i] = leaf_pos[nid]
            else:
                axis[i] = 0 if node.axis == "x" else 1
                thr[i] = node.threshold
                left[i] = pos[node.left]
                right[i] = pos[node.right]
        self._flat = (axis, thr, left, right, leaf_of, leaf_pos)

    def locate_many(self, points) -> np.ndarray:
        """Leaf index for each row of an ``(n, 2)`` array of points in (0,1]^2."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if pts.size and (pts.min() <= 0.0 or pts.max() > 1.0):
            raise ValueError("points must lie in (0,1]^2")
        if self.tree is None:
            out = np.full(len(pts), -1, dtype=np.int64)
            for i, b in enumerate(self.leaves):
                m = (pts[:, 0] > b.xlo) & (pts[:, 0] <= b.xhi) & (pts[:, 1] > b.ylo) & (pts[:, 1] <= b.yhi)
                out[m] = i
            return out
        if self._flat is None:
            self._build_flat()
        axis, thr, left, right, leaf_of, _ = self._flat
        cur = np.zeros(len(pts), dtype=np.int64)
        active = np.flatnonzero(axis[cur] >= 0)
        while active.size:
            c = cur[active]
            v = pts[active, axis[c]]
            cur[active] = np.where(v <= thr[c], left[c], right[c])
            active = active[axis[cur[active]] >= 0]
        return leaf_of[cur]


def leaves(t: SplitTree) -> Partition:
    report = validate(t)
    if not report.ok:
        raise TreeStructureError(report)
    boxes, ids = [], []
    stack = [(t.root, UNIT_BOX)]
    nodes = t.nodes
    while stack:
        nid, box = stack.pop()
        node = nodes[nid]
        if node.is_terminal:
            boxes.append(box)
            ids.append(nid)
            continue
        lo, hi = split(box, node.axis, node.threshold)
        stack.append((node.right, hi))
        stack.append((node.left, lo))
    return Partition(boxes, t, ids)


def locate(q: Partition, p) -> BasicBox:
    return q.leaves[q.leaf_index(p)]


def norm(q: Partition) -> float:
    return max(diameter(b) for b in q.leaves)


class _Builder:
    def __init__(self):
        self.nodes: dict[int, Node] = {}
        self.next_id = 2

    def split(self, nid: int, box: BasicBox, axis: str, thr: float):
        left, right = self.next_id, self.next_id + 1
        self.next_id += 2
        self.nodes[nid] = Node(nid, axis, thr, left, right)
        return (left, right), split(box, axis, thr)

    def refine(self, nid: int, box: BasicBox, mesh: float):
        stack = [(nid, box)]
        while stack:
            nid, box = stack.pop()
            if diameter(box) < mesh:
                self.nodes[nid] = Node(nid)
                continue
            if box.width >= box.height:
                axis, thr = "x", 0.5 * (box.xlo + box.xhi)
            else:
                axis, thr = "y", 0.5 * (box.ylo + box.yhi)
            (l, r), (lb, rb) = self.split(nid, box, axis, thr)
            stack.append((r, rb))
            stack.append((l, lb))


def _guillotine_cuts(target: BasicBox):
    # (axis, threshold, side kept for the target)
    return (
        ("x", target.xlo, "right"),
        ("x", target.xhi, "left"),
        ("y", target.ylo, "right"),
        ("y", target.yhi, "left"),
    )


def _check_target(target: BasicBox, mesh: float) -> BasicBox:
    if not mesh > 0.0:
        raise ValueError(f"mesh must be positive, got {mesh}")
    if area(target) <= 0.0:
        raise ValueError(f"target box has zero area: {target}")
    return target.canonical()


def build_enclosing_partition(target: BasicBox, mesh: float) -> SplitTree:
    """A tree with ``target`` as one leaf and every other leaf of diameter < mesh.

    At most four guillotine cuts isolate the target; each discarded piece is
    halved along its longer side until its cells are finer than ``mesh``.
    """
    target = _check_target(target, mesh)
    b = _Builder()
    cur, box = 1, UNIT_BOX
    for axis, thr, keep in _guillotine_cuts(target):
        lo, hi = (box.xlo, box.xhi) if axis == "x" else (box.ylo, box.yhi)
        if not lo < thr < hi:
            continue
        (l, r), (lb, rb) = b.split(cur, box, axis, thr)
        if keep == "right":
            b.refine(l, lb, mesh)
            cur, box = r, rb
        else:
            b.refine(r, rb, mesh)
            cur, box = l, lb
    b.nodes[cur] = Node(cur)
    return SplitTree(b.nodes, target=box, target_exceeds_mesh=diameter(box) >= mesh)


def enclosing_norm(target: BasicBox, mesh: float) -> float:
    """Norm of ``leaves(build_enclosing_partition(target, mesh))`` without building it.

    Halving a w-by-h piece along its longer side keeps all cells congruent,
    so one cell per discarded piece determines the maximum.
    """
    target = _check_target(target, mesh)
    box = UNIT_BOX
    worst = diameter(target)
    for axis, thr, keep in _guillotine_cuts(target):
        lo, hi = (box.xlo, box.xhi) if axis == "x" else (box.ylo, box.yhi)
        if not lo < thr < hi:
            continue
        left, right = split(box, axis, thr)
        piece, box = (left, right) if keep == "right" else (right, left)
        w, h = piece.width, piece.height
        while math.hypot(w, h) >= mesh:
            if w >= h:
                w *= 0.5
            else:
                h *= 0.5
        worst = max(worst, math.hypot(w, h))
    return worst


# ---------------------------------------------------------------- text format

TREE_HEADER = "SPLITTREE 1"


def _fmt(v) -> str:
    return "-" if v is None else (float(v).hex() if isinstance(v, float) else str(v))


def dumps_tree(t: SplitTree) -> str:
    lines = [TREE_HEADER, f"root {t.root}"]
    if t.target is not None:
        lines.append("target " + " ".join(v.hex() for v in t.target.bounds) + f" {int(t.target_exceeds_mesh)}")
    for n in t.nodes.values():
        lines.append(f"{n.id} {_fmt(n.axis)} {_fmt(n.threshold)} {_fmt(n.left)} {_fmt(n.right)}")
    return "\n".join(lines) + "\n"


def loads_tree(text: str) -> SplitTree:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != TREE_HEADER:
        raise ValueError(f"not a {TREE_HEADER} document")
    nodes, target, exceeds, root = [], None, False, None
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "root":
            root = int(parts[1])
        elif parts[0] == "target":
            target = BasicBox(*(float.fromhex(v) for v in parts[1:5]))
            exceeds = bool(int(parts[5]))
        else:
            nid, axis, thr, left, right = parts
            nodes.append(
                Node(
                    int(nid),
                    None if axis == "-" else axis,
                    None if thr == "-" else float.fromhex(thr),
                    None if left == "-" else int(left),
                    None if right == "-" else int(right),
                )
            )
    t = SplitTree(nodes, target=target, target_exceeds_mesh=exceeds)
    if root is not None and root != t.root:
        raise ValueError(f"declared root {root} is not the smallest id {t.root}")
    return t
