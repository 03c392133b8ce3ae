"""Command-line driver: build, certify, verify, regress, classify, bench.

Every command reads a flat ``key=value`` config (``--config``), writes its
outputs under ``--out`` and finishes with ``manifest.<command>.txt`` holding
the full parameter set, seed and SHA-256 digests of the files it wrote. A
manifest is itself a valid config, so
``boxdiff build --config out/manifest.build.txt --out again`` repeats a run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, quadsum
from .adversary import (
    Composite,
    FeasibilityError,
    Lemma21Target,
    PartitionCatalog,
    WitnessCatalog,
    build_composite,
    grid_points,
    inset_mask,
)
from .boxgeom import BasicBox, area
from .rectfn import WeightedRectFn, dumps_fn, loads_fn
from .seeding import substream
from .treepart import dumps_tree, enclosing_norm, leaves, loads_tree
from .treepart import norm as tree_norm

log = logging.getLogger("boxdiff")

EXIT_FAIL, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_IO = 1, 2, 3, 4

DEFAULTS = {
    # threshold:mesh:epsilon:coverage per level
    "levels": "2:0.3:1:0.9, 4:0.15:1:0.9, 8:0.08:1:0.7",
    "margin": "0.015625",
    "mode": "tiled",
    "layer_cap": "100000",
    "partition_files": "3",
    "eps": "0.1",
    "confidence": "0.9",
    "area_floor": "0.001",
    "cap": "10000000",
    "on_cap": "clamp",
    "stages": "",
    "alpha": "0.02",
    "sample_size": "10000000000000",
    "per_level": "20",
    "bench_terms": "1000,10000,100000",
    "bench_areas": "1,0.01,0.0001",
    "bench_queries": "200",
    "plot": "0",
    "verify_rebuild": "200",
}


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------- config


def read_config(path: Path | None) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` comments. Manifest files are accepted."""
    cfg = {}
    if path is None:
        return cfg
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: malformed line {raw!r}")
        k, v = (t.strip() for t in line.split("=", 1))
        if k.startswith("config."):
            cfg[k[len("config."):]] = v
        elif k == "run.seed":
            cfg["seed"] = v
        elif not k.startswith(("run.", "digest.")):
            cfg[k] = v
    return cfg


@dataclass(frozen=True)
class LevelSpec:
    threshold: float
    mesh: float
    epsilon: float
    coverage: float


def parse_levels(text: str) -> list[LevelSpec]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 4:
            raise UsageError(f"level {part!r} must be threshold:mesh:epsilon:coverage")
        out.append(LevelSpec(*(float(b) for b in bits)))
    if not out:
        raise UsageError("no levels configured")
    return out


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict[str, str], seed: int, files: list[Path], started: float) -> Path:
    lines = [
        f"run.command={command}",
        f"run.seed={seed}",
        f"run.version={__version__}",
        f"run.numpy={np.__version__}",
        # wall-clock fields
        f"run.started_utc={datetime.fromtimestamp(started, timezone.utc).isoformat()}",
        f"run.elapsed_s={time.time() - started:.3f}",
    ]
    lines += [f"config.{k}={cfg[k]}" for k in sorted(cfg)]
    lines += [f"digest.{p.relative_to(out).as_posix()}={sha256(p)}" for p in sorted(files)]
    path = out / f"manifest.{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# ----------------------------------------------------------------- catalog files

CAT_HEADER = "BOXCAT 1"


def _hex(v) -> str:
    return float(v).hex()


def dumps_catalog(composite: Composite, files: dict[int, str]) -> str:
    """Levels, then one entry per certified grid point.

    Entry: ``id level px py xlo xhi ylo yhi threshold threshold-hex partition``
    with coordinates in hexadecimal. ``partition`` names a tree file relative
    to the catalog, or ``@enclosing`` when the partition is to be rebuilt with
    ``build_enclosing_partition(box, mesh)``.
    """
    cats = composite.catalogs
    lines = [f"{CAT_HEADER} {sum(len(c) for c in cats)} {len(cats)}"]
    for k, lv in enumerate(composite.levels):
        t = lv.target
        lines.append(f"level {k} {t.threshold!r} {_hex(t.threshold)} {_hex(t.mesh)} {len(lv.catalog)}")
    n = 0
    for k, c in enumerate(cats):
        for i in range(len(c)):
            px, py = c.points[i]
            b = c.boxes[i]
            thr = float(c.thresholds[i])
            name = files.get(n, "@enclosing")
            lines.append(
                f"{n} {k} {_hex(px)} {_hex(py)} {' '.join(_hex(v) for v in b)} {thr!r} {_hex(thr)} {name}"
            )
            n += 1
    return "\n".join(lines) + "\n"


@dataclass
class LoadedCatalog:
    catalog: PartitionCatalog
    files: dict[int, str]
    base: Path

    def tree(self, n: int):
        name = self.files.get(n)
        if name is None:
            return self.catalog[n]
        return loads_tree((self.base / name).read_text())


def loads_catalog(text: str, base: Path) -> LoadedCatalog:
    lines = text.splitlines()
    head = lines[0].split()
    if " ".join(head[:2]) != CAT_HEADER:
        raise ValueError(f"not a {CAT_HEADER} document")
    total, nlev = int(head[2]), int(head[3])
    levels = []
    for ln in lines[1:1 + nlev]:
        _, k, _, thr_hex, mesh_hex, count = ln.split()
        levels.append((float.fromhex(thr_hex), float.fromhex(mesh_hex), int(count)))
    rows = [ln.split() for ln in lines[1 + nlev:] if ln.strip()]
    if len(rows) != total:
        raise ValueError(f"header declares {total} entries, found {len(rows)}")
    files = {}
    per = [[] for _ in levels]
    for r in rows:
        n, k = int(r[0]), int(r[1])
        vals = [float.fromhex(v) for v in r[2:8]]
        per[k].append((vals[:2], vals[2:], float.fromhex(r[9])))
        if r[10] != "@enclosing":
            files[n] = r[10]
    cats = []
    for k, (thr, mesh, count) in enumerate(levels):
        e = per[k]
        if len(e) != count:
            raise ValueError(f"level {k} declares {count} entries, found {len(e)}")
        pts = np.array([p for p, _, _ in e]).reshape(-1, 2)
        bxs = np.array([b for _, b, _ in e]).reshape(-1, 4)
        thrs = np.array([t for _, _, t in e])
        z = np.zeros(len(e), dtype=int)
        cats.append(WitnessCatalog(pts, bxs, thrs, z, z, mesh, k))
    return LoadedCatalog(PartitionCatalog(cats), files, base)


# ----------------------------------------------------------------- commands


def targets_from(cfg) -> list[Lemma21Target]:
    margin = float(cfg["margin"])
    return [Lemma21Target(l.epsilon, l.threshold, l.mesh, l.coverage, margin) for l in parse_levels(cfg["levels"])]


def cmd_build(cfg, seed: int, out: Path, grid: int) -> list[Path]:
    targets = targets_from(cfg)
    comp = build_composite(targets, seed, grid=grid, layer_cap=int(cfg["layer_cap"]), mode=cfg["mode"])
    files = []
    fn = out / "f.boxfn"
    fn.write_text(dumps_fn(comp.f))
    files.append(fn)
    pcat = PartitionCatalog(comp.catalogs)
    # a few entries per level get an explicit tree file
    names = {}
    (out / "partitions").mkdir(exist_ok=True)
    k_files = int(cfg["partition_files"])
    for lv in range(len(comp.catalogs)):
        lo, hi = int(pcat.offsets[lv]), int(pcat.offsets[lv + 1])
        for n in range(lo, min(hi, lo + k_files)):
            p = out / "partitions" / f"{n}.tree"
            p.write_text(dumps_tree(pcat[n]))
            names[n] = f"partitions/{n}.tree"
            files.append(p)
    cat = out / "catalog.boxcat"
    cat.write_text(dumps_catalog(comp, names))
    files.append(cat)
    summary = out / "build_summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "threshold", "mesh", "epsilon", "coverage_target", "achieved_coverage", "exact_l1", "layers", "terms", "budget_exhausted"])
        for k, r in enumerate(comp.levels):
            t, rep = r.target, r.report
            w.writerow([k, t.threshold, t.mesh, t.epsilon, t.coverage, repr(float(rep.achieved_coverage)),
                        repr(rep.exact_l1), rep.layer_count, rep.terms, int(rep.budget_exhausted)])
    files.append(summary)
    for k, r in enumerate(comp.levels):
        log.info("level %d: coverage %.4f, mass %.6g, %d layers", k, r.report.achieved_coverage, r.report.exact_l1, r.report.layer_count)
    return files


def load_built(out: Path) -> tuple[WeightedRectFn, LoadedCatalog]:
    try:
        f = loads_fn((out / "f.boxfn").read_text())
        cat = loads_catalog((out / "catalog.boxcat").read_text(), out)
    except FileNotFoundError as e:
        raise OSError(f"missing build artifact: {e.filename}; run 'boxdiff build' first") from e
    return f, cat


CERT_FIELDS = ["px", "py", "partition_id", "level", "leaf_xlo", "leaf_xhi", "leaf_ylo", "leaf_yhi", "average", "average_hex"]


def _entry_leaf(lc: LoadedCatalog, n: int, rebuild: bool = False) -> tuple[BasicBox, float]:
    """Leaf holding entry ``n``'s point and the partition norm.

    Without a tree file the leaf is the witness box itself (the target leaf of
    ``build_enclosing_partition``) and the norm comes from ``enclosing_norm``;
    ``rebuild`` builds the tree and locates the point instead.
    """
    pc = lc.catalog
    lv, i = pc.locate_entry(n)
    c = pc.catalogs[lv]
    if n in lc.files or rebuild:
        q = leaves(lc.tree(n))
        return q.leaves[q.leaf_index(c.points[i])], tree_norm(q)
    box = c.box(i)
    if not box.contains(c.points[i]):
        raise ValueError(f"entry {n}: witness box does not contain its point")
    return box, enclosing_norm(box, c.mesh)


def cmd_certify(cfg, seed: int, out: Path, grid: int) -> list[Path]:
    """Best exact catalog average at every inset grid point."""
    f, lc = load_built(out)
    pc = lc.catalog
    margin = float(cfg["margin"])
    pts = grid_points(grid)
    pts = pts[inset_mask(pts, margin)]
    best = {}
    per_level_cov = []
    max_norm = []
    for lv, c in enumerate(pc.catalogs):
        hit = 0
        nrm = 0.0
        for i in range(len(c)):
            n = int(pc.offsets[lv]) + i
            leaf, q_norm = _entry_leaf(lc, n)
            avg = quadsum.integrate(f, leaf) / area(leaf)
            nrm = max(nrm, q_norm)
            hit += bool(avg >= c.thresholds[i] and q_norm < c.mesh)
            key = (float(c.points[i][0]), float(c.points[i][1]))
            if key not in best or avg > best[key][3]:
                best[key] = (n, lv, leaf, avg)
        per_level_cov.append(hit / len(pts) if len(pts) else 0.0)
        max_norm.append(nrm)
    top = max((float(c.thresholds.max()) for c in pc.catalogs if len(c)), default=math.inf)
    cert = out / "certificate.csv"
    with cert.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CERT_FIELDS)
        for (px, py), (n, lv, leaf, avg) in sorted(best.items()):
            w.writerow([_hex(px), _hex(py), n, lv, *(_hex(v) for v in leaf.bounds), repr(avg), _hex(avg)])
    cov_top = sum(1 for v in best.values() if v[3] >= top) / len(pts) if len(pts) else 0.0
    summ = out / "certificate_summary.txt"
    lines = [
        f"grid={grid}",
        f"margin={margin!r}",
        f"inset_points={len(pts)}",
        f"l1_norm={f.mass!r}",
        f"top_threshold={top!r}",
        f"coverage_at_threshold={cov_top!r}",
    ]
    for lv, (cv, nm) in enumerate(zip(per_level_cov, max_norm)):
        lines += [f"level{lv}.coverage={cv!r}", f"level{lv}.max_norm={nm!r}", f"level{lv}.mesh={pc.catalogs[lv].mesh!r}"]
    summ.write_text("\n".join(lines) + "\n")
    log.info("coverage at top threshold %.4f, l1 %.6g", cov_top, f.mass)
    return [cert, summ]


@dataclass
class VerifyResult:
    checked: int
    rebuilt: int
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_certificate(out: Path, rebuild: str = "200", seed: int = 0) -> VerifyResult:
    """Re-derive every certificate row from the function and partition files.

    Rows backed by a tree file, plus ``rebuild`` seeded rows (or ``all``), are
    checked by building the partition and locating the point.
    """
    f, lc = load_built(out)
    fails = []
    rows = list(csv.DictReader((out / "certificate.csv").open()))
    if rebuild == "all":
        full = set(range(len(rows)))
    else:
        k = min(int(rebuild), len(rows))
        full = set(substream(seed, "verify").choice(len(rows), size=k, replace=False).tolist()) if k else set()
    for j, r in enumerate(rows):
        n = int(r["partition_id"])
        try:
            leaf, q_norm = _entry_leaf(lc, n, rebuild=j in full)
        except ValueError as e:
            fails.append(str(e))
            continue
        p = (float.fromhex(r["px"]), float.fromhex(r["py"]))
        rec = tuple(float.fromhex(r[k]) for k in ("leaf_xlo", "leaf_xhi", "leaf_ylo", "leaf_yhi"))
        if leaf.bounds != rec or not leaf.contains(p):
            fails.append(f"entry {n}: leaf {leaf.bounds} != recorded {rec}")
            continue
        if not q_norm < lc.catalog.mesh_of(n):
            fails.append(f"entry {n}: partition norm {q_norm!r} not below the level mesh")
        avg = quadsum.integrate(f, leaf) / area(leaf)
        if avg != float.fromhex(r["average_hex"]) or avg != float(r["average"]):
            fails.append(f"entry {n}: average {avg!r} != recorded {r['average']}")
    return VerifyResult(len(rows), len(full), fails)


def cmd_verify(cfg, seed, out: Path, grid) -> list[Path]:
    res = verify_certificate(out, cfg["verify_rebuild"], seed)
    path = out / "verify.txt"
    path.write_text(f"checked={res.checked}\nrebuilt={res.rebuilt}\nfailures={len(res.failures)}\n" + "".join(f"# {m}\n" for m in res.failures[:50]))
    if not res.ok:
        raise VerificationFailed(f"{len(res.failures)} of {res.checked} certificate rows fail: {res.failures[0]}")
    log.info("verified %d certificate rows", res.checked)
    return [path]


class VerificationFailed(RuntimeError):
    pass


def cmd_regress(cfg, seed: int, out: Path, grid: int) -> list[Path]:
    from .regress import schedule_runner

    f, lc = load_built(out)
    stages = _ints(cfg["stages"]) or None
    n_stages = len(stages) if stages else sum(1 for c in lc.catalog.catalogs if len(c))
    eps = _floats(cfg["eps"])
    if len(eps) == 1:
        eps = eps * n_stages
    tr = schedule_runner(
        lc.catalog, f, eps, float(cfg["confidence"]), seed, stages=stages,
        area_floor=float(cfg["area_floor"]), cap=float(cfg["cap"]), on_cap=cfg["on_cap"],
    )
    path = out / "trajectory.csv"
    path.write_text(tr.to_csv())
    files = [path]
    if cfg["plot"] == "1":
        files += _plot_trajectory(tr, out)
    return files


def _plot_trajectory(tr, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = [r.stage for r in tr.stages]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(k, [r.witness_II for r in tr.stages], "o-", label="II at witness leaf")
    ax.plot(k, [r.witness_I for r in tr.stages], "s-", label="I at witness leaf")
    ax.plot(k, [r.max_I_floored for r in tr.stages], "^-", label="max I, floored leaves")
    ax.set_xlabel("stage")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    path = out / "trajectory.png"
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return [path]


def cmd_classify(cfg, seed: int, out: Path, grid: int) -> list[Path]:
    from .classify import separation_experiment

    f, lc = load_built(out)
    stages = _ints(cfg["stages"]) or None
    rep = separation_experiment(
        lc.catalog, f, int(cfg["sample_size"]), seed, alpha=float(cfg["alpha"]),
        stages=stages, per_level=int(cfg["per_level"]), grid=grid,
    )
    path = out / "classify.csv"
    path.write_text(rep.to_csv())
    log.info("max risk gap %.4g, cumulative misclassified fraction %.4f", rep.max_gap, rep.cum_misclassified_fraction)
    return [path]


BENCH_FIELDS = ["terms", "area", "queries", "indexed_s", "scan_s", "speedup", "max_rel_diff"]


def synthetic_function(n: int, seed: int) -> WeightedRectFn:
    """``n`` random rectangles with sides in [0.001, 0.02] and weights in (0, 1]."""
    rng = substream(seed, "bench", n)
    w = rng.uniform(0.001, 0.02, (n, 2))
    lo = rng.random((n, 2)) * (1.0 - w)
    return WeightedRectFn(lo[:, 0], lo[:, 0] + w[:, 0], lo[:, 1], lo[:, 1] + w[:, 1], 1.0 - rng.random(n))


def bench_rows(term_counts, areas, queries: int, seed: int) -> list[dict]:
    rows = []
    for n in term_counts:
        f = synthetic_function(n, seed)
        _ = f.index, f.coarse_index  # build both indexes outside the timed loop
        for a in areas:
            side = math.sqrt(a)
            rng = substream(seed, "bench-queries", n, repr(a))
            lo = rng.random((queries, 2)) * (1.0 - side)
            boxes = [(x, x + side, y, y + side) for x, y in lo]
            t0 = time.perf_counter()
            fast = [quadsum.integrate(f, b) for b in boxes]
            t1 = time.perf_counter()
            slow = [quadsum.integrate_scan(f, b) for b in boxes]
            t2 = time.perf_counter()
            diff = max((abs(p - q) / max(abs(q), 1e-300) for p, q in zip(fast, slow) if q), default=0.0)
            rows.append({
                "terms": n, "area": a, "queries": queries, "indexed_s": t1 - t0, "scan_s": t2 - t1,
                "speedup": (t2 - t1) / (t1 - t0), "max_rel_diff": diff,
            })
    return rows


def cmd_bench(cfg, seed: int, out: Path, grid: int) -> list[Path]:
    rows = bench_rows(_ints(cfg["bench_terms"]), _floats(cfg["bench_areas"]), int(cfg["bench_queries"]), seed)
    path = out / "bench.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    for r in rows:
        log.info("terms=%d area=%g speedup=%.1fx", r["terms"], r["area"], r["speedup"])
    return [path]


COMMANDS = {
    "build": cmd_build,
    "certify": cmd_certify,
    "verify": cmd_verify,
    "regress": cmd_regress,
    "classify": cmd_classify,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxdiff", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="key=value config file (a manifest also works)")
    p.add_argument("--seed", type=int, help="master seed (default 0, or the config's seed)")
    p.add_argument("--out", type=Path, default=Path("boxdiff-out"), help="output directory")
    p.add_argument("--grid", type=int, help="certification grid resolution (default 256)")
    p.add_argument("--threads", type=int, default=1, help="recorded in the manifest; evaluation is single-process")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        user = read_config(args.config)
        unknown = set(user) - set(DEFAULTS) - {"seed", "grid", "threads"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = {**DEFAULTS, **{k: v for k, v in user.items() if k in DEFAULTS}}
        seed = args.seed if args.seed is not None else int(user.get("seed", 0))
        grid = args.grid if args.grid is not None else int(user.get("grid", 256))
        if seed < 0 or seed >= 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        if grid < 1:
            raise UsageError("grid must be positive")
        if args.command == "build":
            parse_levels(cfg["levels"])
        cfg["grid"] = str(grid)
        cfg["threads"] = str(args.threads)
        args.out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, seed, args.out, grid)
        write_manifest(args.out, args.command, cfg, seed, files, started)
    except UsageError as e:
        print(f"boxdiff: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FeasibilityError as e:
        print(f"boxdiff: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except VerificationFailed as e:
        print(f"boxdiff: verification failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as e:
        print(f"boxdiff: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"boxdiff: error: {e}", file=sys.stderr)
        return EXIT_FAIL
    return 0


if __name__ == "__main__":
    sys.exit(main())
