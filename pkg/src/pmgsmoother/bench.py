"""Benchmark harness: phase breakdowns, local-solver comparison, memory and CSV output.

Relative metrics are normalized by one patch-local operator evaluation over
the same patches (time and FLOPs), which makes them comparable across degrees.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import counters
from .config import RunConfig
from .globalop import global_vmult, l2_error, make_operator, make_rhs
from .gmg import MgConfig, Multigrid, PatchSmoother, SmootherConfig, solve_poisson
from .mesh import build_hierarchy, distort_hierarchy, enumerate_patches
from .patchdist import build_lookup
from .plocal import build_psequence, local_solve, local_vmult, precompute_level_data

CSV_SCHEMA_VERSION = 1
PHASES = counters.PHASES


def build_mesh(cfg: RunConfig):
    h = build_hierarchy(cfg.dim, cfg.refinements)
    if cfg.delta > 0:
        h = distort_hierarchy(h, cfg.delta, cfg.seed)
    return h


def smoother_config(cfg: RunConfig) -> SmootherConfig:
    return SmootherConfig(mode=cfg.mode, smoother=cfg.smoother, local_iters=cfg.local_iters,
                          omega=cfg.omega, distributor=cfg.distributor, variant=cfg.variant,
                          patch_batch=cfg.patch_batch, workers=cfg.workers)


@dataclass
class RunRecord:
    config: dict
    n_dofs: int
    n_patches: int
    iterations: int | None = None
    l2_error: float | None = None
    phase_times: dict = field(default_factory=dict)
    phase_flops: dict | None = None
    phase_calls: dict = field(default_factory=dict)
    baseline_time: float | None = None
    baseline_flops: int | None = None
    global_vmult_time: float | None = None
    divisions: int | None = None
    doubles_per_dof: float | None = None
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def relative_times(self) -> dict:
        if not self.baseline_time:
            return {}
        return {k: v / self.baseline_time for k, v in self.phase_times.items()}

    def relative_flops(self) -> dict:
        if not self.phase_flops or not self.baseline_flops:
            return {}
        return {k: v / self.baseline_flops for k, v in self.phase_flops.items()}

    @property
    def total_flops(self):
        return None if self.phase_flops is None else sum(self.phase_flops.values())

    def to_row(self) -> dict:
        row = {"schema_version": CSV_SCHEMA_VERSION, "timestamp": self.timestamp}
        for k in CONFIG_COLUMNS:
            row[k] = self.config.get(k)
        row.update(n_dofs=self.n_dofs, n_patches=self.n_patches, iterations=self.iterations,
                   l2_error=self.l2_error, baseline_time=self.baseline_time,
                   baseline_flops=self.baseline_flops, global_vmult_time=self.global_vmult_time,
                   divisions=self.divisions, doubles_per_dof=self.doubles_per_dof,
                   total_flops=self.total_flops)
        rt, rf = self.relative_times(), self.relative_flops()
        for ph in PHASES:
            row[f"{ph}_time"] = self.phase_times.get(ph)
            row[f"{ph}_flops"] = None if self.phase_flops is None else self.phase_flops.get(ph, 0)
            row[f"{ph}_calls"] = self.phase_calls.get(ph)
            row[f"{ph}_rel_time"] = rt.get(ph)
            row[f"{ph}_rel_flops"] = rf.get(ph)
        return row


CONFIG_COLUMNS = ("dim", "degree", "refinements", "delta", "seed", "mode", "smoother", "local_iters",
                  "omega", "distributor", "variant", "workers")
CSV_COLUMNS = (("schema_version", "timestamp") + CONFIG_COLUMNS
               + ("n_dofs", "n_patches", "iterations", "l2_error", "baseline_time", "baseline_flops",
                  "global_vmult_time", "divisions", "doubles_per_dof", "total_flops")
               + tuple(f"{ph}_{s}" for ph in PHASES
                       for s in ("time", "flops", "calls", "rel_time", "rel_flops")))


# ---------------------------------------------------------------------------
# smoother benchmark


def _local_vmult_baseline(sm: PatchSmoother, repetitions: int, count: bool):
    """Time and FLOPs of one top-level local vmult over every patch, batch by batch."""
    H = sm.local
    batches = [H.fetch(ids) for chunks in sm.batches() for ids in chunks]
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal((b.size, H.top.n_interior)) for b in batches]
    flops = None
    if count:
        with counters.recording() as rec:
            for b, x in zip(batches, xs):
                local_vmult(b, x)
        flops = rec.total_flops
    t0 = time.perf_counter()
    for _ in range(repetitions):
        for b, x in zip(batches, xs):
            local_vmult(b, x)
    return (time.perf_counter() - t0) / repetitions, flops


def run_benchmark(cfg: RunConfig) -> RunRecord:
    """Repeated applications of the patch smoother on the finest level."""
    cfg.validate()
    mesh = build_mesh(cfg).finest
    op = make_operator(mesh, cfg.degree, variant=cfg.variant)
    sm = PatchSmoother(op, smoother_config(cfg))
    b = make_rhs(op)
    R = cfg.repetitions
    with counters.recording(count_flops=cfg.count_flops) as rec:
        for _ in range(R):
            sm.sweep(np.zeros(op.n_dofs), b)
    rec_times = {ph: rec.times.get(ph, 0.0) / R for ph in PHASES}
    flops = {ph: rec.flops.get(ph, 0) // R for ph in PHASES} if cfg.count_flops else None
    calls = {ph: rec.phase_calls.get(ph, 0) // R for ph in PHASES}
    base_t, base_f = _local_vmult_baseline(sm, max(1, R // 4), cfg.count_flops)
    u = np.random.default_rng(cfg.seed).standard_normal(op.n_dofs)
    t0 = time.perf_counter()
    for _ in range(max(1, R // 4)):
        global_vmult(op, u)
    gv = (time.perf_counter() - t0) / max(1, R // 4)
    mem = memory_breakdown(sm.local, op.n_dofs, cfg.distributor)
    return RunRecord(config=asdict(cfg), n_dofs=op.n_dofs, n_patches=sm.patches.n_patches,
                     phase_times=rec_times, phase_flops=flops, phase_calls=calls,
                     baseline_time=base_t, baseline_flops=base_f, global_vmult_time=gv,
                     divisions=(rec.total_divisions // R) if cfg.count_flops else None,
                     doubles_per_dof=mem["doubles_per_dof"])


def run_solve(cfg: RunConfig) -> RunRecord:
    """GMRES with the multigrid preconditioner on the manufactured problem."""
    cfg.validate()
    h = build_mesh(cfg)
    mg = Multigrid(h, cfg.degree, MgConfig(cfg.pre_sweeps, cfg.post_sweeps, smoother_config(cfg)))
    b = make_rhs(mg.fine)
    t0 = time.perf_counter()
    res = solve_poisson(mg, b, cfg.tol, cfg.max_iter)
    elapsed = time.perf_counter() - t0
    sm = mg.smoothers[-1]
    return RunRecord(config=asdict(cfg), n_dofs=mg.fine.n_dofs,
                     n_patches=sm.patches.n_patches if sm else 0, iterations=res.iterations,
                     l2_error=l2_error(mg.fine, res.x), phase_times={"solve": elapsed})


# ---------------------------------------------------------------------------
# memory


def memory_breakdown(local, n_dofs: int, distributor: str = "lookup") -> dict:
    """Storage of a local hierarchy by category; lookup tables count one slot per entry."""
    parts = local.stored_doubles()
    parts["lookup"] = 0
    if distributor == "lookup":
        parts["lookup"] = sum(build_lookup(local.dim, p).stored_integers() for p in local.sequence)
    total = sum(parts.values())
    return {"parts": parts, "total": total, "n_dofs": n_dofs, "doubles_per_dof": total / n_dofs}


def report_memory(cfg: RunConfig, breakdown: bool = False):
    """Persistent smoother storage in doubles per fine-level DoF."""
    cfg.validate()
    mesh = build_mesh(cfg).finest
    op = make_operator(mesh, cfg.degree, variant=cfg.variant)
    patches = enumerate_patches(mesh, op.dofs)
    local = precompute_level_data(mesh, patches, build_psequence(cfg.degree),
                                  distributor=cfg.distributor, variant=cfg.variant,
                                  smoother=cfg.smoother, omega=cfg.omega)
    mem = memory_breakdown(local, op.n_dofs, cfg.distributor)
    return mem if breakdown else mem["doubles_per_dof"]


# ---------------------------------------------------------------------------
# local solver comparison on one patch


LOCAL_STRATEGIES = (
    ("V-cycle (Jacobi)", "jacobi", "full"),
    ("Half V-cycle (Jacobi)", "jacobi", "half"),
    ("V-cycle (Cartesian-reinforced)", "cartesian_reinforced", "full"),
    ("Half V-cycle (Cartesian-reinforced)", "cartesian_reinforced", "half"),
    ("Fast diagonalization", "fdm", "full"),
)


def compare_local_solvers(dim: int = 3, p: int = 7, delta: float = 0.0, seed: int = 0,
                          repetitions: int = 20, variant: str = "even_odd") -> list[dict]:
    """Cost of one local solve per strategy relative to one local vmult, single patch."""
    h = build_hierarchy(dim, 0)
    if delta > 0:
        h = distort_hierarchy(h, delta, seed)
    mesh = h.finest
    op = make_operator(mesh, p, variant=variant)
    patches = enumerate_patches(mesh, op.dofs)
    r = np.random.default_rng(seed).standard_normal((1, patches.interior_size))
    rows = []
    H = precompute_level_data(mesh, patches, build_psequence(p), variant=variant)
    batch = H.fetch([0])
    with counters.recording() as rec:
        local_vmult(batch, r)
    base_f = rec.total_flops
    t0 = time.perf_counter()
    for _ in range(repetitions):
        local_vmult(batch, r)
    base_t = (time.perf_counter() - t0) / repetitions
    for name, smoother, mode in LOCAL_STRATEGIES:
        H = precompute_level_data(mesh, patches, build_psequence(p), variant=variant, smoother=smoother)
        batch = H.fetch([0])
        with counters.recording() as rec:
            local_solve(batch, r, 1, mode)
        t0 = time.perf_counter()
        for _ in range(repetitions):
            local_solve(batch, r, 1, mode)
        t = (time.perf_counter() - t0) / repetitions
        rows.append({"strategy": name, "relative_time": t / base_t,
                     "relative_flops": rec.total_flops / base_f, "flops": rec.total_flops,
                     "gflops": rec.total_flops / t * 1e-9, "divisions": rec.total_divisions})
    rows.append({"strategy": "local vmult", "relative_time": 1.0, "relative_flops": 1.0,
                 "flops": base_f, "gflops": base_f / base_t * 1e-9, "divisions": 0})
    return rows


# ---------------------------------------------------------------------------
# iteration-count study


STUDY_CONFIGS = (("1 V-cycle", "full", 1), ("1 half V-cycle", "half", 1),
                  ("2 half V-cycles", "half", 2), ("25 V-cycles", "full", 25))


def iteration_study(dim: int, p: int, delta: float, refinements: int, seed: int = 0,
                    omega: float | None = None, variant: str = "dense", configs=STUDY_CONFIGS,
                    tol: float = 1e-8) -> dict:
    """GMRES iteration counts for the local-solver configurations on one mesh."""
    cfg = RunConfig(dim=dim, degree=p, refinements=refinements, delta=delta, seed=seed,
                    omega=omega, variant=variant, tol=tol).validate()
    h = build_mesh(cfg)
    out = {}
    mg = None
    for name, mode, iters in configs:
        sc = smoother_config(cfg)
        sc.mode, sc.local_iters = mode, iters
        if mg is None:
            mg = Multigrid(h, p, MgConfig(cfg.pre_sweeps, cfg.post_sweeps, sc))
        else:
            for s in mg.smoothers[1:]:
                s.config = sc
        res = solve_poisson(mg, make_rhs(mg.fine), tol, cfg.max_iter)
        out[name] = res.iterations
    return out


def calibrate_omega(cases, reference: dict, omegas=(0.5, 0.6, 0.7, 0.8), **kw) -> dict:
    """Total absolute iteration deviation from ``reference`` for each damping factor.

    ``cases`` are (dim, p, delta, refinements) tuples; ``reference`` maps a case
    to a dict of iteration counts keyed like :data:`STUDY_CONFIGS`.
    """
    report = {}
    for om in omegas:
        dev, counts = 0, {}
        for case in cases:
            dim, p, delta, refinements = case
            got = iteration_study(dim, p, delta, refinements, omega=om, **kw)
            counts[case] = got
            dev += sum(abs(got[k] - reference[case][k]) for k in got)
        report[om] = {"deviation": dev, "counts": counts}
    return report


# ---------------------------------------------------------------------------
# CSV


def emit_csv(records, path) -> None:
    """Write or append records; the header is written once and never reordered."""
    rows = [r.to_row() if isinstance(r, RunRecord) else r for r in records]
    try:
        exists = os.path.exists(path) and os.path.getsize(path) > 0
        if exists:
            with open(path, newline="") as fh:
                header = next(csv.reader(fh), None)
            if header is not None and tuple(header) != CSV_COLUMNS:
                raise ValueError(f"{path}: existing CSV has a different header")
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            if not exists:
                w.writeheader()
            for row in rows:
                w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                            for k, v in row.items()})
    except OSError as exc:
        raise OSError(f"cannot write CSV {path}: {exc}") from exc


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
