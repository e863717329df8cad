"""Experiment drivers behind the ``run``, ``grid``, ``rip`` and ``replay`` commands.

Every run writes one trace CSV per (sweep point, solver) with the columns
``iter,fval,eta,rel_err,dist,elapsed_ns`` plus a ``summary.csv`` with one row
per trace.  Grid runs add ``grid/heatmap.csv`` and ``grid/comparison.csv``;
RIP runs write ``rip.csv``.  With ``"json"`` among the output formats a
``report.json`` echoing the configuration is written as well.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..initialization import planted_perturbation, spectral_init, truncated_spectral_init
from ..losses import LossSpec
from ..matcore import substream
from ..metrics import iters_to_tol
from ..operators import estimate_mixed_rip, estimate_outlier_bound, make_operator
from ..problem import GroundTruth, Observations, make_ground_truth, observe, sigma_w_for_snr
from ..solvers import FactorPair, SolverConfig, SolverTrace, StepSchedule, run, theorem_schedule
from .config import ConfigError, ExperimentConfig, ProblemConfig, SolverEntry

log = logging.getLogger(__name__)

REPORT_TOL = 1e-10
SUMMARY_FIELDS = ["point", "solver", "status", "iterations", "final_rel_err",
                  "iters_to_tol", "wall_time_s", "trace"]


class NumericalFailure(RuntimeError):
    """A run hit a non-finite iterate or a numerically degenerate step."""


@dataclass
class Point:
    label: str
    problem: ProblemConfig


@dataclass
class Instance:
    problem: ProblemConfig
    gt: GroundTruth
    op: object
    obs: Observations
    F0: FactorPair | None = None
    chi_hat: float | None = None


@dataclass
class TraceRecord:
    point: str
    solver: str
    status: str
    iterations: int
    final_rel_err: float
    iters_to_tol: int | None
    wall_time_s: float
    trace: str


@dataclass
class RunReport:
    command: str
    config: dict
    traces: list[TraceRecord] = field(default_factory=list)
    rip: list[dict] = field(default_factory=list)
    grid: list[dict] = field(default_factory=list)
    out_dir: str = ""

    @property
    def failed(self) -> list[TraceRecord]:
        return [t for t in self.traces if t.status == "diverged"]

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config,
                "traces": [asdict(t) for t in self.traces], "rip": self.rip,
                "grid": self.grid, "out_dir": self.out_dir}


# ---------------------------------------------------------------------------
# instances


class OperatorPool:
    """Shares one operator per generation spec across sweep points."""

    def __init__(self):
        self._ops = {}
        self._lock = threading.Lock()

    def get(self, problem: ProblemConfig, m: int | None = None):
        m = problem.num_measurements if m is None else m
        key = (problem.kind, problem.n, m, problem.seed, problem.storage)
        with self._lock:
            op = self._ops.get(key)
            if op is None:
                op = make_operator(problem.kind, problem.n, problem.n, m, problem.seed, problem.storage)
                self._ops[key] = op
        return op


def expand_points(cfg: ExperimentConfig) -> list[Point]:
    sw = cfg.sweep
    axes = [("kappa", sw.kappa), ("p_s", sw.p_s), ("snr_db", sw.snr_db), ("seed", sw.seed)]
    axes = [(k, v) for k, v in axes if v]
    if not axes:
        return [Point("base", cfg.problem)]
    points = []
    for combo in itertools.product(*(v for _, v in axes)):
        update = dict(zip((k for k, _ in axes), combo))
        data = {**cfg.problem.model_dump(), **update}
        if "snr_db" in update:
            data["sigma_w"] = None
        try:
            problem = ProblemConfig.model_validate(data)
        except ValueError as err:
            raise ConfigError([f"sweep point {update}: {err}"]) from None
        label = "_".join(f"{k}={v:g}" for k, v in update.items())
        points.append(Point(label, problem))
    return points


def build_instance(problem: ProblemConfig, pool: OperatorPool | None = None) -> Instance:
    op = (pool or OperatorPool()).get(problem)
    gt = make_ground_truth(problem.n, problem.n, problem.r, problem.kappa, problem.psd,
                           substream(problem.seed, "truth"))
    clean = op.apply(gt.X)
    if problem.snr_db is not None:
        sigma_w = sigma_w_for_snr(clean, problem.snr_db)
    else:
        sigma_w = problem.sigma_w or 0.0
    obs = observe(op, gt, sigma_w, problem.p_s, substream(problem.seed, "noise"),
                  substream(problem.seed, "outliers"))
    return Instance(problem, gt, op, obs)


def estimate_chi(inst: Instance, trials: int) -> float:
    if inst.chi_hat is None:
        rng = substream(inst.problem.seed, "probes")
        est = estimate_mixed_rip(inst.op, inst.problem.r, trials, rng)
        if inst.obs.outlier_support.size:
            d3 = estimate_outlier_bound(inst.op, inst.obs.outlier_support, inst.problem.r, trials, rng)
            if d3 <= 0:
                raise NumericalFailure(f"outlier-bound estimate {d3:.3g} is not positive")
            inst.chi_hat = est.delta2_hat / d3
        else:
            inst.chi_hat = est.chi_hat
    return inst.chi_hat


def initialize(inst: Instance, cfg: ExperimentConfig) -> FactorPair:
    if inst.F0 is not None:
        return inst.F0
    ic, p = cfg.init, inst.problem
    if ic.method == "planted_perturbation":
        radius = ic.radius * inst.gt.sigma_r
        if ic.chi_scaled:
            radius /= estimate_chi(inst, cfg.rip.trials)
        F0 = planted_perturbation(inst.gt, radius, substream(p.seed, "init"))
    elif ic.method == "spectral":
        F0 = spectral_init(inst.op, inst.obs.y, p.r, trace_correction=ic.trace_correction)
    else:
        F0 = truncated_spectral_init(inst.op, inst.obs.y, p.r, p.p_s, trace_correction=ic.trace_correction)
    inst.F0 = F0
    return F0


def _check_fstar(entry: SolverEntry, problem: ProblemConfig, where: str) -> list[str]:
    if entry.schedule == "polyak" and entry.fstar is None and problem.corrupted:
        return [f"{where}: Polyak steps on corrupted data need an explicit fstar "
                "(a number or \"oracle\")"]
    return []


def preflight(cfg: ExperimentConfig, points: list[Point], entries: list[SolverEntry]) -> None:
    problems = []
    for pt in points:
        for i, e in enumerate(entries):
            problems += _check_fstar(e, pt.problem, f"solvers.{i} ({e.name}) at {pt.label}")
    if problems:
        raise ConfigError(sorted(set(problems)))


def solver_setup(entry: SolverEntry, inst: Instance, cfg: ExperimentConfig,
                 record_time: bool) -> tuple[SolverConfig, LossSpec]:
    loss = LossSpec(entry.loss_kind, inst.op, inst.obs.y)
    if entry.schedule == "polyak":
        if entry.fstar == "oracle":
            fstar = loss.value_from_residual(loss.residual(inst.gt.X))
        elif entry.fstar is None:
            fstar = 0.0
        else:
            fstar = float(entry.fstar)
        sched = StepSchedule("polyak", fstar=fstar)
    elif entry.schedule == "geometric":
        if entry.theorem:
            sched = theorem_schedule(inst.gt.sigma_r, estimate_chi(inst, cfg.rip.trials),
                                     noisy=inst.problem.corrupted)
        else:
            sched = StepSchedule("geometric", lam=entry.lam, q=entry.q)
    else:
        sched = StepSchedule("constant", eta=entry.eta)
    sc = SolverConfig(entry.algorithm, sched, max_iters=entry.max_iters, tol_rel_err=entry.tol_rel_err,
                      record_dist=entry.record_dist, chi_f=inst.chi_hat, record_time=record_time)
    return sc, loss


def run_entry(entry: SolverEntry, inst: Instance, cfg: ExperimentConfig) -> tuple[SolverTrace, float]:
    sc, loss = solver_setup(entry, inst, cfg, cfg.output.record_time)
    F0 = initialize(inst, cfg)
    t0 = time.perf_counter()
    # divergent cells overflow on purpose; the trace records that as a status
    with np.errstate(over="ignore", invalid="ignore"):
        trace = run(sc, loss, F0, inst.gt)
    return trace, time.perf_counter() - t0


def _record(point: str, solver: str, trace: SolverTrace, wall: float, path: Path, root: Path) -> TraceRecord:
    fin = trace.final
    return TraceRecord(point, solver, trace.status, fin.iter, fin.rel_err,
                       iters_to_tol(trace, REPORT_TOL), round(wall, 6), str(path.relative_to(root)))


def _write_summary(root: Path, records: list[TraceRecord]) -> None:
    with (root / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            row = asdict(rec)
            row["final_rel_err"] = f"{rec.final_rel_err:.17g}"
            row["iters_to_tol"] = "" if rec.iters_to_tol is None else rec.iters_to_tol
            w.writerow(row)


def _finish(report: RunReport, cfg: ExperimentConfig, root: Path) -> RunReport:
    _write_summary(root, report.traces)
    if "json" in cfg.output.formats:
        (root / "report.json").write_text(json.dumps(report.to_dict(), indent=2, default=str))
    return report


def _pool_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_run(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    if not cfg.solvers:
        raise ConfigError(["solvers: at least one solver entry is required"])
    points = expand_points(cfg)
    preflight(cfg, points, cfg.solvers)
    root = Path(cfg.output.dir)
    root.mkdir(parents=True, exist_ok=True)
    pool = OperatorPool()

    def one_point(pt: Point) -> list[TraceRecord]:
        inst = build_instance(pt.problem, pool)
        out = root / pt.label
        out.mkdir(parents=True, exist_ok=True)
        recs = []
        for entry in cfg.solvers:
            trace, wall = run_entry(entry, inst, cfg)
            path = out / f"{entry.name}.csv"
            trace.write_csv(path)
            recs.append(_record(pt.label, entry.name, trace, wall, path, root))
            log.info("%s %s: %s after %d iterations", pt.label, entry.name, trace.status, trace.final.iter)
        return recs

    report = RunReport("run", cfg.model_dump(mode="json"), out_dir=str(root))
    for recs in _pool_map(one_point, points, threads):
        report.traces.extend(recs)
    return _finish(report, cfg, root)


def _cell_label(lam: float, q: float) -> str:
    return f"lam={lam:g}_q={q:g}"


def cmd_grid(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    sw = cfg.sweep
    problems = []
    if not sw.lam:
        problems.append("sweep.lam: the lambda grid is empty")
    if not sw.q:
        problems.append("sweep.q: the q grid is empty")
    if sw.kappa or sw.p_s or sw.snr_db or sw.seed:
        problems.append("sweep: a grid runs on one instance; drop the kappa/p_s/snr_db/seed lists")
    if problems:
        raise ConfigError(problems)
    # iteration budget comes from the matching geometric entry, if any
    same = [s for s in cfg.solvers if s.algorithm == sw.grid_algorithm]
    base = next((s for s in same if s.schedule == "geometric"), same[0] if same else None)
    max_iters = base.max_iters if base else 1000
    tol = base.tol_rel_err if base else 1e-12
    polyak = SolverEntry(algorithm=sw.grid_algorithm, schedule="polyak", label="polyak",
                         fstar="oracle" if cfg.problem.corrupted else None,
                         max_iters=max_iters, tol_rel_err=tol)
    cells = [SolverEntry(algorithm=sw.grid_algorithm, schedule="geometric", lam=lam, q=q,
                         label=_cell_label(lam, q), max_iters=max_iters, tol_rel_err=tol)
             for lam in sw.lam for q in sw.q]

    root = Path(cfg.output.dir)
    (root / "grid" / "cells").mkdir(parents=True, exist_ok=True)
    inst = build_instance(cfg.problem)
    initialize(inst, cfg)

    def one_cell(entry: SolverEntry):
        trace, wall = run_entry(entry, inst, cfg)
        sub = "cells" if entry.schedule == "geometric" else ""
        path = root / "grid" / sub / f"{entry.name}.csv"
        trace.write_csv(path)
        return entry, _record("grid", entry.name, trace, wall, path, root)

    results = _pool_map(one_cell, [polyak] + cells, threads)
    report = RunReport("grid", cfg.model_dump(mode="json"), out_dir=str(root))
    ref = results[0][1]
    report.traces.append(ref)
    with (root / "grid" / "heatmap.csv").open("w", newline="") as fh_h, \
            (root / "grid" / "comparison.csv").open("w", newline="") as fh_c:
        heat = csv.writer(fh_h, lineterminator="\n")
        heat.writerow(["lambda", "q", "final_rel_err", "iters_to_tol", "status"])
        comp = csv.writer(fh_c, lineterminator="\n")
        comp.writerow(["lambda", "q", "iters_to_tol", "polyak_iters_to_tol", "ratio"])
        for entry, rec in results[1:]:
            report.traces.append(rec)
            itt = "" if rec.iters_to_tol is None else rec.iters_to_tol
            heat.writerow([f"{entry.lam:.17g}", f"{entry.q:.17g}", f"{rec.final_rel_err:.17g}", itt, rec.status])
            ratio = ""
            if rec.iters_to_tol is not None and ref.iters_to_tol:
                ratio = f"{rec.iters_to_tol / ref.iters_to_tol:.6g}"
            pitt = "" if ref.iters_to_tol is None else ref.iters_to_tol
            comp.writerow([f"{entry.lam:.17g}", f"{entry.q:.17g}", itt, pitt, ratio])
            report.grid.append({"lambda": entry.lam, "q": entry.q, "final_rel_err": rec.final_rel_err,
                                "iters_to_tol": rec.iters_to_tol, "status": rec.status,
                                "polyak_iters_to_tol": ref.iters_to_tol})
    return _finish(report, cfg, root)


RIP_FIELDS = ["rank", "m", "trials", "delta1_hat", "delta2_hat", "delta3_hat", "chi_hat",
              "predicted_iters"]


def cmd_rip(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    p = cfg.problem
    ranks = cfg.rip.ranks or [p.r]
    bad = [r for r in ranks if not 1 <= r <= p.n]
    if bad:
        raise ConfigError([f"rip.ranks: {bad} outside [1, n={p.n}]"])
    root = Path(cfg.output.dir)
    root.mkdir(parents=True, exist_ok=True)

    def one_rank(r: int) -> dict:
        prob = p.model_copy(update={"r": r, "kappa": 1.0 if r == 1 else p.kappa})
        op = make_operator(prob.kind, prob.n, prob.n, prob.num_measurements, prob.seed, prob.storage)
        rng = substream(p.seed, "probes", r)
        est = estimate_mixed_rip(op, r, cfg.rip.trials, rng)
        d3 = None
        if p.p_s > 0:
            gt = make_ground_truth(prob.n, prob.n, r, prob.kappa, prob.psd, substream(p.seed, "truth"))
            obs = observe(op, gt, 0.0, p.p_s, substream(p.seed, "noise"), substream(p.seed, "outliers"))
            d3 = estimate_outlier_bound(op, obs.outlier_support, r, cfg.rip.trials, rng)
        mu = est.delta1_hat if d3 is None else d3
        chi = est.delta2_hat / mu if mu > 0 else math.inf
        return {"rank": r, "m": op.m, "trials": cfg.rip.trials, "delta1_hat": est.delta1_hat,
                "delta2_hat": est.delta2_hat, "delta3_hat": d3, "chi_hat": chi,
                "predicted_iters": chi ** 2 * math.log(1 / cfg.rip.eps)}

    rows = _pool_map(one_rank, ranks, threads)
    with (root / "rip.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RIP_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else f"{v:.17g}" if isinstance(v, float) else v)
                        for k, v in row.items()})
    report = RunReport("rip", cfg.model_dump(mode="json"), rip=rows, out_dir=str(root))
    return _finish(report, cfg, root)


# ---------------------------------------------------------------------------
# replay


@dataclass
class ReplayResult:
    compared: int
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return self.compared > 0 and not self.mismatches


def _masked(text: str) -> str:
    # wall-clock column is the only non-deterministic field
    out = []
    for line in text.splitlines():
        head, _, _ = line.rpartition(",")
        out.append(head)
    return "\n".join(out)


def replay(cfg: ExperimentConfig, reference, threads: int = 1) -> ReplayResult:
    """Re-run ``cfg`` and compare every trace CSV with those under ``reference``."""
    reference = Path(reference)
    if not reference.is_dir():
        raise ConfigError([f"{reference}: reference directory does not exist"])
    grid = (reference / "grid" / "heatmap.csv").exists()
    with tempfile.TemporaryDirectory(prefix="replay-") as tmp:
        fresh = cfg.model_copy(update={"output": cfg.output.model_copy(update={"dir": tmp})})
        report = (cmd_grid if grid else cmd_run)(fresh, threads)
        compared, bad = 0, []
        for rec in report.traces:
            ref_path = reference / rec.trace
            if not ref_path.exists():
                bad.append(f"{rec.trace}: missing from reference")
                continue
            new = (Path(tmp) / rec.trace).read_text()
            old = ref_path.read_text()
            same = new == old if not cfg.output.record_time else _masked(new) == _masked(old)
            compared += 1
            if not same:
                bad.append(f"{rec.trace}: differs")
    return ReplayResult(compared, bad)


def numpy_errors():
    return (np.linalg.LinAlgError, FloatingPointError, NumericalFailure)
