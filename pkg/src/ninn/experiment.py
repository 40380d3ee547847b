"""Experiment matrix: trained runs, finite-difference baselines, and self-checks."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fd, io
from .problems import PROBLEM_NAMES, ConfigurationError, make_problem, verify_source
from .train import TrainConfig, train_elliptic, train_parabolic, write_history
from .unet import NetworkSpec

log = logging.getLogger(__name__)

DESK_SIZES = (32, 64)
FULL_SIZES = (32, 64, 128)
DESK_STEPS = (500, 1000, 2000, 4000)
FULL_STEPS = (500, 1000, 2000, 4000, 8000)
REPORT_TIMES = (0.5, 1.0, 2.5, 5.0)

REPORT_COLUMNS = ("problem", "n", "depth", "steps", "seed", "t", "norm_2h", "norm_inf",
                  "final_loss", "wall_s", "param_count")


class RunError(RuntimeError):
    """A single run in the matrix failed; the message carries its coordinates."""


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "bubble"
    grid_sizes: tuple = DESK_SIZES
    depths: tuple = (3,)
    steps: tuple = DESK_STEPS
    activation: str = "identity"
    tau: float = 0.1
    report_times: tuple = REPORT_TIMES
    first_step_iters: int = 1000
    seeds: tuple = (0,)
    precision: str = "single"
    out: str = "results"
    lr: Optional[float] = None
    alpha: Optional[float] = None
    lattice: Optional[str] = None  # None: intervals for steady baselines, nodes otherwise
    input_scaling: str = "raw"
    workers: int = 1

    def __post_init__(self):
        if self.problem not in PROBLEM_NAMES:
            raise ConfigurationError(f"unknown problem {self.problem!r}; choose from {', '.join(PROBLEM_NAMES)}")
        for name in ("grid_sizes", "depths", "steps", "seeds", "report_times"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"{name} must not be empty")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        for t in self.report_times:
            k = t / self.tau
            if t <= 0 or abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ConfigurationError(f"report time {t} is not a positive multiple of tau={self.tau}")
        if self.lattice not in (None, "nodes", "intervals"):
            raise ConfigurationError(f"lattice must be 'nodes' or 'intervals', got {self.lattice!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    @property
    def time_dependent(self) -> bool:
        return make_problem(self.problem).time_dependent

    @property
    def n_steps(self) -> int:
        return int(round(max(self.report_times) / self.tau))

    def train_config(self, steps: int, seed: int) -> TrainConfig:
        kw = dict(max_steps=steps, seed=seed, precision=self.precision, alpha=self.alpha,
                  input_scaling=self.input_scaling)
        if self.lr is not None:
            kw["lr"] = self.lr
        return TrainConfig.parabolic(**kw) if self.time_dependent else TrainConfig(**kw)


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        return path

    @classmethod
    def read(cls, path) -> "ErrorReport":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append({k: _parse(k, v) for k, v in rec.items()})
        return cls(rows)

    def best(self, key: str = "norm_2h") -> dict:
        return min(self.rows, key=lambda r: r[key])


_INT_COLUMNS = {"n", "depth", "steps", "seed", "param_count"}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _parse(key, v):
    if key == "problem":
        return v
    if v == "":
        return None
    return int(v) if key in _INT_COLUMNS else float(v)


def _tag(problem, n, depth, steps, seed):
    return f"{problem}_n{n}_d{depth}_m{steps}_s{seed}"


def _dump_triplet(out: Path, tag: str, exact, pred) -> None:
    io.dump_grid(out / f"exact_{tag}", exact)
    io.dump_grid(out / f"pred_{tag}", pred)
    io.dump_grid(out / f"diff_{tag}", np.abs(exact - pred))


def _baseline_lattice(config: ExperimentConfig, steady: bool) -> str:
    if config.lattice is not None:
        return config.lattice
    return "intervals" if steady else "nodes"


def _one_run(config: ExperimentConfig, n: int, depth: int, steps: int, seed: int) -> list:
    problem = make_problem(config.problem)
    grid = problem.grid(n, config.lattice or "nodes")
    net = NetworkSpec(depth, grid.shape, activation=config.activation)
    cfg = config.train_config(steps, seed)
    out = Path(config.out)
    tag = _tag(config.problem, n, depth, steps, seed)
    base = dict(problem=config.problem, n=n, depth=depth, steps=steps, seed=seed,
                param_count=net.parameter_count())
    rows = []
    start = time.perf_counter()
    try:
        if not problem.time_dependent:
            res = train_elliptic(problem, grid, net, cfg)
            exact = grid.sample(problem.exact_u)
            write_history(res, out / f"loss_{tag}.csv")
            _dump_triplet(out, tag, exact, res.best_prediction)
            rows.append(dict(base, t=None, norm_2h=fd.norm_2h(exact, res.best_prediction, grid),
                             norm_inf=fd.norm_inf(exact, res.best_prediction), final_loss=res.best_loss,
                             wall_s=time.perf_counter() - start))
        else:
            results = train_parabolic(problem, grid, net, cfg, config.tau, config.n_steps,
                                      config.first_step_iters)
            for k, res in enumerate(results, start=1):
                write_history(res, out / f"loss_{tag}_step{k}.csv")
            for t in config.report_times:
                k = int(round(t / config.tau))
                pred = results[k - 1].best_prediction
                exact = grid.sample(problem.exact_u, problem.t0 + k * config.tau)
                _dump_triplet(out, f"{tag}_t{t:g}", exact, pred)
                rows.append(dict(base, t=t, norm_2h=fd.norm_2h(exact, pred, grid),
                                 norm_inf=fd.norm_inf(exact, pred), final_loss=results[k - 1].best_loss,
                                 wall_s=time.perf_counter() - start))
    except Exception as exc:
        raise RunError(f"run {tag} failed: {exc}") from exc
    return rows


def _check_depths(config: ExperimentConfig):
    """Drop (n, depth) pairs the feature-size rule forbids, logging each."""
    pairs = []
    for n, d in itertools.product(config.grid_sizes, config.depths):
        if d > NetworkSpec.max_depth(n):
            log.warning("skipping depth %d at n=%d: coarsest level would be narrower than the kernel", d, n)
            continue
        pairs.append((n, d))
    if not pairs:
        raise ConfigurationError("no admissible (n, depth) combination in the configuration")
    return pairs


def run(config: ExperimentConfig) -> ErrorReport:
    """Train every (n, depth, steps, seed) combination and write ``report.csv``."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(n, d, m, s) for (n, d) in _check_depths(config) for m in config.steps for s in config.seeds]
    report = ErrorReport()
    if config.workers == 1:
        for job in jobs:
            report.rows += _one_run(config, *job)
    else:
        with ProcessPoolExecutor(config.workers) as pool:
            for rows in pool.map(_one_run, itertools.repeat(config), *zip(*jobs)):
                report.rows += rows
    report.write(out / "report.csv")
    return report


def baseline(config: ExperimentConfig) -> ErrorReport:
    """Finite-difference errors for the configured grids, in report form."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = make_problem(config.problem)
    report = ErrorReport()
    for n in config.grid_sizes:
        grid = problem.grid(n, _baseline_lattice(config, not problem.time_dependent))
        base = dict(problem=config.problem, n=n, depth=None, steps=None, seed=None, final_loss=None,
                    param_count=None)
        start = time.perf_counter()
        tag = f"{config.problem}_n{n}_fd"
        if not problem.time_dependent:
            uh = fd.solve_elliptic(problem, grid)
            exact = grid.sample(problem.exact_u)
            _dump_triplet(out, tag, exact, uh)
            report.rows.append(dict(base, t=None, norm_2h=fd.norm_2h(exact, uh, grid),
                                    norm_inf=fd.norm_inf(exact, uh), wall_s=time.perf_counter() - start))
        else:
            hist = fd.solve_parabolic(problem, grid, config.tau, config.n_steps, record=True)
            for t in config.report_times:
                k = int(round(t / config.tau))
                exact = grid.sample(problem.exact_u, problem.t0 + k * config.tau)
                _dump_triplet(out, f"{tag}_t{t:g}", exact, hist[k])
                report.rows.append(dict(base, t=t, norm_2h=fd.norm_2h(exact, hist[k], grid),
                                        norm_inf=fd.norm_inf(exact, hist[k]), wall_s=time.perf_counter() - start))
    report.write(out / "report.csv")
    return report


_SOURCE_LIMITS = {"bubble": 1e-9, "trig1": 1e-6}


def verify(sizes=(8, 16, 32), trials: int = 100, seed: int = 0) -> list:
    """Source consistency for the smooth problems plus stencil/matrix agreement
    on random fields. Returns ``(check, value, limit, ok)`` tuples."""
    results = []
    for name in PROBLEM_NAMES:
        problem = make_problem(name)
        if problem.kappa is not None:
            continue
        grid = problem.grid(33)
        f = grid.sample(problem.source_f, 0.3) if problem.time_dependent else grid.sample(problem.source_f)
        limit = _SOURCE_LIMITS.get(name, 1e-4 * float(np.max(np.abs(f))))
        val = verify_source(problem, grid)
        results.append((f"source {name}", val, limit, val <= limit))
    rng = np.random.default_rng(seed)
    for n in sizes:
        grid = fd.GridSpec.square(n)
        const = fd.assemble_elliptic(None, grid)
        worst_c = worst_v = 0.0
        for _ in range(trials):
            u, f = rng.standard_normal(grid.shape), rng.standard_normal(grid.shape)
            kappa = rng.uniform(0.1, 10.0, grid.shape)
            ref = fd.assembled_residual(const, u, f)
            got = fd.residual_const(u, f, grid).data[0]
            worst_c = max(worst_c, np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
            ref = fd.assembled_residual(fd.assemble_elliptic(kappa, grid), u, f)
            got = fd.residual_nonconst(u, fd.kappa_to_dual(kappa), f, grid).data[0]
            worst_v = max(worst_v, np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
        results.append((f"stencil vs matrix n={n}", worst_c, 1e-13, worst_c <= 1e-13))
        results.append((f"dual-grid vs matrix n={n}", worst_v, 1e-13, worst_v <= 1e-13))
    return results
