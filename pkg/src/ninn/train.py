"""Adam training loops for the elliptic and time-stepping solvers."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import losses
from .fd import GridSpec, kappa_to_dual
from .problems import ConfigurationError, ProblemSpec
from .unet import NetworkParams, NetworkSpec, build, forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    l2_penalty: float = 1e-7
    grad_clip_norm: float = 1e-2
    max_steps: int = 4000
    seed: int = 0
    precision: str = "single"
    alpha: Optional[float] = None  # None -> h^2/4
    loss_reduction: str = "mean"
    input_scaling: str = "raw"  # or "maxabs"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if not self.grad_clip_norm > 0:
            raise ConfigurationError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.max_steps < 0:
            raise ConfigurationError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.input_scaling not in ("raw", "maxabs"):
            raise ConfigurationError(f"input_scaling must be 'raw' or 'maxabs', got {self.input_scaling!r}")
        if self.loss_reduction not in losses.REDUCTIONS:
            raise ConfigurationError(f"loss_reduction must be one of {losses.REDUCTIONS}")
        try:
            ad.dtype_of(self.precision)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def parabolic(cls, **kw) -> "TrainConfig":
        kw.setdefault("lr", 1e-4)
        kw.setdefault("max_steps", 250)
        return cls(**kw)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


@dataclass
class TrainResult:
    best_prediction: np.ndarray
    best_loss: float
    loss_history: list
    wall_time: float
    wall_ms: list = field(default_factory=list)
    best_iteration: int = -1
    params: Optional[NetworkParams] = None

    def best_history(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.loss_history, dtype=float))


def clip_and_regularize(grads, params, cfg: TrainConfig) -> list:
    """Add the L2 penalty gradient, then rescale to ``grad_clip_norm`` if the
    global norm exceeds it."""
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    out = []
    for g, p in zip(grads, params):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        out.append(g + (2 * cfg.l2_penalty) * p if cfg.l2_penalty else g.copy())
    norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in out))
    if norm > cfg.grad_clip_norm:
        s = cfg.grad_clip_norm / norm
        for g in out:
            g *= g.dtype.type(s)
    return out


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        p -= dt(cfg.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
    return params, state


def network_input(field2d: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    dtype = ad.dtype_of(cfg.precision)
    x = np.asarray(field2d, dtype=np.float64)
    if cfg.input_scaling == "maxabs":
        peak = np.max(np.abs(x))
        if peak > 0:
            x = x / peak
    return x[None].astype(dtype)


def _optimize(params: NetworkParams, spec: NetworkSpec, inp: np.ndarray, loss_fn: Callable,
              cfg: TrainConfig, state: AdamState, steps: int, label: str,
              callback: Optional[Callable] = None) -> TrainResult:
    """Inner loop shared by both algorithms: predict, score, backprop, step,
    keep the lowest-loss prediction."""
    arrays = params.arrays()
    best_loss, best_pred, best_it = np.inf, None, -1
    history, wall = [], []
    start = time.perf_counter()
    for k in range(steps):
        tape = ad.Tape()
        u_hat = forward(params, spec, inp, tape)
        loss = loss_fn(u_hat)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"{label}: non-finite loss {value} at iteration {k}")
        grads = tape.gradient(loss, tape.watched)
        tape.clear()
        grads = clip_and_regularize(grads, arrays, cfg)
        adam_step(arrays, grads, state, cfg)
        history.append(value)
        wall.append((time.perf_counter() - start) * 1e3)
        if value < best_loss:
            best_loss, best_pred, best_it = value, u_hat.data[0].astype(np.float64), k
        if callback is not None:
            callback(k, value, best_loss)
    if best_pred is None:
        best_pred = forward(params, spec, inp).data[0].astype(np.float64)
    return TrainResult(best_pred, float(best_loss), history, time.perf_counter() - start, wall, best_it, params)


def elliptic_loss_fn(problem: ProblemSpec, grid: GridSpec, cfg: TrainConfig) -> Callable:
    f = grid.sample(problem.source_f)
    g = grid.sample(problem.boundary_g)
    alpha = losses.default_alpha(grid) if cfg.alpha is None else cfg.alpha
    red = cfg.loss_reduction
    if problem.kappa is None:
        return lambda u: losses.loss_elliptic_const(u, f, g, grid, alpha, red)
    kd = kappa_to_dual(grid.sample(problem.kappa))
    return lambda u: losses.loss_elliptic_nonconst(u, kd, f, g, grid, alpha, red)


def train_elliptic(problem: ProblemSpec, grid: GridSpec, net_spec: NetworkSpec, cfg: TrainConfig,
                   params: Optional[NetworkParams] = None, callback: Optional[Callable] = None) -> TrainResult:
    """Fit the network output to the FD solution of a steady problem, with the
    sampled source as the network input."""
    if problem.time_dependent:
        raise ConfigurationError(f"{problem.name} is time dependent; use train_parabolic")
    if net_spec.input_shape != grid.shape:
        raise ConfigurationError(f"network input {net_spec.input_shape} does not match grid {grid.shape}")
    if params is None:
        params = build(net_spec, cfg.seed, cfg.precision)
    inp = network_input(grid.sample(problem.source_f), cfg)
    state = AdamState.zeros_like(params.arrays())
    return _optimize(params, net_spec, inp, elliptic_loss_fn(problem, grid, cfg), cfg, state,
                     cfg.max_steps, problem.name, callback)


def train_parabolic(problem: ProblemSpec, grid: GridSpec, net_spec: NetworkSpec, cfg: TrainConfig,
                    tau: float = 0.1, n_steps: int = 5, first_step_iters: Optional[int] = 1000,
                    params: Optional[NetworkParams] = None, callback: Optional[Callable] = None) -> list:
    """March in time; each step trains from the previous step's weights.

    The input at step ``n`` is the best prediction of step ``n-1`` (the exact
    initial condition for ``n = 1``). Returns one :class:`TrainResult` per step.
    """
    if not problem.time_dependent:
        raise ConfigurationError(f"{problem.name} is steady; use train_elliptic")
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if net_spec.input_shape != grid.shape:
        raise ConfigurationError(f"network input {net_spec.input_shape} does not match grid {grid.shape}")
    if params is None:
        params = build(net_spec, cfg.seed, cfg.precision)
    alpha = losses.default_alpha(grid) if cfg.alpha is None else cfg.alpha
    state = AdamState.zeros_like(params.arrays())
    prev = problem.initial(grid)
    results = []
    for n in range(1, n_steps + 1):
        t = problem.t0 + n * tau
        f_n = grid.sample(problem.source_f, t)
        g_n = grid.sample(problem.boundary_g, t)
        u_prev = prev

        def loss_fn(u, u_prev=u_prev, f_n=f_n, g_n=g_n):
            return losses.loss_parabolic(u, u_prev, f_n, g_n, grid, alpha, tau, cfg.loss_reduction)

        steps = first_step_iters if (n == 1 and first_step_iters is not None) else cfg.max_steps
        inp = prev[None].astype(ad.dtype_of(cfg.precision))
        cb = None if callback is None else (lambda k, l, b, n=n: callback(n, k, l, b))
        res = _optimize(params, net_spec, inp, loss_fn, cfg, state, steps, f"{problem.name} step {n}", cb)
        log.info("%s step %d (t=%.3f): best loss %.4e", problem.name, n, t, res.best_loss)
        results.append(res)
        prev = res.best_prediction
    return results


def write_history(result: TrainResult, path) -> None:
    """Loss-history CSV with columns iteration, loss, best_loss, wall_ms."""
    best = result.best_history()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "best_loss", "wall_ms"])
        for k, (l, b) in enumerate(zip(result.loss_history, best)):
            ms = result.wall_ms[k] if k < len(result.wall_ms) else float("nan")
            w.writerow([k, "%.17g" % l, "%.17g" % b, "%.6g" % ms])
