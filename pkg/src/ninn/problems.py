"""Benchmark problems with closed-form solutions.

Sources are hand-derived closed forms (checked against a fourth-order finite
difference of the exact solution by :func:`verify_source`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .fd import GridSpec

PI = np.pi


class ConfigurationError(ValueError):
    """Invalid problem or network configuration."""


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    domain: tuple
    exact_u: Callable
    source_f: Callable
    boundary_g: Callable
    kappa: Optional[Callable] = None
    time_dependent: bool = False
    t0: float = 0.0

    def grid(self, n: int, lattice: str = "nodes") -> GridSpec:
        lo, hi = self.domain
        return GridSpec.square(n, lo, hi, lattice)

    def initial(self, grid: GridSpec) -> np.ndarray:
        return grid.sample(self.exact_u, self.t0)


# ---------------------------------------------------------------------------
# steady problems

def _bubble_u(x, y):
    return x * (x - 1) * y * (y - 1)


def _bubble_f(x, y):
    return -2.0 * (x * (x - 1) + y * (y - 1))


def _peak_u(x, y):
    return 0.0005 * (x * (x - 1) * y * (y - 1)) ** 2 * np.exp(10 * x**2 + 10 * y)


def _peak_f(x, y):
    p, dp = x * (x - 1), 2 * x - 1
    q, dq = y * (y - 1), 2 * y - 1
    # u = c * A(x) * B(y),  A = p^2 exp(10x^2),  B = q^2 exp(10y)
    a = p * p
    b = q * q
    a2 = 2 * dp * dp + 4 * p + 20 * p * p + 80 * x * p * dp + 400 * x * x * p * p
    b2 = 2 * dq * dq + 4 * q + 40 * q * dq + 100 * q * q
    return -0.0005 * np.exp(10 * x**2 + 10 * y) * (a2 * b + a * b2)


def _exptrig_u(x, y):
    return np.exp(-(x**2) - y**2) * np.sin(3 * PI * x) * np.sin(3 * PI * y) + x


def _exptrig_f(x, y):
    sx, cx = np.sin(3 * PI * x), np.cos(3 * PI * x)
    sy, cy = np.sin(3 * PI * y), np.cos(3 * PI * y)
    lap = (4 * x**2 + 4 * y**2 - 4 - 18 * PI**2) * sx * sy - 12 * PI * (x * cx * sy + y * sx * cy)
    return -np.exp(-(x**2) - y**2) * lap


# ---------------------------------------------------------------------------
# interface problem with checkerboard diffusion

@dataclass(frozen=True)
class KelloggSolution:
    """``u = r^beta (a_i sin(beta t) + b_i cos(beta t))`` on quadrant ``i``."""

    beta: float
    coeffs: tuple  # ((a1, b1), ..., (a4, b4)), counter-clockwise from the +x axis
    kappa_values: tuple

    def quadrant(self, theta):
        return np.minimum((theta // (PI / 2)).astype(int), 3)

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        theta = np.mod(np.arctan2(y, x), 2 * PI)
        r = np.hypot(x, y)
        q = self.quadrant(theta)
        c = np.asarray(self.coeffs)
        a, b = c[q, 0], c[q, 1]
        return r**self.beta * (a * np.sin(self.beta * theta) + b * np.cos(self.beta * theta))

    def angular(self, i: int, theta, derivative: bool = False):
        a, b = self.coeffs[i]
        s = self.beta
        if derivative:
            return s * (a * np.cos(s * theta) - b * np.sin(s * theta))
        return a * np.sin(s * theta) + b * np.cos(s * theta)


def _interface_matrix(beta: float, kappa) -> np.ndarray:
    """Continuity of u and kappa du/dtheta at theta = pi/2, pi, 3pi/2, 2pi (=0)."""
    A = np.zeros((8, 8))
    for i in range(4):
        j = (i + 1) % 4
        th_i = (i + 1) * PI / 2
        th_j = th_i if j else 0.0
        A[2 * i, 2 * i : 2 * i + 2] = np.sin(beta * th_i), np.cos(beta * th_i)
        A[2 * i, 2 * j : 2 * j + 2] -= np.sin(beta * th_j), np.cos(beta * th_j)
        A[2 * i + 1, 2 * i : 2 * i + 2] = kappa[i] * beta * np.array([np.cos(beta * th_i), -np.sin(beta * th_i)])
        A[2 * i + 1, 2 * j : 2 * j + 2] -= kappa[j] * beta * np.array([np.cos(beta * th_j), -np.sin(beta * th_j)])
    return A


def solve_kellogg_coefficients(kappa_values=(5.0, 1.0, 5.0, 1.0), tol: float = 1e-12,
                               normalize: str = "max") -> KelloggSolution:
    """Smallest singular exponent in (0, 1) and its interface coefficients.

    The determinant of the 8x8 interface system is scanned for its first sign
    change and the root refined by bisection. ``normalize='max'`` scales the
    null vector to ``max |coef| = 1``; ``'b1'`` sets the cosine coefficient of
    the first quadrant to one.
    """
    kappa = tuple(float(k) for k in kappa_values)
    if len(kappa) != 4 or min(kappa) <= 0:
        raise ConfigurationError(f"need four positive diffusion values, got {kappa_values}")
    if np.allclose(kappa, kappa[0], rtol=1e-14, atol=0):
        raise ConfigurationError("uniform kappa: use smooth problems")

    det = lambda b: np.linalg.det(_interface_matrix(b, kappa))
    grid = np.linspace(1e-6, 1 - 1e-6, 4001)
    vals = np.array([det(b) for b in grid])
    sign = np.sign(vals)
    idx = np.nonzero(sign[:-1] * sign[1:] <= 0)[0]
    if idx.size == 0:
        raise ConfigurationError(f"no singular exponent in (0, 1) for kappa={kappa}")
    lo, hi = grid[idx[0]], grid[idx[0] + 1]
    flo = vals[idx[0]]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = det(mid)
        if fm == 0.0:
            lo = hi = mid
            break
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    beta = 0.5 * (lo + hi)

    _, _, vt = np.linalg.svd(_interface_matrix(beta, kappa))
    v = vt[-1]
    if normalize == "max":
        v = v / v[np.argmax(np.abs(v))]
    elif normalize == "b1":
        v = v / v[1]
    else:
        raise ValueError(f"normalize must be 'max' or 'b1', got {normalize!r}")
    coeffs = tuple((float(v[2 * i]), float(v[2 * i + 1])) for i in range(4))
    return KelloggSolution(float(beta), coeffs, kappa)


def _checkerboard(k_odd: float, k_even: float):
    def kappa(x, y):
        # closed lower-left: (0, 0) and the positive axes belong to quadrant 1
        same = (np.asarray(x) >= 0) == (np.asarray(y) >= 0)
        return np.where(same, k_odd, k_even)

    return kappa


# ---------------------------------------------------------------------------
# time-dependent problems

def _trig(n: int):
    def u(x, y, t):
        return np.cos(t) * np.sin(n * PI * x) * np.sin(n * PI * y)

    def f(x, y, t):
        s = np.sin(n * PI * x) * np.sin(n * PI * y)
        return (-np.sin(t) + 2 * n * n * PI**2 * np.cos(t)) * s

    return u, f


def _gauss_bump(x, y):
    return np.exp(-50 * ((2 * x - 1) ** 2 + (2 * y - 1) ** 2))


def _gaussian_u(x, y, t):
    return np.cos(t) * _gauss_bump(x, y)


def _gaussian_f(x, y, t):
    g = _gauss_bump(x, y)
    lap = (40000 * ((2 * x - 1) ** 2 + (2 * y - 1) ** 2) - 800) * g
    return -np.sin(t) * g - np.cos(t) * lap


PROBLEM_NAMES = ("bubble", "peak", "exptrig", "kellogg", "trig1", "trig4", "gaussian")


def make_problem(name: str, kellogg_normalize: str = "max") -> ProblemSpec:
    if name == "bubble":
        return ProblemSpec(name, (0.0, 1.0), _bubble_u, _bubble_f, _bubble_u)
    if name == "peak":
        return ProblemSpec(name, (0.0, 1.0), _peak_u, _peak_f, _peak_u)
    if name == "exptrig":
        return ProblemSpec(name, (0.0, 1.0), _exptrig_u, _exptrig_f, _exptrig_u)
    if name == "kellogg":
        sol = solve_kellogg_coefficients((5.0, 1.0, 5.0, 1.0), normalize=kellogg_normalize)
        zero = lambda x, y: np.zeros(np.broadcast(x, y).shape)
        return ProblemSpec(name, (-1.0, 1.0), sol, zero, sol, kappa=_checkerboard(5.0, 1.0))
    if name in ("trig1", "trig4"):
        u, f = _trig(int(name[-1]))
        return ProblemSpec(name, (0.0, 1.0), u, f, u, time_dependent=True)
    if name == "gaussian":
        return ProblemSpec(name, (0.0, 1.0), _gaussian_u, _gaussian_f, _gaussian_u, time_dependent=True)
    raise ConfigurationError(f"unknown problem {name!r}; choose from {', '.join(PROBLEM_NAMES)}")


def _d2(fn, x, y, axis, e):
    if axis == 0:
        s = lambda k: fn(x + k * e, y)
    else:
        s = lambda k: fn(x, y + k * e)
    return (-s(2) + 16 * s(1) - 30 * s(0) + 16 * s(-1) - s(-2)) / (12 * e * e)


def verify_source(problem: ProblemSpec, grid: GridSpec, step: float = 1e-3, t: float = 0.3) -> float:
    """Max interior discrepancy between the closed-form source and a 4th-order
    difference of the exact solution (plus ``u_t`` for time-dependent cases)."""
    if problem.kappa is not None:
        raise ConfigurationError(f"{problem.name}: source check needs a smooth constant-kappa problem")
    X, Y = grid.mesh()
    X, Y = X[1:-1, 1:-1], Y[1:-1, 1:-1]
    if problem.time_dependent:
        u = lambda x, y: problem.exact_u(x, y, t)
        ut = lambda k: problem.exact_u(X, Y, t + k * step)
        du_dt = (-ut(2) + 8 * ut(1) - 8 * ut(-1) + ut(-2)) / (12 * step)
        f = problem.source_f(X, Y, t)
    else:
        u = problem.exact_u
        du_dt = 0.0
        f = problem.source_f(X, Y)
    lap = _d2(u, X, Y, 0, step) + _d2(u, X, Y, 1, step)
    return float(np.max(np.abs(f - (du_dt - lap))))
