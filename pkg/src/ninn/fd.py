"""Finite-difference reference machinery.

Grids, the five-point stencil written as a convolution, the dual-grid
representation of a variable diffusion coefficient, assembled sparse
operators, CG and backward-Euler solvers, and the discrete error norms.
Everything here doubles as the oracle the trained networks are judged against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import autodiff as ad
from .autodiff import DimensionError, Kernel, Tensor


class SolverError(RuntimeError):
    """Iterative solve failed to reach its tolerance."""


@dataclass(frozen=True)
class GridSpec:
    """Square lattice of ``n x n`` nodes including the boundary ring.

    Axis 0 runs along x, axis 1 along y: ``field[i, j] = f(x_i, y_j)``.
    """

    n: int
    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0
    interior_mask: np.ndarray = field(init=False, repr=False, compare=False)
    boundary_mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 nodes per side, got {self.n}")
        lx, ly = self.x_max - self.x_min, self.y_max - self.y_min
        if lx <= 0 or not np.isclose(lx, ly, rtol=1e-12, atol=0):
            raise ValueError(f"domain must be a non-degenerate square, got {lx} x {ly}")
        interior = np.zeros((self.n, self.n), dtype=bool)
        interior[1:-1, 1:-1] = True
        object.__setattr__(self, "interior_mask", interior)
        object.__setattr__(self, "boundary_mask", ~interior)

    @classmethod
    def square(cls, n: int, lo: float = 0.0, hi: float = 1.0, lattice: str = "nodes") -> "GridSpec":
        """Grid over ``(lo, hi)^2``.

        With ``lattice='nodes'`` the side carries ``n`` nodes (``h = L/(n-1)``);
        with ``'intervals'`` it is cut into ``n`` cells, i.e. ``n+1`` nodes and
        ``h = L/n``.
        """
        if lattice == "nodes":
            return cls(n, lo, hi, lo, hi)
        if lattice == "intervals":
            return cls(n + 1, lo, hi, lo, hi)
        raise ValueError(f"lattice must be 'nodes' or 'intervals', got {lattice!r}")

    @property
    def domain(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def shape(self):
        return (self.n, self.n)

    def axes(self):
        k = np.arange(self.n)
        return self.x_min + k * self.h, self.y_min + k * self.h

    def mesh(self):
        """``(X, Y)`` coordinate arrays with ``indexing='ij'``."""
        x, y = self.axes()
        return np.meshgrid(x, y, indexing="ij")

    def sample(self, fn: Callable, *args) -> np.ndarray:
        X, Y = self.mesh()
        out = fn(X, Y, *args)
        return np.broadcast_to(np.asarray(out, dtype=np.float64), self.shape).copy()


# ---------------------------------------------------------------------------
# stencils as kernels

def laplacian_kernel(h: float) -> Kernel:
    """Five-point negative Laplacian ``(1/h^2) [[0,-1,0],[-1,4,-1],[0,-1,0]]``."""
    if not h > 0:
        raise ValueError(f"grid spacing must be positive, got {h}")
    w = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]]) / (h * h)
    return Kernel(w[None, None], stride=1, padding="valid")


def tp_kernels() -> dict[str, Kernel]:
    """Difference (``T_*``) and interface-pick (``P_*``) kernels for the dual grid.

    Keys are ``'T_up', 'T_down', 'T_left', 'T_right'`` and the matching ``P_*``.
    All are 5x5, applied with stride 2 and no padding.
    """
    t_up = np.zeros((5, 5))
    t_up[0, 2], t_up[2, 2] = 1.0, -1.0
    t_down = np.zeros((5, 5))
    t_down[2, 2], t_down[4, 2] = 1.0, -1.0
    p_up = np.zeros((5, 5))
    p_up[1, 2] = 1.0
    p_down = np.zeros((5, 5))
    p_down[3, 2] = 1.0
    mats = {
        "T_up": t_up,
        "T_left": -t_up.T,
        "T_down": t_down,
        "T_right": -t_down.T,
        "P_up": p_up,
        "P_left": p_up.T,
        "P_down": p_down,
        "P_right": p_down.T,
    }
    return {k: Kernel(v[None, None].copy(), stride=2, padding="valid") for k, v in mats.items()}


def dilate(u: np.ndarray) -> np.ndarray:
    """Place an ``n x n`` field on the even sites of a ``(2n-1) x (2n-1)`` lattice."""
    u = np.asarray(u)
    if u.ndim != 2 or min(u.shape) < 2:
        raise DimensionError(f"dilate expects a 2-d field with at least 2x2 nodes, got {u.shape}")
    return ad.dilate(u[None]).data[0]


def harmonic_mean(a, b):
    return 2.0 / (1.0 / a + 1.0 / b)


def kappa_to_dual(kappa: np.ndarray) -> np.ndarray:
    """Interface diffusion values on the dual lattice.

    Edge midpoints (mixed index parity) hold the harmonic mean of the two
    adjacent nodal values; every other site is zero.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(~(kappa > 0)):
        raise ValueError("diffusion coefficient must be strictly positive everywhere")
    ks = dilate(kappa)
    m = 2 * kappa.shape[0] - 1
    # odd row, even column: between vertically adjacent nodes
    ks[1:m:2, 0::2] = harmonic_mean(ks[0 : m - 1 : 2, 0::2], ks[2::2, 0::2])
    ks[0::2, 1:m:2] = harmonic_mean(ks[0::2, 0 : m - 1 : 2], ks[0::2, 2::2])
    mask = 1.0 - dilate(np.ones_like(kappa))
    return mask * ks


# ---------------------------------------------------------------------------
# residuals (differentiable when fed tracked tensors)

def _field(x, grid: GridSpec, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.data.ndim == 2 and not t.tracked:
        t = Tensor(t.data[None])
    if t.data.ndim != 3 or t.shape != (1, grid.n, grid.n):
        raise DimensionError(f"{name} has shape {t.shape}, grid expects (1, {grid.n}, {grid.n})")
    return t


def _interior(f, grid: GridSpec, dtype) -> np.ndarray:
    f = np.asarray(f.data if isinstance(f, Tensor) else f)
    if f.shape[-2:] != grid.shape:
        raise DimensionError(f"source has shape {f.shape}, grid expects {grid.shape}")
    return f.reshape(1, grid.n, grid.n)[:, 1:-1, 1:-1].astype(dtype)


def apply_laplacian(u, grid: GridSpec) -> Tensor:
    """``K_Delta * u`` on interior nodes, shape ``(1, n-2, n-2)``."""
    u = _field(u, grid, "u")
    return ad.conv2d(u, laplacian_kernel(grid.h).astype(u.dtype))


def residual_const(u, f, grid: GridSpec) -> Tensor:
    """Interior residual of the constant-coefficient scheme, ``K_Delta*u - f``."""
    lu = apply_laplacian(u, grid)
    return ad.scale_add(lu, _interior(f, grid, lu.dtype), 1.0, -1.0)


def apply_diffusion(u, kappa_dual: np.ndarray, grid: GridSpec) -> Tensor:
    """``-div(kappa grad u)`` on interior nodes via stride-2 dual-grid kernels."""
    u = _field(u, grid, "u")
    kd = np.asarray(kappa_dual)
    m = 2 * grid.n - 1
    if kd.shape != (m, m):
        raise DimensionError(f"kappa_dual has shape {kd.shape}, expected ({m}, {m})")
    kd = kd.astype(u.dtype)[None]
    tp = {k: v.astype(u.dtype) for k, v in tp_kernels().items()}
    du = ad.dilate(u)
    terms = {}
    for d in ("up", "down", "left", "right"):
        flux = ad.conv2d(du, tp[f"T_{d}"])
        coef = ad.conv2d(kd, tp[f"P_{d}"]).data
        terms[d] = ad.hadamard(flux, coef)
    vert = ad.scale_add(terms["up"], terms["down"], 1.0, -1.0)
    horiz = ad.scale_add(terms["right"], terms["left"], 1.0, -1.0)
    return ad.scale_add(vert, horiz, -1.0 / grid.h**2, -1.0 / grid.h**2)


def residual_nonconst(u, kappa_dual, f, grid: GridSpec) -> Tensor:
    lu = apply_diffusion(u, kappa_dual, grid)
    return ad.scale_add(lu, _interior(f, grid, lu.dtype), 1.0, -1.0)


# ---------------------------------------------------------------------------
# assembled operators

@dataclass
class EllipticSystem:
    """Interior-unknown system ``A u = f + B g`` with Dirichlet data eliminated.

    ``matrix`` is CSR over the ``(n-2)^2`` interior nodes in row-major order;
    ``boundary_coupling`` maps a full boundary field onto the right-hand side.
    """

    matrix: sp.csr_matrix
    boundary_coupling: sp.csr_matrix
    grid: GridSpec

    def rhs(self, f, g) -> np.ndarray:
        return rhs_adjust(self, f, g)


def _interface_weights(kappa, grid: GridSpec):
    """Per-node coupling to the +x, -x, +y, -y neighbors (already divided by h^2)."""
    n = grid.n
    if kappa is None:
        kappa = np.ones(grid.shape)
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.shape != grid.shape:
        raise DimensionError(f"kappa has shape {kappa.shape}, grid expects {grid.shape}")
    kd = kappa_to_dual(kappa)
    i2 = 2 * np.arange(n)
    h2 = grid.h**2
    wxp = np.zeros(grid.shape)
    wxp[:-1, :] = kd[i2[:-1] + 1][:, i2] / h2
    wyp = np.zeros(grid.shape)
    wyp[:, :-1] = kd[i2][:, i2[:-1] + 1] / h2
    wxm = np.zeros(grid.shape)
    wxm[1:, :] = wxp[:-1, :]
    wym = np.zeros(grid.shape)
    wym[:, 1:] = wyp[:, :-1]
    return wxp, wxm, wyp, wym


def assemble_elliptic(kappa, grid: GridSpec) -> EllipticSystem:
    """Five-point (harmonic-averaged when ``kappa`` varies) SPD interior system."""
    n = grid.n
    if n < 3:
        raise ValueError(f"need at least one interior node, got n={n}")
    wxp, wxm, wyp, wym = _interface_weights(kappa, grid)
    full = np.arange(n * n).reshape(n, n)
    interior = -np.ones((n, n), dtype=np.int64)
    m = n - 2
    interior[1:-1, 1:-1] = np.arange(m * m).reshape(m, m)
    ii, jj = np.meshgrid(np.arange(1, n - 1), np.arange(1, n - 1), indexing="ij")
    rows_a, cols_a, vals_a = [interior[ii, jj].ravel()], [interior[ii, jj].ravel()], []
    diag = (wxp + wxm + wyp + wym)[ii, jj].ravel()
    vals_a.append(diag)
    rows_b, cols_b, vals_b = [], [], []
    for w, di, dj in ((wxp, 1, 0), (wxm, -1, 0), (wyp, 0, 1), (wym, 0, -1)):
        p = interior[ii, jj].ravel()
        q = interior[ii + di, jj + dj].ravel()
        wv = w[ii, jj].ravel()
        inner = q >= 0
        rows_a.append(p[inner])
        cols_a.append(q[inner])
        vals_a.append(-wv[inner])
        rows_b.append(p[~inner])
        cols_b.append(full[ii + di, jj + dj].ravel()[~inner])
        vals_b.append(wv[~inner])
    A = sp.csr_matrix(
        (np.concatenate(vals_a), (np.concatenate(rows_a), np.concatenate(cols_a))), shape=(m * m, m * m)
    )
    B = sp.csr_matrix(
        (np.concatenate(vals_b), (np.concatenate(rows_b), np.concatenate(cols_b))), shape=(m * m, n * n)
    )
    A.sum_duplicates()
    B.sum_duplicates()
    return EllipticSystem(A, B, grid)


def rhs_adjust(system: EllipticSystem, f, g) -> np.ndarray:
    """Right-hand side ``f|interior + B g`` for the eliminated system."""
    n = system.grid.n
    f = np.asarray(f, dtype=np.float64).reshape(n, n)
    g = np.asarray(g, dtype=np.float64).reshape(n, n)
    return f[1:-1, 1:-1].ravel() + system.boundary_coupling @ g.ravel()


def assembled_residual(system: EllipticSystem, u, f) -> np.ndarray:
    """``A u_int - B u|boundary - f`` on interior nodes, shaped ``(n-2, n-2)``.

    Matrix-form counterpart of :func:`residual_const` / :func:`residual_nonconst`.
    """
    n = system.grid.n
    u = np.asarray(u, dtype=np.float64).reshape(n, n)
    r = system.matrix @ u[1:-1, 1:-1].ravel() - rhs_adjust(system, f, u)
    return r.reshape(n - 2, n - 2)


def conjugate_gradient(A, b, x0=None, rtol: float = 1e-12, maxiter: Optional[int] = None):
    """Jacobi-preconditioned CG. Returns ``(x, relative_residual, iterations)``."""
    inv_diag = 1.0 / A.diagonal()
    M = spla.LinearOperator(A.shape, matvec=lambda r: inv_diag * r, dtype=np.float64)
    if maxiter is None:
        maxiter = 10 * A.shape[0]
    count = [0]

    def cb(_):
        count[0] += 1

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0.0, 0
    x, info = spla.cg(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=cb)
    rel = np.linalg.norm(b - A @ x) / bnorm
    if info != 0 or not np.isfinite(rel):
        raise SolverError(f"CG stopped after {count[0]} iterations with relative residual {rel:.3e}")
    return x, rel, count[0]


def _embed(interior_values, boundary, grid: GridSpec) -> np.ndarray:
    u = np.array(boundary, dtype=np.float64).reshape(grid.shape)
    u[1:-1, 1:-1] = interior_values.reshape(grid.n - 2, grid.n - 2)
    return u


def solve_elliptic(problem, grid: GridSpec, rtol: float = 1e-12) -> np.ndarray:
    """FD solution ``u_h`` of a steady problem; boundary nodes carry ``g``."""
    if problem.time_dependent:
        raise ValueError(f"{problem.name} is time dependent; use solve_parabolic")
    f = grid.sample(problem.source_f)
    g = grid.sample(problem.boundary_g)
    kappa = grid.sample(problem.kappa) if problem.kappa is not None else None
    system = assemble_elliptic(kappa, grid)
    b = rhs_adjust(system, f, g)
    x, _, _ = conjugate_gradient(system.matrix, b, rtol=rtol, maxiter=10 * grid.n**2)
    return _embed(x, g, grid)


def solve_parabolic(problem, grid: GridSpec, tau: float, n_steps: int, rtol: float = 1e-12,
                    record: bool = False):
    """Backward Euler: ``(I + tau A) u^n = u^{n-1} + tau (f^n + B g^n)``.

    Returns the field at ``t0 + n_steps*tau``, or the list of all ``n_steps+1``
    fields when ``record`` is set.
    """
    if not tau > 0:
        raise ValueError(f"time step must be positive, got {tau}")
    system = assemble_elliptic(None, grid)
    m = system.matrix.shape[0]
    op = (sp.identity(m, format="csr") + tau * system.matrix).tocsr()
    t0 = problem.t0
    u = grid.sample(problem.exact_u, t0)
    history = [u]
    for k in range(1, n_steps + 1):
        t = t0 + k * tau
        f = grid.sample(problem.source_f, t)
        g = grid.sample(problem.boundary_g, t)
        b = u[1:-1, 1:-1].ravel() + tau * rhs_adjust(system, f, g)
        x0 = u[1:-1, 1:-1].ravel()
        if not np.any(b):
            x = np.zeros(m)
        else:
            x, _, _ = conjugate_gradient(op, b, x0=x0, rtol=rtol, maxiter=10 * grid.n**2)
        u = _embed(x, g, grid)
        if record:
            history.append(u)
    return history if record else u


# ---------------------------------------------------------------------------
# error norms

def _pair(u_exact, u_hat):
    a = np.asarray(u_exact, dtype=np.float64)
    b = np.asarray(u_hat.data if isinstance(u_hat, Tensor) else u_hat, dtype=np.float64)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.shape != b.shape:
        raise DimensionError(f"norm: shape mismatch {a.shape} vs {b.shape}")
    return a - b


def norm_2h(u_exact, u_hat, grid: GridSpec) -> float:
    """``h * sqrt(sum over all nodes of (u - u_hat)^2)``."""
    e = _pair(u_exact, u_hat)
    return float(grid.h * np.sqrt(np.sum(e * e)))


def norm_inf(u_exact, u_hat, grid: Optional[GridSpec] = None) -> float:
    e = _pair(u_exact, u_hat)
    return float(np.max(np.abs(e))) if e.size else 0.0
