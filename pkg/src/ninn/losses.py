"""Unsupervised finite-difference losses.

Each loss is ``alpha * interior + (1 - alpha) * boundary`` where the interior
term squares a discrete PDE residual over interior nodes and the boundary term
squares the Dirichlet mismatch over the outer ring. Boundary values come from
the raw network output (weak enforcement).

``reduction='sum'`` adds the squared entries as written in the scheme;
``'mean'`` divides each term by its node count, which is what the trainer uses
by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .fd import GridSpec, apply_laplacian, residual_const, residual_nonconst

VARIANTS = ("elliptic_const", "elliptic_nonconst", "parabolic")
REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "elliptic_const"
    alpha: Optional[float] = None
    tau: Optional[float] = None
    reduction: str = "sum"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.alpha is not None and not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.variant == "parabolic" and not (self.tau is not None and self.tau > 0):
            raise ValueError("parabolic loss needs tau > 0")

    def alpha_for(self, grid: GridSpec) -> float:
        return default_alpha(grid) if self.alpha is None else self.alpha


def default_alpha(grid: GridSpec) -> float:
    return grid.h**2 / 4


class LossTerms(NamedTuple):
    interior: Tensor
    boundary: Tensor
    n_interior: int
    n_boundary: int

    def combine(self, alpha: float, reduction: str = "sum") -> Tensor:
        if reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
        wi, wb = alpha, 1.0 - alpha
        if reduction == "mean":
            wi, wb = wi / self.n_interior, wb / self.n_boundary
        return ad.scale_add(self.interior, self.boundary, wi, wb)


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def _boundary_term(u_hat: Tensor, g, grid: GridSpec) -> Tensor:
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    if g.shape[-2:] != grid.shape:
        raise DimensionError(f"boundary data has shape {g.shape}, grid expects {grid.shape}")
    diff = ad.scale_add(u_hat, g.reshape(1, grid.n, grid.n).astype(u_hat.dtype), 1.0, -1.0)
    return ad.sum_squares(diff, grid.boundary_mask)


def _as_field(u_hat, grid: GridSpec) -> Tensor:
    t = u_hat if isinstance(u_hat, Tensor) else Tensor(np.asarray(u_hat))
    if t.data.ndim == 2 and not t.tracked:
        t = Tensor(t.data[None])
    if t.shape != (1, grid.n, grid.n):
        raise DimensionError(f"prediction has shape {t.shape}, grid expects (1, {grid.n}, {grid.n})")
    return t


def _terms(interior_residual: Tensor, u_hat: Tensor, g, grid: GridSpec) -> LossTerms:
    return LossTerms(
        ad.sum_squares(interior_residual),
        _boundary_term(u_hat, g, grid),
        (grid.n - 2) ** 2,
        4 * (grid.n - 1),
    )


def elliptic_const_terms(u_hat, f, g, grid: GridSpec) -> LossTerms:
    u_hat = _as_field(u_hat, grid)
    return _terms(residual_const(u_hat, f, grid), u_hat, g, grid)


def elliptic_nonconst_terms(u_hat, kappa_dual, f, g, grid: GridSpec) -> LossTerms:
    u_hat = _as_field(u_hat, grid)
    return _terms(residual_nonconst(u_hat, kappa_dual, f, grid), u_hat, g, grid)


def parabolic_terms(u_hat_n, u_prev, f_n, g_n, grid: GridSpec, tau: float) -> LossTerms:
    """Backward-Euler residual ``u^n - u^{n-1} - tau (f^n - K_Delta*u^n)`` on interior nodes.

    ``u_prev`` is treated as data; no gradient flows into it.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    u_hat_n = _as_field(u_hat_n, grid)
    prev = np.asarray(u_prev.data if isinstance(u_prev, Tensor) else u_prev)
    f_n = np.asarray(f_n.data if isinstance(f_n, Tensor) else f_n)
    for name, arr in (("u_prev", prev), ("f_n", f_n)):
        if arr.shape[-2:] != grid.shape:
            raise DimensionError(f"{name} has shape {arr.shape}, grid expects {grid.shape}")
    dt = u_hat_n.dtype
    lu = apply_laplacian(u_hat_n, grid)
    inner = ad.crop(u_hat_n, 1, 1, grid.n - 2, grid.n - 2)
    data = (prev.reshape(grid.shape)[1:-1, 1:-1] + tau * f_n.reshape(grid.shape)[1:-1, 1:-1])[None]
    # u^n + tau*K*u^n - (u^{n-1} + tau f^n)
    r = ad.scale_add(ad.scale_add(inner, lu, 1.0, tau), data.astype(dt), 1.0, -1.0)
    return _terms(r, u_hat_n, g_n, grid)


def loss_elliptic_const(u_hat, f, g, grid: GridSpec, alpha: Optional[float] = None,
                        reduction: str = "sum") -> Tensor:
    alpha = _check_alpha(default_alpha(grid) if alpha is None else alpha)
    return elliptic_const_terms(u_hat, f, g, grid).combine(alpha, reduction)


def loss_elliptic_nonconst(u_hat, kappa_dual, f, g, grid: GridSpec, alpha: Optional[float] = None,
                           reduction: str = "sum") -> Tensor:
    alpha = _check_alpha(default_alpha(grid) if alpha is None else alpha)
    return elliptic_nonconst_terms(u_hat, kappa_dual, f, g, grid).combine(alpha, reduction)


def loss_parabolic(u_hat_n, u_prev, f_n, g_n, grid: GridSpec, alpha: Optional[float] = None,
                   tau: float = 0.1, reduction: str = "sum") -> Tensor:
    alpha = _check_alpha(default_alpha(grid) if alpha is None else alpha)
    return parabolic_terms(u_hat_n, u_prev, f_n, g_n, grid, tau).combine(alpha, reduction)
