"""Masked-domain elliptic and parabolic solvers.

Three problems, all on a region with zero-flux walls:

- explicit heat stepping (used by the brute-force oracle),
- the screened smoothing equation  v - alpha * Lap v = I,
- the zero-mean Poisson equation  -Lap lam = rhs - mean(rhs).

The elliptic solves use conjugate gradients on the masked 5-point
operator.  The pure-Neumann Poisson operator is singular up to
constants per connected component; solvability is restored by
projecting the right-hand side to zero mean and the solution is pinned
by projecting its mean out as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import MaskStencil, connected_components, masked_laplacian

__all__ = [
    "SolverConfig",
    "SolverConvergenceError",
    "heat_step",
    "solve_screened_poisson",
    "solve_zero_mean_poisson",
]

# Monotonicity (and hence the discrete maximum principle) of the explicit
# step needs 1 - 4*dt >= 0 on the unit-spacing 5-point stencil.
MAX_HEAT_DT = 0.25


class SolverConvergenceError(RuntimeError):
    """Raised when an iterative solve misses its tolerance.

    Carries the relative residual actually achieved in ``residual``.
    """

    def __init__(self, message, residual):
        super().__init__(f"{message} (achieved relative residual {residual:.3e})")
        self.residual = residual


@dataclass
class SolverConfig:
    """Knobs for the masked-domain solvers.

    ``max_iterations=None`` resolves to 40*sqrt(site count), capped at
    5000.  ``alpha`` is the maximum-scale parameter of the screened
    smoothing equation; 20 is the shipped default.  Convergence targets
    are ``cg_tolerance * ||rhs|| + cg_absolute_floor``; the absolute
    floor keeps near-zero right-hand sides (e.g. a region where the
    image is constant) from demanding residuals below rounding.
    """

    cg_tolerance: float = 1e-8
    cg_absolute_floor: float = 1e-14
    max_iterations: int | None = None
    heat_dt: float = 0.2
    alpha: float = 20.0

    def __post_init__(self):
        if self.cg_tolerance <= 0:
            raise ValueError("cg_tolerance must be > 0")
        if self.cg_absolute_floor < 0:
            raise ValueError("cg_absolute_floor must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 < self.heat_dt <= MAX_HEAT_DT:
            raise ValueError(f"heat_dt must lie in (0, {MAX_HEAT_DT}]")

    def iteration_cap(self, site_count):
        # 40*sqrt(n): the pure-Neumann Poisson solve on ragged dilated
        # domains routinely needs a few times sqrt(n) iterations
        if self.max_iterations is not None:
            return self.max_iterations
        return min(5000, max(32, int(math.ceil(40.0 * math.sqrt(site_count)))))


def heat_step(u, mask, dt):
    """One explicit Euler step of the region-restricted heat equation.

    Returns u + dt * Lap_R u; sites outside the region are unchanged.
    """
    if not 0.0 < dt <= MAX_HEAT_DT:
        raise ValueError(f"dt must lie in (0, {MAX_HEAT_DT}] for stability, got {dt}")
    return u + dt * masked_laplacian(u, mask)


def _cg(apply_op, b, x0, target, reference_norm, max_iterations, deflate=False):
    """Conjugate gradients for an SPD (or SPSD with consistent b) operator.

    Convergence is declared when the true residual norm drops below
    ``target`` (an absolute threshold).  With ``deflate`` the constant
    mode is projected out of the residual every iteration; rounding
    otherwise leaks an irreducible mean component into the semidefinite
    solve and stalls it near the tolerance.  Returns (x, iterations).
    """
    x = x0.copy()
    r = b - apply_op(x)
    if deflate:
        r -= r.mean()
    rs = float(np.dot(r, r))
    if math.sqrt(rs) <= target:
        return x, 0
    p = r.copy()
    for k in range(1, max_iterations + 1):
        ap = apply_op(p)
        pap = float(np.dot(p, ap))
        if pap <= 0.0:
            # semidefinite breakdown from rounding; the residual test below decides
            break
        step = rs / pap
        x += step * p
        r -= step * ap
        if deflate:
            r -= r.mean()
        rs_new = float(np.dot(r, r))
        if math.sqrt(rs_new) <= target:
            # recurrence residual can drift; confirm against the true residual
            true_r = b - apply_op(x)
            if deflate:
                true_r -= true_r.mean()
            true_norm = float(np.linalg.norm(true_r))
            if true_norm <= target:
                return x, k
            r = true_r
            rs_new = true_norm * true_norm
        p = r + (rs_new / rs) * p
        rs = rs_new
    achieved = float(np.linalg.norm(b - apply_op(x))) / max(reference_norm, 1e-300)
    raise SolverConvergenceError("conjugate gradient did not converge", achieved)


def solve_screened_poisson(image, mask, alpha, cfg=None, x0=None):
    """Solve v - alpha * Lap v = I on the region, zero-flux walls.

    Convergence: ||v - alpha*Lap v - I|| / ||I|| <= cfg.cg_tolerance with
    norms over the region.  Sites outside the region are returned
    unchanged from ``image``.  ``x0`` warm-starts the iteration.
    """
    cfg = cfg or SolverConfig()
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("region is empty")
    stencil = MaskStencil(mask)
    b = stencil.extract(image)
    ref = float(np.linalg.norm(b))
    out = np.array(image, dtype=np.float64, copy=True)
    if ref == 0.0:
        out[mask] = 0.0
        return out

    def apply_op(v):
        return v - alpha * stencil.laplacian(v)

    start = stencil.extract(x0) if x0 is not None else b.copy()
    target = cfg.cg_tolerance * ref + cfg.cg_absolute_floor
    v, _ = _cg(apply_op, b, start, target, ref, cfg.iteration_cap(b.size))
    out[mask] = v
    return out


def solve_zero_mean_poisson(rhs, mask, cfg=None, x0=None):
    """Solve -Lap lam = rhs - mean(rhs) on the region, zero-flux walls, mean(lam) = 0.

    Disconnected regions are solved independently per 4-connected
    component, each with its own mean projection.  The returned field is
    zero outside the region.
    """
    cfg = cfg or SolverConfig()
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("region is empty")
    rhs = np.asarray(rhs, dtype=np.float64)
    labels, count = connected_components(mask)
    out = np.zeros_like(rhs)
    for comp in range(1, count + 1):
        comp_mask = labels == comp
        stencil = MaskStencil(comp_mask)
        b = stencil.extract(rhs)
        b -= b.mean()
        ref = float(np.linalg.norm(b))
        if ref == 0.0:
            continue

        def apply_op(v, _stencil=stencil):
            return -_stencil.laplacian(v)

        if x0 is not None:
            start = stencil.extract(x0)
            start -= start.mean()
        else:
            start = np.zeros_like(b)
        target = cfg.cg_tolerance * ref + cfg.cg_absolute_floor
        lam, _ = _cg(
            apply_op, b, start, target, ref, cfg.iteration_cap(b.size), deflate=True
        )
        lam -= lam.mean()
        out[comp_mask] = lam
    return out
