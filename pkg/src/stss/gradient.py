"""Production gradient path: two linear solves per region, no scale space.

For a region R the descent force on its boundary is assembled at the
native image scale:

    v    solves  v - alpha * Lap v = I     on D(R)   (maximum-scale cap)
    lam0 solves  -Lap lam0 = v - I         on D(R)   (zero mean)
    G    = -1/2 |grad lam0|^2 - lam0 * (I - a)

with a the channel mean of I over R itself and D(R) a small dilation
that extends the force to a band around the boundary.  Multi-channel
images contribute additively to G.  This module must stay independent
of the brute-force oracle; the test suite enforces that structurally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import central_gradient_magnitude, dilate
from .solvers import SolverConfig, SolverConvergenceError, solve_screened_poisson, solve_zero_mean_poisson

__all__ = ["RegionGradient", "compute_region_gradient", "compute_band_force"]


@dataclass
class RegionGradient:
    """Per-region descent data on the dilated solve domain.

    ``support`` is D(R); ``G`` is zero outside it.  ``lambda0`` and ``v``
    keep one slice per channel and double as warm starts for the next
    solve.  ``region_means`` are the per-channel means over the
    undilated region.
    """

    region_index: int
    support: np.ndarray
    G: np.ndarray
    lambda0: np.ndarray
    v: np.ndarray
    region_means: np.ndarray

    def surrogate_energy(self, region, image):
        """Analytic stand-in for the region's multi-scale energy.

        -1/2 * sum_R lam0 * (I - a), summed over channels; agrees with
        the direct integral in the large-horizon limit and is free once
        the gradient solves are done.
        """
        channels = _as_channels(image)
        total = 0.0
        for c in range(channels.shape[0]):
            dev = channels[c][region] - self.region_means[c]
            total += -0.5 * float(np.dot(self.lambda0[c][region], dev))
        return total


def _as_channels(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[None]
    if image.ndim == 3:
        return image
    raise ValueError("image must have shape (H, W) or (C, H, W)")


def compute_region_gradient(image, region, cfg=None, dilation_radius=3, region_index=0, warm=None):
    """Assemble the boundary force G for one region.

    ``warm`` may carry the previous iteration's RegionGradient for the
    same region; its fields seed the conjugate-gradient solves, which
    cuts iterations as the region evolves without changing the converged
    answer beyond tolerance.  Solver failures are re-raised with the
    region index attached.
    """
    cfg = cfg or SolverConfig()
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError(f"region {region_index} is empty")
    channels = _as_channels(image)
    support = dilate(region, dilation_radius)
    n_chan = channels.shape[0]
    v = np.zeros_like(channels)
    lam = np.zeros_like(channels)
    means = np.array([channels[c][region].mean() for c in range(n_chan)])
    g = np.zeros(channels.shape[1:], dtype=np.float64)
    for c in range(n_chan):
        v_start = warm.v[c] if warm is not None else None
        lam_start = warm.lambda0[c] if warm is not None else None
        try:
            v[c] = solve_screened_poisson(channels[c], support, cfg.alpha, cfg, x0=v_start)
            lam[c] = solve_zero_mean_poisson(v[c] - channels[c], support, cfg, x0=lam_start)
        except SolverConvergenceError as err:
            raise SolverConvergenceError(
                f"region {region_index}, channel {c}: solver failed", err.residual
            ) from err
        grad_mag = central_gradient_magnitude(lam[c], support)
        g += -0.5 * grad_mag**2 - lam[c] * (channels[c] - means[c])
    g[~support] = 0.0
    v[:, ~support] = 0.0
    return RegionGradient(
        region_index=region_index,
        support=support,
        G=g,
        lambda0=lam,
        v=v,
        region_means=means,
    )


def compute_band_force(grad_i, grad_j):
    """Competition force G_i - G_j on the overlap of the two solve domains.

    Zero outside the band D(R_i) & D(R_j); raises if the band is empty.
    """
    if grad_i is None or grad_j is None:
        raise ValueError("both region gradients are required")
    band = grad_i.support & grad_j.support
    if not band.any():
        raise ValueError(
            f"regions {grad_i.region_index} and {grad_j.region_index} share no band"
        )
    return np.where(band, grad_i.G - grad_j.G, 0.0)
