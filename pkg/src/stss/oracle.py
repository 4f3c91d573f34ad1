"""Brute-force scale-space computations used to validate the analytic path.

Everything the production gradient obtains from two linear solves is
recomputed here the slow way: forward-Euler time stepping of the
region-restricted heat equation, trapezoidal quadrature in time for the
multi-scale energy and the costate, a backward integration of the forced
adjoint equation, a periodic-domain spectral identity, and exhaustive
one-site label flips as the discrete stand-in for boundary perturbation.

This module trades speed for directness on purpose; nothing here may be
used by the production gradient path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import MaskStencil, Partition, mask_diameter, periodic_laplacian
from .solvers import MAX_HEAT_DT

__all__ = [
    "ScaleSpace",
    "compute_scale_space",
    "energy_direct",
    "lambda_direct",
    "lambda_backward",
    "energy_on_region",
    "lambda_zero_direct",
    "fourier_transfer_check",
    "flip_energy_delta",
    "boundary_flip_scan",
    "default_horizon",
    "partition_energy",
]

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def default_horizon(mask):
    """Diffusion horizon that saturates the multi-scale energy tail.

    10x the squared bounding-box diagonal; validated by the horizon
    doubling checks in the test suite.
    """
    return 10.0 * mask_diameter(mask) ** 2


def _time_grid(t_max, dt):
    """Number of steps and effective step so the grid ends exactly at t_max."""
    if t_max <= 0:
        raise ValueError("t_max must be > 0")
    if not 0.0 < dt <= MAX_HEAT_DT:
        raise ValueError(f"dt must lie in (0, {MAX_HEAT_DT}] for stability, got {dt}")
    steps = max(1, int(math.ceil(t_max / dt - 1e-12)))
    return steps, t_max / steps


@dataclass
class ScaleSpace:
    """Forward-Euler stack of the region-restricted heat equation.

    ``slices[k]`` is the field at ``times[k]``; sites outside the region
    carry the initial values unchanged.  ``initial_mean`` is the region
    mean of slice 0, which every later slice preserves.
    """

    times: np.ndarray
    slices: np.ndarray
    region: np.ndarray
    initial_mean: float = field(init=False)

    def __post_init__(self):
        self.initial_mean = float(self.slices[0][self.region].mean())

    @property
    def t_max(self):
        return float(self.times[-1])


def compute_scale_space(image, region, t_max, dt=0.2):
    """Step the heat equation on the region and keep every slice.

    Memory grows with t_max/dt; for long horizons use the streaming
    accumulators (:func:`energy_on_region`, :func:`lambda_zero_direct`).
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("region is empty")
    steps, dt_eff = _time_grid(t_max, dt)
    image = np.asarray(image, dtype=np.float64)
    stencil = MaskStencil(region)
    u = stencil.extract(image)
    slices = np.empty((steps + 1,) + image.shape, dtype=np.float64)
    slices[0] = image
    frame = image.copy()
    for n in range(1, steps + 1):
        u = u + dt_eff * stencil.laplacian(u)
        frame.ravel()[stencil.flat_index] = u
        slices[n] = frame
    times = dt_eff * np.arange(steps + 1)
    return ScaleSpace(times=times, slices=slices, region=region)


def energy_direct(ss):
    """Trapezoidal quadrature of the squared deviation from the region mean.

    Integrates sum_{x in R} (u(t,x) - a)^2 over the full stored horizon.
    """
    a = ss.initial_mean
    dev = ss.slices[:, ss.region] - a
    per_slice = np.einsum("ij,ij->i", dev, dev)
    return float(_trapezoid(per_slice, ss.times))


def _interp_slice(ss, t):
    """Field at time t, linearly interpolated between stored slices."""
    k = float(np.interp(t, ss.times, np.arange(ss.times.size)))
    lo = int(math.floor(k))
    hi = min(lo + 1, ss.times.size - 1)
    w = k - lo
    return (1.0 - w) * ss.slices[lo] + w * ss.slices[hi]


def lambda_direct(ss, t):
    """Costate at time t from the explicit integral of the scale space.

    Implements lam(t,x) = -integral_t^{Tmax - t} (u(tau,x) - a) dtau,
    the change-of-variables form of the Duhamel representation, with the
    adjoint horizon at Tmax/2.  Requires 0 <= t <= Tmax/2.
    """
    t_max = ss.t_max
    if not 0.0 <= t <= 0.5 * t_max + 1e-12:
        raise ValueError(f"t must lie in [0, {0.5 * t_max}] to stay inside the stack")
    hi = t_max - t
    a = ss.initial_mean
    inside = (ss.times >= t - 1e-12) & (ss.times <= hi + 1e-12)
    idx = np.flatnonzero(inside)
    ts = [t] + [float(x) for x in ss.times[idx] if t + 1e-12 < x < hi - 1e-12] + [hi]
    fields = [_interp_slice(ss, tt) for tt in ts]
    acc = np.zeros_like(fields[0])
    for k in range(len(ts) - 1):
        acc += 0.5 * (ts[k + 1] - ts[k]) * (fields[k] + fields[k + 1] - 2.0 * a)
    out = -acc
    out[~ss.region] = 0.0
    return out


def lambda_backward(ss):
    """Costate at time 0 by stepping the forced adjoint equation backwards.

    Starts from lam = 0 at the adjoint horizon Tmax/2 and marches the
    backward heat equation with forcing 2(u - a) down to t = 0, reading
    the stored forward slices.  Independent of :func:`lambda_direct`,
    which integrates the explicit formula instead.
    """
    a = ss.initial_mean
    stencil = MaskStencil(ss.region)
    half = ss.times.size // 2
    lam = np.zeros(stencil.site_count, dtype=np.float64)
    for n in range(half, 0, -1):
        dt_n = float(ss.times[n] - ss.times[n - 1])
        u_n = stencil.extract(ss.slices[n])
        lam = lam + dt_n * (stencil.laplacian(lam) - 2.0 * (u_n - a))
    return stencil.scatter(lam)


def energy_on_region(image, region, t_max, dt=0.2, eval_mask=None):
    """Streaming multi-scale energy of one region; no slice storage.

    Same quantity as :func:`energy_direct` on the corresponding stack.
    ``eval_mask`` restricts the spatial sum (the diffusion still runs on
    the whole region); the centering value stays the region mean of the
    input.
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("region is empty")
    steps, dt_eff = _time_grid(t_max, dt)
    stencil = MaskStencil(region)
    u = stencil.extract(image)
    a = u.mean()
    if eval_mask is None:
        sel = slice(None)
    else:
        sel = np.asarray(eval_mask, dtype=bool).ravel()[stencil.flat_index]
    dev = u[sel] - a
    acc = 0.5 * float(np.dot(dev, dev))
    for n in range(1, steps + 1):
        u = u + dt_eff * stencil.laplacian(u)
        dev = u[sel] - a
        e = float(np.dot(dev, dev))
        acc += 0.5 * e if n == steps else e
    return acc * dt_eff


def lambda_zero_direct(image, region, t_max, dt=0.2):
    """Streaming costate at time 0: -integral_0^{t_max} (u(s,x) - a) ds.

    Equals :func:`lambda_direct` at t = 0 on the same time grid without
    storing the stack.  Zero outside the region.
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("region is empty")
    steps, dt_eff = _time_grid(t_max, dt)
    stencil = MaskStencil(region)
    u = stencil.extract(image)
    a = u.mean()
    acc = 0.5 * (u - a)
    for n in range(1, steps + 1):
        u = u + dt_eff * stencil.laplacian(u)
        w = 0.5 if n == steps else 1.0
        acc += w * (u - a)
    return stencil.scatter(-dt_eff * acc)


def fourier_transfer_check(image, t_max, dt=0.2):
    """Periodic-domain energy two ways: direct stepping vs spectral sum.

    lhs steps the heat equation on the torus and integrates the energy by
    trapezoid.  rhs evaluates the same quantity mode by mode: each DFT
    mode decays by g = 1 - dt*mu per step, with mu the periodic 5-point
    eigenvalue, so its time-integrated energy is the trapezoid sum of a
    geometric series.  As dt -> 0 and t_max -> infinity the per-mode
    weight tends to 1/(2 mu), the squared transfer gain that damps high
    frequencies at a linear rate.  The identity lhs == rhs is exact up to
    rounding.  The zero mode has a divergent gain, so the input must have
    zero mean.
    """
    image = np.asarray(image, dtype=np.float64)
    scale = float(np.abs(image).max())
    if scale == 0.0:
        return 0.0, 0.0
    if abs(float(image.mean())) > 1e-10 * scale:
        raise ValueError("input must have zero mean: the zero-frequency gain diverges")
    steps, dt_eff = _time_grid(t_max, dt)

    u = image.copy()
    per_slice = [float(np.dot(u.ravel(), u.ravel()))]
    for _ in range(steps):
        u = u + dt_eff * periodic_laplacian(u)
        per_slice.append(float(np.dot(u.ravel(), u.ravel())))
    per_slice = np.asarray(per_slice)
    weights = np.full(steps + 1, dt_eff)
    weights[0] = weights[-1] = 0.5 * dt_eff
    lhs = float(np.dot(weights, per_slice))

    h, w = image.shape
    fy = np.arange(h)[:, None]
    fx = np.arange(w)[None, :]
    mu = (2.0 - 2.0 * np.cos(2.0 * np.pi * fy / h)) + (2.0 - 2.0 * np.cos(2.0 * np.pi * fx / w))
    g2 = (1.0 - dt_eff * mu) ** 2
    near_one = np.abs(1.0 - g2) < 1e-14
    safe = np.where(near_one, 0.5, g2)
    # trapezoid sum of the geometric sequence g^{2n}, n = 0..steps
    gain = dt_eff * (0.5 + safe * (1.0 - safe ** (steps - 1)) / (1.0 - safe) + 0.5 * safe**steps)
    gain = np.where(near_one, dt_eff * steps, gain)
    gain[0, 0] = 0.0  # zero mode carries no energy for zero-mean input
    spectrum = np.abs(np.fft.fft2(image)) ** 2
    rhs = float((spectrum * gain).sum()) / (h * w)
    return lhs, rhs


def partition_energy(image, partition, t_max=None, dt=0.2):
    """Total multi-scale energy of a partition: sum of per-region energies.

    ``t_max=None`` uses one shared horizon, 10x the squared frame
    diagonal bound of the largest region.
    """
    masks = [m for m in partition.region_masks() if m.any()]
    if t_max is None:
        t_max = max(default_horizon(m) for m in masks)
    return sum(energy_on_region(image, m, t_max, dt) for m in masks)


def _infer_flip_target(labels, site):
    y, x = site
    own = labels[y, x]
    h, w = labels.shape
    seen = []
    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
        if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] != own:
            if labels[ny, nx] not in seen:
                seen.append(int(labels[ny, nx]))
    if not seen:
        raise ValueError(f"site {site} is not on an inter-region boundary")
    if len(seen) > 1:
        raise ValueError(f"site {site} borders several regions {seen}; pass to_label")
    return seen[0]


def flip_energy_delta(image, partition, site, to_label=None, t_max=None, dt=0.25):
    """Energy change from handing one boundary site to a neighboring region.

    Recomputes the two affected region energies by direct integration and
    returns E(after) - E(before); the discrete directional derivative of
    the total energy under a one-site exchange.  ``t_max=None`` picks a
    shared saturating horizon for the affected regions.
    """
    labels = partition.hard_labels()
    y, x = site
    frm = int(labels[y, x])
    if to_label is None:
        to_label = _infer_flip_target(labels, site)
    if to_label == frm:
        raise ValueError("flip target equals the site's own label")
    r_from = labels == frm
    r_to = labels == to_label
    if not (r_to[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2]).any():
        raise ValueError(f"site {site} is not adjacent to region {to_label}")
    r_from_new = r_from.copy()
    r_from_new[y, x] = False
    r_to_new = r_to.copy()
    r_to_new[y, x] = True
    if t_max is None:
        t_max = max(default_horizon(r_from), default_horizon(r_to_new))
    before = energy_on_region(image, r_from, t_max, dt) + energy_on_region(image, r_to, t_max, dt)
    after = energy_on_region(image, r_to_new, t_max, dt)
    if r_from_new.any():
        after += energy_on_region(image, r_from_new, t_max, dt)
    return after - before


def boundary_flip_scan(image, partition, t_max=None, dt=0.25):
    """Flip every unambiguous boundary site once and record the energy change.

    Returns a list of (site, from_label, to_label, delta) in row-major
    site order.  Sites adjacent to more than one competing region are
    skipped; per-flip energies reuse a cached baseline per region.
    """
    labels = partition.hard_labels()
    h, w = labels.shape
    if t_max is None:
        t_max = max(
            default_horizon(labels == i)
            for i in range(partition.region_count)
            if (labels == i).any()
        )
    base = {}

    def region_energy(mask, key=None):
        if key is None:
            return energy_on_region(image, mask, t_max, dt)
        if key not in base:
            base[key] = energy_on_region(image, mask, t_max, dt)
        return base[key]

    results = []
    for y in range(h):
        for x in range(w):
            own = int(labels[y, x])
            try:
                target = _infer_flip_target(labels, (y, x))
            except ValueError:
                continue
            r_from = labels == own
            r_to = labels == target
            r_from_new = r_from.copy()
            r_from_new[y, x] = False
            r_to_new = r_to.copy()
            r_to_new[y, x] = True
            before = region_energy(r_from, key=own) + region_energy(r_to, key=target)
            after = region_energy(r_to_new)
            if r_from_new.any():
                after += region_energy(r_from_new)
            results.append(((y, x), own, target, after - before))
    return results
