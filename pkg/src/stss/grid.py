"""Lattice substrate: fields, region masks, partitions, and stencils.

Conventions used throughout the package:

- A scalar field is a 2-D float64 array of shape ``(H, W)``, row-major,
  with y increasing downward.  Multi-channel images are stacked along a
  leading axis, ``(C, H, W)``.
- A region mask is a 2-D bool array of the same shape.  Connectivity is
  4-neighborhood and grid spacing is 1.
- Zero-flux (Neumann) boundaries are realized by mirrored ghost cells:
  a neighbor outside the region (or outside the frame) contributes no
  flux.  The image frame itself is always a zero-flux wall.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "masked_laplacian",
    "neumann_laplacian",
    "periodic_laplacian",
    "dilate",
    "boundary_sites",
    "interior_sites",
    "connected_components",
    "central_gradient_magnitude",
    "upwind_gradient_magnitude",
    "mask_diameter",
    "MaskStencil",
    "Partition",
]

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _check_same_shape(a, b):
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def masked_laplacian(field, mask):
    """5-point Laplacian restricted to a region with zero-flux walls.

    Edges whose far site lies outside the region (or the frame) carry no
    flux, which is the mirrored-ghost (ghost = center) discretization of
    the zero normal derivative condition.  Sites outside the region map
    to 0.  The result sums to 0 over the region (discrete divergence
    theorem), up to rounding.
    """
    field = np.asarray(field, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(field, mask)
    out = np.zeros_like(field)
    # vertical edges: between (y, x) and (y+1, x)
    live = mask[:-1, :] & mask[1:, :]
    d = np.where(live, field[1:, :] - field[:-1, :], 0.0)
    out[:-1, :] += d
    out[1:, :] -= d
    # horizontal edges: between (y, x) and (y, x+1)
    live = mask[:, :-1] & mask[:, 1:]
    d = np.where(live, field[:, 1:] - field[:, :-1], 0.0)
    out[:, :-1] += d
    out[:, 1:] -= d
    return out


def neumann_laplacian(field):
    """5-point Laplacian on the full frame with zero-flux frame walls."""
    field = np.asarray(field, dtype=np.float64)
    out = np.zeros_like(field)
    d = field[1:, :] - field[:-1, :]
    out[:-1, :] += d
    out[1:, :] -= d
    d = field[:, 1:] - field[:, :-1]
    out[:, :-1] += d
    out[:, 1:] -= d
    return out


def periodic_laplacian(field):
    """5-point Laplacian on the torus (wrap-around neighbors)."""
    field = np.asarray(field, dtype=np.float64)
    return (
        np.roll(field, 1, axis=0)
        + np.roll(field, -1, axis=0)
        + np.roll(field, 1, axis=1)
        + np.roll(field, -1, axis=1)
        - 4.0 * field
    )


def dilate(mask, radius):
    """Morphological dilation by the Chebyshev (L-infinity) ball, clipped to the frame."""
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    size = 2 * int(radius) + 1
    return ndimage.binary_dilation(mask, structure=np.ones((size, size), dtype=bool))


def boundary_sites(mask):
    """Member sites with at least one non-member 4-neighbor.

    Frame edges count as zero-flux walls, not as non-members, so a mask
    filling the whole frame has no boundary sites.
    """
    mask = np.asarray(mask, dtype=bool)
    touch = np.zeros_like(mask)
    touch[1:, :] |= ~mask[:-1, :]
    touch[:-1, :] |= ~mask[1:, :]
    touch[:, 1:] |= ~mask[:, :-1]
    touch[:, :-1] |= ~mask[:, 1:]
    return mask & touch


def interior_sites(mask):
    """Member sites that are not boundary sites."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~boundary_sites(mask)


def connected_components(mask):
    """4-connected components of a mask.

    Returns (labels, count) where labels is 0 outside the mask and
    1..count inside.
    """
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=_CROSS)
    return labels, count


def central_gradient_magnitude(field, mask):
    """Central-difference gradient magnitude with Neumann mirroring.

    A missing neighbor (outside the region or the frame) is replaced by
    the reflected interior value, so the corresponding derivative
    component vanishes there; this matches the zero normal derivative
    the region's fields satisfy.  Zero outside the mask.
    """
    field = np.asarray(field, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(field, mask)
    gx = np.zeros_like(field)
    gy = np.zeros_like(field)
    both = mask[:, 2:] & mask[:, :-2]
    gx[:, 1:-1] = np.where(both, 0.5 * (field[:, 2:] - field[:, :-2]), 0.0)
    both = mask[2:, :] & mask[:-2, :]
    gy[1:-1, :] = np.where(both, 0.5 * (field[2:, :] - field[:-2, :]), 0.0)
    out = np.hypot(gx, gy)
    out[~mask] = 0.0
    return out


def upwind_gradient_magnitude(field, speed):
    """Godunov upwind gradient magnitude for motion by a signed speed.

    Discretizes |grad f| in the update f -= dtau * speed * |grad f| so the
    scheme takes information from the upwind side:  positive speed uses
    max(backward, 0) / min(forward, 0) differences, negative speed the
    mirror choice.  ``speed`` may be a scalar or a per-site array.
    Differences across the frame edge are zero (mirrored ghost).
    """
    field = np.asarray(field, dtype=np.float64)
    bx = np.zeros_like(field)
    fx = np.zeros_like(field)
    by = np.zeros_like(field)
    fy = np.zeros_like(field)
    bx[:, 1:] = field[:, 1:] - field[:, :-1]
    fx[:, :-1] = field[:, 1:] - field[:, :-1]
    by[1:, :] = field[1:, :] - field[:-1, :]
    fy[:-1, :] = field[1:, :] - field[:-1, :]
    pos = (
        np.maximum(bx, 0.0) ** 2
        + np.minimum(fx, 0.0) ** 2
        + np.maximum(by, 0.0) ** 2
        + np.minimum(fy, 0.0) ** 2
    )
    neg = (
        np.minimum(bx, 0.0) ** 2
        + np.maximum(fx, 0.0) ** 2
        + np.minimum(by, 0.0) ** 2
        + np.maximum(fy, 0.0) ** 2
    )
    return np.sqrt(np.where(np.asarray(speed) > 0, pos, neg))


def mask_diameter(mask):
    """Bounding-box diagonal of a mask, in sites.

    Used as the length scale for choosing diffusion horizons; extents
    count sites, so a single site has diameter sqrt(2).
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask has no diameter")
    return float(np.hypot(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1))


class MaskStencil:
    """Compressed neighbor structure for fast repeated stencil sweeps.

    Stores, for the sites of a mask in flat row-major order, the
    compressed index of each in-region 4-neighbor.  ``laplacian`` on the
    compressed vector matches :func:`masked_laplacian` at the mask sites
    up to summation-order rounding.
    """

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        self.mask = mask
        self.shape = mask.shape
        self.flat_index = np.flatnonzero(mask.ravel())
        self.site_count = self.flat_index.size
        h, w = mask.shape
        pos = np.full(mask.size, -1, dtype=np.int64)
        pos[self.flat_index] = np.arange(self.site_count)
        ys, xs = np.unravel_index(self.flat_index, mask.shape)
        self._links = []
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny = ys + dy
            nx = xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            nb = np.full(self.site_count, -1, dtype=np.int64)
            nb[ok] = pos[ny[ok] * w + nx[ok]]
            ok &= nb >= 0
            self._links.append((np.flatnonzero(ok), nb[ok]))

    def laplacian(self, values):
        """Masked 5-point Laplacian of a compressed (site_count,) vector."""
        out = np.zeros_like(values)
        for src, nb in self._links:
            out[src] += values[nb] - values[src]
        return out

    def extract(self, field):
        """Compress a full-frame field to the mask's sites."""
        return np.asarray(field, dtype=np.float64).ravel()[self.flat_index]

    def scatter(self, values, fill=0.0):
        """Expand a compressed vector to a full-frame field."""
        out = np.full(self.mask.size, fill, dtype=np.float64)
        out[self.flat_index] = values
        return out.reshape(self.shape)


@dataclass
class Partition:
    """Relaxed indicator fields for N regions.

    ``phi`` has shape (N, H, W) with values in [0, 1]; hard labels are
    the per-site argmax with ties going to the lowest index.
    """

    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 3:
            raise ValueError("phi must have shape (N, H, W)")

    @property
    def region_count(self):
        return self.phi.shape[0]

    @property
    def frame_shape(self):
        return self.phi.shape[1:]

    def hard_labels(self):
        """Per-site argmax label; np.argmax takes the first (lowest) index on ties."""
        return np.argmax(self.phi, axis=0)

    def region_masks(self):
        labels = self.hard_labels()
        return [labels == i for i in range(self.region_count)]

    def clip(self):
        """Clip indicator values into [0, 1] in place and return self."""
        np.clip(self.phi, 0.0, 1.0, out=self.phi)
        return self

    @classmethod
    def from_labels(cls, labels, region_count=None):
        labels = np.asarray(labels)
        n = int(labels.max()) + 1 if region_count is None else int(region_count)
        phi = np.zeros((n,) + labels.shape, dtype=np.float64)
        for i in range(n):
            phi[i][labels == i] = 1.0
        return cls(phi)
