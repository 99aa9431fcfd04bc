"""Contrast-limited adaptive histogram equalization for 4D volumes.

Each timepoint is equalized independently with 3D tiles, 256-bin
histograms and trilinear blending between the per-tile intensity
mappings.  ``clip_limit`` is the usual multiple of the uniform bin
height; excess counts are redistributed uniformly.  Tiles with no
contrast (a single occupied bin) keep the identity mapping, which makes
the transform exact on constant volumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume import Volume4D

N_BINS = 256


@dataclass
class ClaheConfig:
    clip_limit: float = 2.0
    tiles: tuple = (8, 8, 8)

    def __post_init__(self):
        errors = []
        if self.clip_limit <= 0:
            errors.append("clip_limit must be > 0")
        if len(self.tiles) != 3 or any(int(t) < 1 for t in self.tiles):
            errors.append(f"tiles must be 3 counts of at least 1, got {self.tiles}")
        if errors:
            raise ConfigError(errors)


def _tile_grid(dims, tiles):
    """Effective tile counts: requested, but at least 4 voxels per tile."""
    eff = []
    for d, t in zip(dims, tiles):
        eff.append(int(max(1, min(int(t), d // 4 if d >= 4 else 1))))
    return tuple(eff)


def _clip_histogram(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip bins at clip_limit * mean height, redistributing the excess."""
    n = hist.sum()
    if n == 0:
        return hist
    limit = max(clip_limit * n / N_BINS, 1.0)
    hist = hist.astype(np.float64)
    for _ in range(8):
        excess = np.maximum(hist - limit, 0.0).sum()
        if excess <= 1e-9 * n:
            break
        hist = np.minimum(hist, limit) + excess / N_BINS
    return np.minimum(hist, limit + 1e-9 * n)


def _tile_mapping(values: np.ndarray, clip_limit: float):
    """Equalization lookup table for one tile, or None for the identity."""
    bins = np.minimum((values * N_BINS).astype(np.int64), N_BINS - 1)
    hist = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.float64)
    occupied = np.nonzero(hist)[0]
    if occupied.size <= 1:
        return None  # no contrast to amplify
    hist = _clip_histogram(hist, clip_limit)
    cdf = np.cumsum(hist)
    cdf_min = cdf[occupied[0]]
    denom = cdf[-1] - cdf_min
    if denom <= 0:
        return None
    return ((cdf - cdf_min) / denom).astype(np.float64)


def equalize_frame(frame: np.ndarray, clip_limit: float, tiles) -> np.ndarray:
    """CLAHE on a single 3D frame with values in [0, 1]."""
    dims = frame.shape
    nt = _tile_grid(dims, tiles)
    bounds = [np.linspace(0, d, t + 1).round().astype(int) for d, t in zip(dims, nt)]
    centers = [(b[:-1] + b[1:] - 1) / 2.0 for b in bounds]

    mappings = np.empty(nt + (N_BINS,), dtype=np.float64)
    identity = np.zeros(nt, dtype=bool)
    for ix in range(nt[0]):
        for iy in range(nt[1]):
            for iz in range(nt[2]):
                tile = frame[bounds[0][ix]:bounds[0][ix + 1],
                             bounds[1][iy]:bounds[1][iy + 1],
                             bounds[2][iz]:bounds[2][iz + 1]]
                m = _tile_mapping(tile, clip_limit)
                if m is None:
                    identity[ix, iy, iz] = True
                    mappings[ix, iy, iz] = 0.0
                else:
                    mappings[ix, iy, iz] = m

    if identity.all():
        return frame.copy()

    # fractional position of each voxel on the tile-center lattice
    frac = []
    for ax, d in enumerate(dims):
        c = centers[ax]
        pos = np.interp(np.arange(d, dtype=np.float64), c, np.arange(len(c), dtype=np.float64))
        frac.append(pos)
    fx = frac[0][:, None, None] + np.zeros(dims)
    fy = frac[1][None, :, None] + np.zeros(dims)
    fz = frac[2][None, None, :] + np.zeros(dims)

    lo = [np.minimum(np.floor(f).astype(int), n - 1) for f, n in zip((fx, fy, fz), nt)]
    wf = [f - l for f, l in zip((fx, fy, fz), lo)]

    bins = np.minimum((frame * N_BINS).astype(np.int64), N_BINS - 1)
    out = np.zeros(dims, dtype=np.float64)
    for dx in (0, 1):
        wx = wf[0] if dx else 1.0 - wf[0]
        tx = np.minimum(lo[0] + dx, nt[0] - 1)
        for dy in (0, 1):
            wy = wf[1] if dy else 1.0 - wf[1]
            ty = np.minimum(lo[1] + dy, nt[1] - 1)
            for dz in (0, 1):
                wz = wf[2] if dz else 1.0 - wf[2]
                tz = np.minimum(lo[2] + dz, nt[2] - 1)
                w = wx * wy * wz
                mapped = mappings[tx, ty, tz, bins]
                ident = identity[tx, ty, tz]
                mapped = np.where(ident, frame, mapped)
                out += w * mapped
    return np.clip(out, 0.0, 1.0)


def clahe(vol: Volume4D, clip_limit: float = 2.0, tiles=(8, 8, 8)) -> Volume4D:
    """Equalize every timepoint of a volume independently."""
    if clip_limit <= 0:
        raise ConfigError("clahe clip_limit must be > 0")
    out = np.empty_like(vol.data)
    for t in range(vol.n_frames):
        out[..., t] = equalize_frame(vol.data[..., t].astype(np.float64), clip_limit, tiles)
    return Volume4D(out, vol.spacing)
