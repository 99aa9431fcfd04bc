"""Multi-resolution hash-grid encodings for 3D and 4D coordinates.

Each level scales the input into a lattice of geometrically growing
resolution, fetches the 2^d corner feature vectors of the enclosing cell
from a hashed table and blends them d-linearly.  Coarse levels whose
vertex count fits in the table are indexed densely (collision-free);
finer levels use the XOR-of-primes spatial hash.

The backward pass returns analytic gradients with respect to both the
table parameters (sparse scatter into the touched slots) and the input
coordinates (derivative of the d-linear weights, one-sided at cell
boundaries).

Internally corner-major (2^d, N, L) layouts keep every per-corner slice
contiguous; the level axis is vectorised throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

HASH_PRIMES = (1, 2654435761, 805459861, 3674653429)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    features_per_level: int = 2
    table_size_log2: int = 15
    base_resolution: int = 4
    growth_factor: float = 1.5
    input_dim: int = 3

    def __post_init__(self):
        errs = []
        if self.levels < 1:
            errs.append("levels must be >= 1")
        if self.features_per_level < 1:
            errs.append("features_per_level must be >= 1")
        if not 1 <= self.table_size_log2 <= 24:
            errs.append("table_size_log2 must be in 1..24")
        if self.base_resolution < 1:
            errs.append("base_resolution must be >= 1")
        if self.growth_factor <= 1.0:
            errs.append("growth_factor must be > 1")
        if self.input_dim not in (3, 4):
            errs.append("input_dim must be 3 or 4")
        if errs:
            raise ConfigError(errs)

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


def level_resolution(cfg: HashGridConfig, level: int) -> int:
    """Lattice cells per axis at a level: floor(base * growth^level)."""
    if not 0 <= level < cfg.levels:
        raise ConfigError(f"level {level} outside 0..{cfg.levels - 1}")
    return int(np.floor(cfg.base_resolution * cfg.growth_factor ** level))


def hash_index(cell: np.ndarray, table_size_log2: int) -> np.ndarray:
    """XOR-of-primes spatial hash of integer lattice coordinates.

    cell: (..., d) integers, d in 1..4.  The first prime is 1, so the x
    coordinate passes through; the result is reduced mod 2^table_size_log2.
    """
    cell = np.asarray(cell)
    d = cell.shape[-1]
    acc = np.zeros(cell.shape[:-1], dtype=np.uint32)
    for j in range(d):
        acc ^= cell[..., j].astype(np.uint32) * np.uint32(HASH_PRIMES[j])
    return acc & np.uint32((1 << table_size_log2) - 1)


def _corner_offsets(d: int) -> np.ndarray:
    """(2^d, d) binary corner offsets, x fastest (corner bit j = axis j)."""
    n = 1 << d
    out = np.zeros((n, d), dtype=np.int64)
    for c in range(n):
        for j in range(d):
            out[c, j] = (c >> j) & 1
    return out


class HashGrid:
    """Learnable multi-resolution hashed feature table."""

    def __init__(self, cfg: HashGridConfig, table: np.ndarray):
        self.cfg = cfg
        self.table = table  # (levels, table_size, F)
        d = cfg.input_dim
        self._corners = _corner_offsets(d)
        res = np.array([level_resolution(cfg, lv) for lv in range(cfg.levels)])
        self._res_i = res.astype(np.int32)
        self._res_f = res.astype(table.dtype)
        # dense levels form a prefix: (res+1)^d is monotone in the level
        dense = (res + 1) ** d <= cfg.table_size
        self._n_dense = int(dense.sum())
        strides = np.stack([(res + 1) ** j for j in range(d)], axis=1)
        strides[~dense] = 0
        self._strides = strides.astype(np.int32)  # (L, d)
        offs = (self._corners[None, :, :] * strides[:, None, :]).sum(axis=2)
        self._offs_t = offs.T.astype(np.int32).copy()  # (C, L)
        self._lvl_off = (np.arange(cfg.levels) * cfg.table_size).astype(np.int32)

    @classmethod
    def create(cls, cfg: HashGridConfig, rng: np.random.Generator,
               dtype=np.float32, init_scale: float = 1e-4) -> "HashGrid":
        table = rng.uniform(-init_scale, init_scale,
                            size=(cfg.levels, cfg.table_size, cfg.features_per_level))
        return cls(cfg, table.astype(dtype))

    @property
    def dtype(self):
        return self.table.dtype

    @property
    def n_params(self) -> int:
        return self.table.size


class EncodeCache(NamedTuple):
    flat: np.ndarray      # (2^d, N, L) int64 index into the stacked level tables
    weights: np.ndarray   # (2^d, N, L) interpolation weights
    frac: np.ndarray      # (d, N, L) local coordinates in the cell
    inside: np.ndarray    # (N, d) 1 where the input was not clamped
    gathered: np.ndarray  # (2^d, N, L, F) corner features at forward time


def _pair_products(a0, b0, a1, b1, out):
    """Fill four rows of ``out`` with the outer products of two axes."""
    np.multiply(a0, a1, out=out[0])
    np.multiply(b0, a1, out=out[1])
    np.multiply(a0, b1, out=out[2])
    np.multiply(b0, b1, out=out[3])


def _locate(grid: HashGrid, pts: np.ndarray):
    """Corner table slots, blend weights and cell-local coordinates."""
    cfg = grid.cfg
    d = cfg.input_dim
    pts = np.asarray(pts)
    if pts.ndim != 2 or pts.shape[1] != d:
        raise ConfigError(f"expected points of shape (N, {d}), got {pts.shape}")
    dt = grid.table.dtype
    N, L, C = pts.shape[0], cfg.levels, 1 << d
    nd = grid._n_dense

    clamped = np.clip(pts, 0.0, 1.0)
    inside = ((pts >= 0.0) & (pts <= 1.0)).astype(dt)

    s = clamped.T[:, :, None].astype(dt) * grid._res_f[None, None, :]  # (d, N, L)
    cell = s.astype(np.int32)
    np.minimum(cell, grid._res_i[None, None, :] - 1, out=cell)
    np.maximum(cell, 0, out=cell)
    frac = np.subtract(s, cell, dtype=dt)

    slots = np.empty((C, N, L), np.int32)
    if nd:  # dense prefix of levels, collision-free row-major indexing
        base = cell[0, :, :nd] * grid._strides[None, :nd, 0]
        for j in range(1, d):
            base += cell[j, :, :nd] * grid._strides[None, :nd, j]
        slots[:, :, :nd] = base[None, :, :] + grid._offs_t[:, None, :nd]
    if nd < L:
        cu = cell.view(np.uint32)
        mask = np.uint32(cfg.table_size - 1)
        hv = []
        for j in range(d):
            p = np.uint32(HASH_PRIMES[j])
            lo = cu[j, :, nd:] * p
            hv.append((lo, lo + p))
        bits = grid._corners
        for c in range(C):
            acc = hv[0][bits[c, 0]] ^ hv[1][bits[c, 1]]
            for j in range(2, d):
                acc = acc ^ hv[j][bits[c, j]]
            slots[c, :, nd:] = (acc & mask).astype(np.int32)

    # d-linear weights via pairwise outer products (corner bit j = axis j)
    w = np.empty((C, N, L), dtype=dt)
    lo01 = np.empty((4, N, L), dtype=dt)
    _pair_products(1.0 - frac[0], frac[0], 1.0 - frac[1], frac[1], lo01)
    if d == 3:
        a2, b2 = 1.0 - frac[2], frac[2]
        np.multiply(lo01, a2[None], out=w[:4])
        np.multiply(lo01, b2[None], out=w[4:])
    else:
        hi23 = np.empty((4, N, L), dtype=dt)
        _pair_products(1.0 - frac[2], frac[2], 1.0 - frac[3], frac[3], hi23)
        for k in range(4):
            np.multiply(lo01, hi23[k][None], out=w[4 * k:4 * k + 4])
    return slots, w, frac, inside


def encode_fwd(grid: HashGrid, pts: np.ndarray):
    """Encode points; returns (features (N, L*F), cache for backward)."""
    cfg = grid.cfg
    slots, weights, frac, inside = _locate(grid, pts)
    N = slots.shape[1]
    flat = (slots + grid._lvl_off[None, None, :]).astype(np.int64)
    gathered = np.take(grid.table.reshape(-1, cfg.features_per_level),
                       flat, axis=0)  # (C, N, L, F)
    feats = np.einsum("cnl,cnlf->nlf", weights, gathered)
    return (feats.reshape(N, cfg.output_dim),
            EncodeCache(flat, weights, frac, inside, gathered))


def encode(grid: HashGrid, pts: np.ndarray) -> np.ndarray:
    """Interpolated multi-resolution features at points in [0,1]^d."""
    return encode_fwd(grid, pts)[0]


def _contract_bit(G, axis_pos, a, b):
    """Contract one leading bit axis of G with the weight pair (a, b)."""
    idx0 = (slice(None),) * axis_pos + (0,)
    idx1 = (slice(None),) * axis_pos + (1,)
    return G[idx0] * a + G[idx1] * b


def encode_bwd(grid: HashGrid, cache: EncodeCache, upstream: np.ndarray,
               table_grad: np.ndarray | None = None, want_coord_grad: bool = True):
    """Backward pass of encode.

    upstream: (N, L*F).  Adds the table gradient into ``table_grad`` when
    given (shape of grid.table) and returns (table_grad, dpts (N, d)).
    The coordinate gradient uses the derivative of the d-linear weights
    of the containing cell (one-sided at cell boundaries) and is zero for
    clamped inputs.
    """
    cfg = grid.cfg
    d = cfg.input_dim
    F = cfg.features_per_level
    N = cache.flat.shape[1]
    dt = grid.table.dtype
    up = upstream.reshape(N, cfg.levels, F)

    if table_grad is None:
        table_grad = np.zeros_like(grid.table)
    tg = table_grad.reshape(-1, F)
    flat_idx = cache.flat.ravel()
    for f in range(F):
        wf = cache.weights * np.ascontiguousarray(up[:, :, f])[None, :, :]
        tg[:, f] += np.bincount(flat_idx, weights=wf.ravel(),
                                minlength=tg.shape[0]).astype(dt)

    dpts = None
    if want_coord_grad:
        frac = cache.frac
        # per corner: upstream . feature, summed over channels
        gdot = np.einsum("nlf,cnlf->cnl", up, cache.gathered)
        G = gdot.reshape((2,) * d + gdot.shape[1:])  # leading axes b_{d-1}..b_0
        ab = [(1.0 - frac[j], frac[j]) for j in range(d)]
        dl = [None] * d
        if d == 3:
            g01 = _contract_bit(G, 0, *ab[2])           # (b1, b0, N, L)
            w0 = _contract_bit(G, 2, *ab[0])            # (b2, b1, N, L)
            w01 = _contract_bit(w0, 1, *ab[1])          # (b2, N, L)
            dl[2] = w01[1] - w01[0]
        else:
            u = _contract_bit(G, 0, *ab[3])             # (b2, b1, b0, N, L)
            g01 = _contract_bit(u, 0, *ab[2])           # (b1, b0, N, L)
            v = _contract_bit(G, 3, *ab[0])             # (b3, b2, b1, N, L)
            g23 = _contract_bit(v, 2, *ab[1])           # (b3, b2, N, L)
            dl[2] = (g23[0, 1] - g23[0, 0]) * ab[3][0] + (g23[1, 1] - g23[1, 0]) * ab[3][1]
            dl[3] = (g23[1, 0] - g23[0, 0]) * ab[2][0] + (g23[1, 1] - g23[0, 1]) * ab[2][1]
        dl[0] = (g01[0, 1] - g01[0, 0]) * ab[1][0] + (g01[1, 1] - g01[1, 0]) * ab[1][1]
        dl[1] = (g01[1, 0] - g01[0, 0]) * ab[0][0] + (g01[1, 1] - g01[0, 1]) * ab[0][1]
        dpts = np.empty((N, d), dtype=dt)
        for j in range(d):
            dpts[:, j] = dl[j] @ grid._res_f
        dpts *= cache.inside
    return table_grad, dpts
