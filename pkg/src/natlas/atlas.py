"""Atlas extraction and dense warps between image frames and atlas space.

The trained fields define, for each frame time t, a deformation
phi_t(x) = x + u_t(x) carrying image coordinates into the common atlas
frame.  The atlas itself is decoded directly on a grid: the static
latents plus the temporal mean of the intensity latents, pushed through
the decoder.  Warping a frame into atlas space is a pull-back through
the inverse deformation; warping the atlas into a frame uses the
forward one.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .deformation import (DenseDeformation, dense_grid_coords, integrate_grid,
                          inverse_grid, invert_dense)
from .errors import ConfigError
from .fields import FieldSet, decode, intensity_features, static_features, velocity
from .volume import frame_times, save_array_raw, trilinear_sample, write_pgm

_CHUNK = 1 << 16


def _grid_points(dims, dtype):
    return dense_grid_coords(dims, np.float64).reshape(-1, 3).astype(dtype)


def dense_velocity(fs: FieldSet, dims, t_norm: float, chunk: int = _CHUNK) -> np.ndarray:
    """Velocity of frame time t sampled on a (X, Y, Z) grid, in chunks."""
    pts = _grid_points(dims, fs.cfg.np_dtype())
    out = np.empty((pts.shape[0], 3), np.float64)
    for lo in range(0, pts.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        t = np.full(pts[sl].shape[0], t_norm, dtype=pts.dtype)
        out[sl] = velocity(fs, pts[sl], t)
    return out.reshape(*dims, 3)


def dense_displacement(fs: FieldSet, dims, t_norm: float, squarings: int = 6,
                       use_svf: bool = True, inverse: bool = False,
                       chunk: int = _CHUNK) -> DenseDeformation:
    """Dense deformation for one frame time.

    With the stationary-velocity parameterization the field is
    integrated by scaling and squaring (the inverse integrates -v); in
    direct mode the network output is the displacement itself and the
    inverse falls back to fixed-point iteration.
    """
    vel = dense_velocity(fs, dims, t_norm, chunk)
    if use_svf:
        return inverse_grid(vel, squarings) if inverse else integrate_grid(vel, squarings)
    fwd = DenseDeformation(vel, "forward")
    return invert_dense(fwd) if inverse else fwd


def infer_atlas(fs: FieldSet, dims, n_frames: int, chunk: int = _CHUNK) -> np.ndarray:
    """Decode the atlas on a grid: Psi_D(Psi_S(x) + mean_t Psi_I(x, t))."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    times = frame_times(n_frames)
    pts = _grid_points(dims, fs.cfg.np_dtype())
    out = np.empty(pts.shape[0], np.float32)
    for lo in range(0, pts.shape[0], chunk):
        p = pts[lo:lo + chunk]
        z = static_features(fs, p).astype(np.float64)
        acc = np.zeros_like(z)
        for t in times:
            acc += intensity_features(fs, p, np.full(p.shape[0], t, dtype=p.dtype))
        z += acc / n_frames
        out[lo:lo + chunk] = decode(fs, z.astype(p.dtype)).astype(np.float32)
    return out.reshape(dims)


def apply_deformation(values: np.ndarray, disp: DenseDeformation) -> np.ndarray:
    """Resample a scalar grid at x + u(x) for every voxel of the field."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ConfigError(f"expected a 3D scalar grid, got shape {values.shape}")
    coords = dense_grid_coords(disp.dims) + disp.disp
    sampled = trilinear_sample(values, coords.reshape(-1, 3))
    return sampled.reshape(disp.dims).astype(values.dtype, copy=False)


def warp_image_to_atlas(frame: np.ndarray, disp: DenseDeformation) -> np.ndarray:
    """Pull a frame into atlas space; requires the inverse deformation."""
    if disp.direction != "inverse":
        raise ConfigError("warping an image into atlas space needs the inverse deformation")
    return apply_deformation(frame, disp)


def warp_atlas_to_image(atlas: np.ndarray, disp: DenseDeformation) -> np.ndarray:
    """Push the atlas into a frame's space via the forward deformation."""
    if disp.direction != "forward":
        raise ConfigError("warping the atlas into image space needs the forward deformation")
    return apply_deformation(atlas, disp)


def export_atlas(atlas: np.ndarray, out_dir, spacing=(1.0, 1.0, 1.0),
                 stem: str = "atlas") -> dict:
    """Write the atlas volume (raw container) plus three mid-plane PGMs."""
    atlas = np.asarray(atlas, np.float32)
    if atlas.ndim != 3:
        raise ConfigError(f"expected a 3D atlas, got shape {atlas.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"volume": out_dir / f"{stem}.raw"}
    save_array_raw(atlas[..., None], spacing, paths["volume"])
    x, y, z = (n // 2 for n in atlas.shape)
    slices = {"xy": atlas[:, :, z], "xz": atlas[:, y, :], "yz": atlas[x, :, :]}
    for name, img in slices.items():
        path = out_dir / f"{stem}_{name}.pgm"
        write_pgm(img, path)
        paths[name] = path
    return paths
