"""Synthetic moving-phantom sequences with known ground-truth motion.

The phantom is a textured ellipsoid (with a brighter core) over a smooth
background, moved frame-to-frame by a rigid transform with a sinusoidal
motion law.  Because the ground-truth displacement of every frame is
analytic, the generator doubles as the reference for motion-recovery
error at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .volume import LabelVolume4D, Volume4D, trilinear_sample


@dataclass
class PhantomConfig:
    dims: tuple = (32, 32, 32)
    n_frames: int = 8
    spacing: tuple = (1.0, 1.0, 1.0)
    radii: tuple = (0.32, 0.26, 0.22)       # ellipsoid semi-axes, fraction of extent
    core_scale: float = 0.45                # core semi-axes relative to the body
    amplitude: float = 2.0                  # peak translation in voxels
    direction: tuple = (1.0, 0.6, 0.3)      # translation direction (normalized internally)
    rotation_deg: float = 0.0               # peak rotation about the z axis
    noise_sigma: float = 0.02               # static additive noise
    texture_cells: int = 14                 # texture grid resolution (~2 voxels/cell at 32³)
    texture_strength: float = 0.25

    def validate(self):
        errs = []
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            errs.append(f"dims must be 3 axes of at least 4 voxels, got {self.dims}")
        if self.n_frames < 1:
            errs.append("n_frames must be >= 1")
        if any(r <= 0 or r >= 0.5 for r in self.radii):
            errs.append("radii must lie in (0, 0.5) of the volume extent")
        if self.noise_sigma < 0:
            errs.append("noise_sigma must be >= 0")
        if self.amplitude < 0:
            errs.append("amplitude must be >= 0")
        if errs:
            raise ConfigError(errs)


class SynthResult(NamedTuple):
    volume: Volume4D
    labels: LabelVolume4D
    gt_disp: np.ndarray  # (T, X, Y, Z, 3) image-to-atlas displacement, normalized units
    translations: np.ndarray  # (T, 3) per-frame translation in voxels
    rotations: np.ndarray  # (T,) per-frame rotation, radians


def _motion_law(cfg: PhantomConfig):
    """Per-frame rigid motion; peak translation magnitude equals cfg.amplitude."""
    T = cfg.n_frames
    phase = np.sin(2.0 * np.pi * np.arange(T) / T)
    e = np.asarray(cfg.direction, dtype=np.float64)
    norm = np.linalg.norm(e)
    if norm == 0:
        raise ConfigError("direction must be a nonzero vector")
    e = e / norm
    translations = cfg.amplitude * phase[:, None] * e[None, :]
    rotations = np.deg2rad(cfg.rotation_deg) * phase
    return translations, rotations


def _rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def synth_sequence(cfg: PhantomConfig | None = None, seed: int = 0) -> SynthResult:
    """Generate a deterministic phantom time-series with ground truth.

    Frame k shows the base scene pushed through the rigid transform
    A_k (rotate about the volume center, then translate), so the
    image-to-atlas map of frame k is A_k^{-1} and the returned
    displacement fields are u_k(x) = A_k^{-1}(x) - x in normalized
    coordinates.
    """
    cfg = cfg or PhantomConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    X, Y, Z = cfg.dims
    T = cfg.n_frames
    scale = np.maximum(np.array([X, Y, Z], np.float64) - 1.0, 1.0)

    translations, rotations = _motion_law(cfg)
    trans_norm = translations / scale[None, :]  # voxel -> normalized units

    # object must stay inside the domain for every frame
    center = np.full(3, 0.5)
    max_extent = np.asarray(cfg.radii) + np.abs(trans_norm).max(axis=0)
    margin = 2.0 / scale  # keep a 2-voxel rim
    if np.any(center + max_extent + margin > 1.0) or np.any(center - max_extent - margin < 0.0):
        raise ConfigError(
            "motion amplitude pushes the phantom out of bounds "
            f"(extent {max_extent}, radii {cfg.radii}, amplitude {cfg.amplitude} vox)"
        )

    # static ingredients
    tex_grid = rng.uniform(0.0, 1.0, size=(cfg.texture_cells,) * 3)
    noise = rng.normal(0.0, cfg.noise_sigma, size=(X, Y, Z)) if cfg.noise_sigma > 0 else 0.0

    ax = [np.arange(n, dtype=np.float64) / max(n - 1, 1) for n in (X, Y, Z)]
    gx, gy, gz = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    grid = np.stack([gx, gy, gz], axis=-1)  # (X, Y, Z, 3)

    radii = np.asarray(cfg.radii, np.float64)

    def scene(pts):
        """Intensity and labels of the canonical (atlas) scene at points."""
        d2_body = (((pts - center) / radii) ** 2).sum(axis=-1)
        d2_core = (((pts - center) / (radii * cfg.core_scale)) ** 2).sum(axis=-1)
        tex = trilinear_sample(tex_grid, pts)
        intensity = 0.15 + 0.20 * tex
        body = d2_body <= 1.0
        core = d2_core <= 1.0
        intensity = np.where(body, 0.55 + cfg.texture_strength * tex, intensity)
        intensity = np.where(core, 0.85 + 0.1 * tex, intensity)
        labels = np.zeros(pts.shape[:-1], dtype=np.uint8)
        labels[body] = 1
        labels[core] = 2
        return intensity, labels

    frames = np.empty((X, Y, Z, T), np.float32)
    labels4 = np.empty((X, Y, Z, T), np.uint8)
    gt_disp = np.empty((T, X, Y, Z, 3), np.float32)
    for k in range(T):
        R = _rotation_matrix(rotations[k])
        # A_k^{-1}(x) = R^T (x - c - d_k) + c
        rel = grid - center - trans_norm[k]
        back = rel @ R + center  # rel @ R == R.T applied to row vectors
        inten, lab = scene(back)
        if cfg.noise_sigma > 0:
            inten = inten + noise
        frames[..., k] = np.clip(inten, 0.0, 1.0)
        labels4[..., k] = lab
        gt_disp[k] = back - grid

    vol = Volume4D(frames, np.asarray(cfg.spacing, np.float32))
    labs = LabelVolume4D(labels4, np.asarray(cfg.spacing, np.float32))
    return SynthResult(vol, labs, gt_disp, translations, rotations)


def relative_motion_field(translations: np.ndarray, rotations: np.ndarray,
                          dims, i: int, j: int) -> np.ndarray:
    """Exact displacement carrying frame-j coordinates onto frame i.

    For the rigid law A_k (rotate about the center, then translate in
    voxels), the point of frame i matching frame-j coordinate x is
    A_i(A_j^{-1}(x)).  Returned as (X, Y, Z, 3) in normalized units;
    i == j gives the zero field.
    """
    dims = tuple(int(n) for n in dims)
    scale = np.maximum(np.asarray(dims, np.float64) - 1.0, 1.0)
    d = np.asarray(translations, np.float64) / scale[None, :]
    center = np.full(3, 0.5)
    # row-vector form of R_i R_j^T applied to columns
    M = _rotation_matrix(rotations[j]) @ _rotation_matrix(rotations[i]).T
    ax = [np.arange(n, dtype=np.float64) / max(n - 1, 1) for n in dims]
    gx, gy, gz = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    grid = np.stack([gx, gy, gz], axis=-1)
    y = (grid - center - d[j]) @ M + center + d[i]
    return y - grid
