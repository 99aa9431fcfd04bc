"""Velocity-field integration and deformation-quality measures.

Two integrators cover the two uses of the stationary velocity field:

* ``integrate_pointwise`` runs a K-step forward-Euler flow at scattered
  points (the training path; differentiable through field queries).
* ``integrate_grid`` uses scaling and squaring on a dense grid (the
  export / evaluation path); the inverse deformation integrates the
  negated field.

Jacobians and divergence use a central-difference stencil of one
evaluation-grid voxel, falling back to one-sided differences at the
domain boundary.  Folding counts interior voxels with det J <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .volume import axis_coords, save_array_raw, trilinear_sample, _read_raw


@dataclass
class DenseDeformation:
    """Displacement vector per voxel of a regular grid, normalized units."""

    disp: np.ndarray  # (X, Y, Z, 3)
    direction: str = "forward"  # or "inverse"

    def __post_init__(self):
        self.disp = np.asarray(self.disp)
        if self.disp.ndim != 4 or self.disp.shape[-1] != 3:
            raise DataError(f"dense deformation must be (X, Y, Z, 3), got {self.disp.shape}")
        if not np.all(np.isfinite(self.disp)):
            raise DataError("dense deformation contains non-finite values")

    @property
    def dims(self):
        return self.disp.shape[:3]

    def save(self, path):
        # raw container, f32, the three channels ride on the T axis
        save_array_raw(self.disp.astype(np.float32), np.ones(3, np.float32), path, 0)

    @classmethod
    def load(cls, path, direction="forward"):
        data, _, dtype_code = _read_raw(path)
        if dtype_code != 0 or data.shape[-1] != 3:
            raise DataError(f"{path}: not a 3-channel f32 displacement file")
        return cls(data, direction)


def dense_grid_coords(dims, dtype=np.float64) -> np.ndarray:
    """(X, Y, Z, 3) array of normalized voxel-center coordinates."""
    ax = [axis_coords(n, dtype) for n in dims]
    gx, gy, gz = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def sample_displacement(disp: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear lookup of a displacement field at normalized points."""
    return np.stack([trilinear_sample(disp[..., c], pts) for c in range(3)], axis=-1)


# ---------------------------------------------------------------------------
# integration


def integrate_pointwise(vel_fn, x0: np.ndarray, steps: int = 8,
                        clamp: bool = True) -> np.ndarray:
    """Forward-Euler flow of dx/ds = v(x) over s in [0, 1].

    vel_fn maps (N, 3) points to (N, 3) velocities.  Returns u = x_K - x0.
    Euler is exact for constant fields at any K; for smooth fields the
    error is O(1/K).
    """
    if steps < 1:
        raise ConfigError("integration needs steps >= 1")
    x = np.asarray(x0, dtype=np.float64)
    xk = x.copy()
    for _ in range(steps):
        xk = xk + np.asarray(vel_fn(xk)) / steps
        if clamp:
            xk = np.clip(xk, 0.0, 1.0)
    return xk - x


def integrate_grid(velocity: np.ndarray, squarings: int = 6,
                   direction: str = "forward") -> DenseDeformation:
    """Scaling and squaring of a velocity field sampled on a grid.

    velocity: (X, Y, Z, 3) in normalized units.  The field is scaled by
    2^-squarings and the resulting small deformation is composed with
    itself ``squarings`` times: u <- u + u o (id + u).
    """
    if squarings < 1:
        raise ConfigError("squarings must be >= 1")
    vel = np.asarray(velocity, dtype=np.float64)
    if vel.ndim != 4 or vel.shape[-1] != 3:
        raise ConfigError(f"velocity grid must be (X, Y, Z, 3), got {vel.shape}")
    coords = dense_grid_coords(vel.shape[:3])
    u = vel / (2.0 ** squarings)
    for _ in range(squarings):
        u = u + sample_displacement(u, coords + u)
    return DenseDeformation(u, direction)


def inverse_grid(velocity: np.ndarray, squarings: int = 6) -> DenseDeformation:
    """Deformation of the inverse map: integrate the negated field."""
    out = integrate_grid(-np.asarray(velocity), squarings, direction="inverse")
    return out


def compose(a: DenseDeformation, b: DenseDeformation,
            direction: str = "forward") -> DenseDeformation:
    """(a o b)(x) = a(x + b(x)) + b(x), trilinearly resampled."""
    if a.dims != b.dims:
        raise ConfigError(f"grid mismatch: {a.dims} vs {b.dims}")
    coords = dense_grid_coords(a.dims)
    disp = sample_displacement(a.disp, coords + b.disp) + b.disp
    return DenseDeformation(disp, direction)


def identity_deformation(dims) -> DenseDeformation:
    return DenseDeformation(np.zeros(tuple(dims) + (3,)), "forward")


def invert_dense(d: DenseDeformation, iterations: int = 20) -> DenseDeformation:
    """Fixed-point inversion u_inv(y) = -u(y + u_inv(y)).

    Needed only for displacement fields that did not come from a velocity
    field (the non-SVF ablation); SVF inverses should integrate -v instead.
    """
    coords = dense_grid_coords(d.dims)
    inv = np.zeros_like(np.asarray(d.disp, dtype=np.float64))
    for _ in range(iterations):
        inv = -sample_displacement(d.disp, coords + inv)
    flag = "inverse" if d.direction == "forward" else "forward"
    return DenseDeformation(inv, flag)


# ---------------------------------------------------------------------------
# Jacobian, divergence, folding


def jacobian_pointwise(u_fn, x: np.ndarray, h) -> np.ndarray:
    """J_phi = I + du/dx at points, by central differences of step h.

    The stencil clamps to [0, 1] per axis, which degrades to a one-sided
    difference at the domain boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (3,))
    N = x.shape[0]
    J = np.zeros((N, 3, 3))
    for j in range(3):
        xp = x.copy()
        xm = x.copy()
        xp[:, j] = np.minimum(x[:, j] + h[j], 1.0)
        xm[:, j] = np.maximum(x[:, j] - h[j], 0.0)
        denom = xp[:, j] - xm[:, j]
        du = (np.asarray(u_fn(xp)) - np.asarray(u_fn(xm))) / denom[:, None]
        J[:, :, j] = du
    J += np.eye(3)
    return J


def divergence_pointwise(u_fn, x: np.ndarray, h) -> np.ndarray:
    """div u = trace(J_phi) - 3, same stencil as jacobian_pointwise."""
    J = jacobian_pointwise(u_fn, x, h)
    return np.trace(J, axis1=1, axis2=2) - 3.0


def jacobian_det_grid(d: DenseDeformation) -> np.ndarray:
    """det J_phi per voxel; central differences inside, one-sided at faces."""
    dims = d.dims
    h = [1.0 / max(n - 1, 1) for n in dims]
    u = np.asarray(d.disp, dtype=np.float64)
    J = np.empty(dims + (3, 3))
    for i in range(3):
        gx, gy, gz = np.gradient(u[..., i], h[0], h[1], h[2])
        J[..., i, 0] = gx
        J[..., i, 1] = gy
        J[..., i, 2] = gz
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0
    J[..., 2, 2] += 1.0
    return np.linalg.det(J)


def folding_ratio(d: DenseDeformation) -> float:
    """Fraction of interior voxels with det J_phi <= 0."""
    det = jacobian_det_grid(d)
    interior = det[1:-1, 1:-1, 1:-1]
    if interior.size == 0:
        interior = det
    return float(np.mean(interior <= 0.0))
