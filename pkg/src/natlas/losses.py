"""Loss terms, their weighted total, and gradients through the fields.

The training objective combines an L1 reconstruction term with
deformation regularizers (mean displacement norm, squared divergence,
centrality of the running mean displacement), a hinge on negative
Jacobian determinants, an L1 penalty on the intensity latents and
stochastic anisotropic total variation of both latent fields.

``compute_losses`` evaluates everything on a spatial x temporal
cartesian batch and, on request, backpropagates the weighted total to
every parameter group in one pass.  Divergence and Jacobian share one
6-point central-difference stencil of the integrated displacement;
gradients flow through all integration steps of every stencil point.
The centrality moving average is treated as constant within a step:
only the current batch's contribution to the blended mean carries
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .fields import (FieldSet, _field_bwd, decode_bwd, decode_fwd,
                     displacement_bwd, displacement_fwd, intensity_features_fwd,
                     static_features_fwd)
from .volume import Volume4D, frame_times, trilinear_sample


@dataclass
class LossWeights:
    """Default weights follow the published grid-searched values."""

    lambda1: float = 1e-3     # mean ||u||_2
    lambda2: float = 5e-4     # mean |div u|^2
    lambda3: float = 0.1      # centrality ||u_bar||^2
    lambda_jac: float = 1.0   # hinge on -det J
    lambda_int: float = 0.05  # L1 on intensity latents
    lambda_tv: float = 0.1    # total variation of both latent fields

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda_jac,
               self.lambda_int, self.lambda_tv) < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    rec: float = 0.0
    def_norm: float = 0.0
    div: float = 0.0
    centrality: float = 0.0
    jac: float = 0.0
    int_: float = 0.0
    tv: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return {"rec": self.rec, "def_norm": self.def_norm, "div": self.div,
                "centrality": self.centrality, "jac": self.jac, "int": self.int_,
                "tv": self.tv, "total": self.total}

    def finite(self):
        return all(np.isfinite(v) for v in self.to_dict().values())


def total_loss(rec, def_norm, div, centrality, jac, int_, tv,
               w: LossWeights) -> LossBreakdown:
    total = (rec
             + w.lambda1 * def_norm + w.lambda2 * div + w.lambda3 * centrality
             + w.lambda_jac * jac + w.lambda_int * int_ + w.lambda_tv * tv)
    return LossBreakdown(rec, def_norm, div, centrality, jac, int_, tv, total)


# ---------------------------------------------------------------------------
# individual terms


def rec_loss(pred: np.ndarray, obs: np.ndarray) -> float:
    """Mean absolute reconstruction error over the batch."""
    pred = np.asarray(pred).ravel()
    obs = np.asarray(obs).ravel()
    if pred.size == 0:
        raise ConfigError("rec_loss on an empty batch")
    if pred.shape != obs.shape:
        raise ConfigError(f"batch shapes differ: {pred.shape} vs {obs.shape}")
    return float(np.mean(np.abs(obs - pred)))


def jac_loss(det_j: np.ndarray) -> float:
    """Mean of max(0, -det J): penalizes orientation-reversing points."""
    det_j = np.asarray(det_j)
    return float(np.mean(np.maximum(0.0, -det_j)))


def int_loss(v_intensity: np.ndarray) -> float:
    """Mean elementwise |v_intensity| over batch and channels."""
    return float(np.mean(np.abs(v_intensity)))


@dataclass
class CentralityState:
    """Running mean displacement per coarse spatial bin (EMA across steps)."""

    mean: np.ndarray      # (B, B, B, 3)
    touched: np.ndarray   # (B, B, B) bool
    decay: float = 0.99
    bins: int = 8

    @classmethod
    def create(cls, bins: int = 8, decay: float = 0.99) -> "CentralityState":
        if not 0.0 < decay < 1.0:
            raise ConfigError("centrality decay must lie in (0, 1)")
        return cls(np.zeros((bins, bins, bins, 3)), np.zeros((bins,) * 3, bool),
                   decay, bins)


class _CentralityAux(NamedTuple):
    inverse: np.ndarray   # (S,) index into the touched-bin list
    counts: np.ndarray    # per touched bin
    blended: np.ndarray   # (K, 3) updated means of the touched bins


def _centrality_update(ubar_s: np.ndarray, pts: np.ndarray,
                       state: CentralityState, update: bool = True):
    B = state.bins
    ids = np.minimum((np.clip(pts, 0.0, 1.0) * B).astype(np.int64), B - 1)
    flat = (ids[:, 0] * B + ids[:, 1]) * B + ids[:, 2]
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, 3))
    np.add.at(sums, inverse, ubar_s)
    batch_mean = sums / counts[:, None]
    flat_state = state.mean.reshape(-1, 3)
    blended = state.decay * flat_state[uniq] + (1.0 - state.decay) * batch_mean
    penalty = float(np.mean(np.sum(blended ** 2, axis=1)))
    if update:
        flat_state[uniq] = blended
        state.touched.reshape(-1)[uniq] = True
    return penalty, _CentralityAux(inverse, counts, blended)


class DefTerms(NamedTuple):
    def_norm: float
    div: float
    centrality: float


def def_loss(u: np.ndarray, div_u: np.ndarray, pts: np.ndarray,
             state: CentralityState, update_state: bool = True,
             return_aux: bool = False):
    """Deformation regularizer terms on a (S, M, 3) displacement batch.

    u holds the displacement of S spatial points at M timepoints; the
    centrality term bins the per-point temporal means on the state's
    coarse grid, blends them into the moving average and penalizes the
    blended means' squared norms.
    """
    u = np.asarray(u)
    if u.ndim != 3 or u.shape[2] != 3:
        raise ConfigError(f"def_loss expects u of shape (S, M, 3), got {u.shape}")
    def_norm = float(np.mean(np.linalg.norm(u, axis=2)))
    div_term = float(np.mean(np.square(div_u)))
    ubar = u.mean(axis=1)
    centrality, aux = _centrality_update(ubar, pts, state, update_state)
    terms = DefTerms(def_norm, div_term, centrality)
    return (terms, aux) if return_aux else terms


def _tv_offset(pts: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Shift one coordinate by +h, flipping to -h where it would exit [0,1]."""
    out = np.array(pts, copy=True)
    coord = out[..., axis]
    step = np.where(coord + h <= 1.0, h, -h).astype(out.dtype)
    out[..., axis] = coord + step
    return out


def tv_loss(static_fn, intensity_fn, pts: np.ndarray, times: np.ndarray,
            h_spatial, h_time: float) -> float:
    """Stochastic anisotropic L1 total variation of both latent fields.

    static_fn(p) and intensity_fn(p, t) evaluate the latent fields; the
    stencil differences features at each point and at +h along every
    axis (3 spatial for the static field, 3 spatial + time for the
    intensity field; the time axis is skipped when h_time == 0).
    """
    pts = np.asarray(pts)
    h_spatial = np.broadcast_to(np.asarray(h_spatial, float), (3,))
    base_s = np.asarray(static_fn(pts))
    diffs = [np.abs(np.asarray(static_fn(_tv_offset(pts, j, h_spatial[j]))) - base_s)
             for j in range(3)]
    tv_static = float(np.mean(np.stack(diffs)))

    M = len(times)
    pts4 = np.repeat(pts, M, axis=0)
    t4 = np.tile(np.asarray(times, float), pts.shape[0])
    base_i = np.asarray(intensity_fn(pts4, t4))
    diffs_i = [np.abs(np.asarray(intensity_fn(_tv_offset(pts4, j, h_spatial[j]), t4)) - base_i)
               for j in range(3)]
    if h_time > 0:
        t_off = np.where(t4 + h_time <= 1.0, t4 + h_time, t4 - h_time)
        diffs_i.append(np.abs(np.asarray(intensity_fn(pts4, t_off)) - base_i))
    tv_intensity = float(np.mean(np.stack(diffs_i)))
    return tv_static + tv_intensity


# ---------------------------------------------------------------------------
# cofactors (for d det / dJ)


def _det3(J):
    return (J[:, 0, 0] * (J[:, 1, 1] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 1])
            - J[:, 0, 1] * (J[:, 1, 0] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 0])
            + J[:, 0, 2] * (J[:, 1, 0] * J[:, 2, 1] - J[:, 1, 1] * J[:, 2, 0]))


def _cofactor3(J):
    C = np.empty_like(J)
    C[:, 0, 0] = J[:, 1, 1] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 1]
    C[:, 0, 1] = -(J[:, 1, 0] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 0])
    C[:, 0, 2] = J[:, 1, 0] * J[:, 2, 1] - J[:, 1, 1] * J[:, 2, 0]
    C[:, 1, 0] = -(J[:, 0, 1] * J[:, 2, 2] - J[:, 0, 2] * J[:, 2, 1])
    C[:, 1, 1] = J[:, 0, 0] * J[:, 2, 2] - J[:, 0, 2] * J[:, 2, 0]
    C[:, 1, 2] = -(J[:, 0, 0] * J[:, 2, 1] - J[:, 0, 1] * J[:, 2, 0])
    C[:, 2, 0] = J[:, 0, 1] * J[:, 1, 2] - J[:, 0, 2] * J[:, 1, 1]
    C[:, 2, 1] = -(J[:, 0, 0] * J[:, 1, 2] - J[:, 0, 2] * J[:, 1, 0])
    C[:, 2, 2] = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return C


# ---------------------------------------------------------------------------
# full training objective


class SampleBatch(NamedTuple):
    points: np.ndarray  # (S, 3) jittered spatial points, normalized
    t_idx: np.ndarray   # (M,) frame indices
    t_norm: np.ndarray  # (M,) normalized times


def _safe_unit(u: np.ndarray) -> np.ndarray:
    """u / ||u|| with zero rows mapped to zero."""
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    return np.where(norms > 0, u / np.where(norms > 0, norms, 1.0), 0.0)


def compute_losses(fs: FieldSet, vol: Volume4D, batch: SampleBatch,
                   weights: LossWeights, state: CentralityState,
                   steps: int = 8, use_svf: bool = True,
                   with_grads: bool = True, update_state: bool = True):
    """Forward (and optionally backward) pass of the weighted objective.

    Returns (LossBreakdown, grads) where grads maps parameter names to
    gradient arrays of the *total* loss, or None without ``with_grads``.
    """
    dt = fs.cfg.np_dtype()
    pts = np.asarray(batch.points, dtype=dt)
    S, M = pts.shape[0], len(batch.t_idx)
    if S == 0 or M == 0:
        raise ConfigError("empty training batch")
    N = S * M
    dims = vol.spatial_dims
    h = np.array([1.0 / max(n - 1, 1) for n in dims], dtype=dt)

    x_all = np.repeat(pts, M, axis=0)
    t_all = np.tile(np.asarray(batch.t_norm, dtype=dt), S)

    obs = np.stack(
        [trilinear_sample(vol.frame(int(k)), pts) for k in batch.t_idx], axis=1
    ).astype(dt).ravel()

    # one integration batch: centers first, then the +/- stencil per axis
    blocks = [x_all]
    denoms = []
    for j in range(3):
        xp = np.array(x_all, copy=True)
        xm = np.array(x_all, copy=True)
        xp[:, j] = np.minimum(x_all[:, j] + h[j], 1.0)
        xm[:, j] = np.maximum(x_all[:, j] - h[j], 0.0)
        denoms.append(xp[:, j] - xm[:, j])
        blocks.extend((xp, xm))
    x_int = np.concatenate(blocks, axis=0)
    t_int = np.tile(t_all, 7)

    u_int, disp_cache = displacement_fwd(fs, x_int, t_int, steps, use_svf)
    u_c = u_int[:N]
    u_plus = [u_int[N * (1 + 2 * j): N * (2 + 2 * j)] for j in range(3)]
    u_minus = [u_int[N * (2 + 2 * j): N * (3 + 2 * j)] for j in range(3)]

    J = np.zeros((N, 3, 3), dtype=dt)
    for j in range(3):
        J[:, :, j] = (u_plus[j] - u_minus[j]) / denoms[j][:, None]
    J[:, 0, 0] += 1.0
    J[:, 1, 1] += 1.0
    J[:, 2, 2] += 1.0
    det = _det3(J)
    div = J[:, 0, 0] + J[:, 1, 1] + J[:, 2, 2] - 3.0

    phi = x_all + u_c
    v_static, s_cache = static_features_fwd(fs, phi)
    v_intensity, i_cache = intensity_features_fwd(fs, phi, t_all)
    ihat, d_cache = decode_fwd(fs, v_static + v_intensity)

    rec = rec_loss(ihat, obs)
    def_terms, c_aux = def_loss(u_c.reshape(S, M, 3), div, pts, state,
                                update_state=update_state, return_aux=True)
    jac = jac_loss(det)
    int_t = int_loss(v_intensity)

    # total variation stencil (own queries at the data coordinates)
    n_lat = fs.cfg.latent_dim
    T = vol.n_frames
    h_time = 1.0 / max(T - 1, 1) if T > 1 else 0.0
    tvs_base, tvs_base_cache = static_features_fwd(fs, pts)
    tvs_off, tvs_off_caches, tvs_diff = [], [], []
    for j in range(3):
        val, cch = static_features_fwd(fs, _tv_offset(pts, j, float(h[j])))
        tvs_off.append(val)
        tvs_off_caches.append(cch)
        tvs_diff.append(val - tvs_base)
    tv_static = float(np.mean(np.abs(np.stack(tvs_diff))))

    tvi_base, tvi_base_cache = intensity_features_fwd(fs, x_all, t_all)
    tvi_off, tvi_off_caches, tvi_diff = [], [], []
    for j in range(3):
        val, cch = intensity_features_fwd(fs, _tv_offset(x_all, j, float(h[j])), t_all)
        tvi_off.append(val)
        tvi_off_caches.append(cch)
        tvi_diff.append(val - tvi_base)
    if h_time > 0:
        t_off = np.where(t_all + h_time <= 1.0, t_all + h_time, t_all - h_time)
        val, cch = intensity_features_fwd(fs, x_all, t_off)
        tvi_off.append(val)
        tvi_off_caches.append(cch)
        tvi_diff.append(val - tvi_base)
    tv_intensity = float(np.mean(np.abs(np.stack(tvi_diff))))
    tv = tv_static + tv_intensity

    breakdown = total_loss(rec, def_terms.def_norm, def_terms.div,
                           def_terms.centrality, jac, int_t, tv, weights)
    if not with_grads:
        return breakdown, None

    grads = fs.zero_grads()

    # reconstruction + intensity regularizer flow through the appearance path
    d_ihat = (-np.sign(obs - ihat) / N).astype(dt)
    dvi_extra = (weights.lambda_int * np.sign(v_intensity) / v_intensity.size).astype(dt)
    dz = decode_bwd(fs, d_cache, d_ihat, grads)
    dphi_s = _field_bwd(fs.grid_s, fs.mlp_s, s_cache, dz, grads, "psi_s")
    dphi_i = _field_bwd(fs.grid_i, fs.mlp_i, i_cache, dz + dvi_extra, grads, "psi_i")
    du_c = dphi_s + dphi_i[:, :3]

    # mean ||u||
    du_c = du_c + (weights.lambda1 / N) * _safe_unit(u_c).astype(dt)

    # centrality: gradient through the current batch's contribution only
    n_bins = c_aux.blended.shape[0]
    coeff = (2.0 * weights.lambda3 * (1.0 - state.decay) / n_bins)
    per_point = coeff * c_aux.blended[c_aux.inverse] / c_aux.counts[c_aux.inverse][:, None]
    du_c = du_c + (np.repeat(per_point, M, axis=0) / M).astype(dt)

    # divergence and Jacobian hinge through the shared stencil
    dJ = np.zeros_like(J)
    neg = det < 0.0
    if np.any(neg):
        ddet = (-weights.lambda_jac / N) * neg.astype(dt)
        dJ += ddet[:, None, None] * _cofactor3(J)
    ddiv = (2.0 * weights.lambda2 / N) * div
    dJ[:, 0, 0] += ddiv
    dJ[:, 1, 1] += ddiv
    dJ[:, 2, 2] += ddiv

    du_blocks = [du_c]
    for j in range(3):
        dstencil = dJ[:, :, j] / denoms[j][:, None]
        du_blocks.extend((dstencil, -dstencil))
    du_int = np.concatenate(du_blocks, axis=0).astype(dt)
    displacement_bwd(fs, disp_cache, du_int, grads)

    # total variation backward (parameters only; stencil points are data)
    w_s = weights.lambda_tv / (3 * S * n_lat)
    acc_base = np.zeros_like(tvs_base)
    for j in range(3):
        sgn = np.sign(tvs_diff[j]).astype(dt) * dt.type(w_s)
        _field_bwd(fs.grid_s, fs.mlp_s, tvs_off_caches[j], sgn, grads, "psi_s",
                   want_coord_grad=False)
        acc_base -= sgn
    _field_bwd(fs.grid_s, fs.mlp_s, tvs_base_cache, acc_base, grads, "psi_s",
               want_coord_grad=False)

    n_axes_i = len(tvi_diff)
    w_i = weights.lambda_tv / (n_axes_i * N * n_lat)
    acc_base_i = np.zeros_like(tvi_base)
    for j in range(n_axes_i):
        sgn = np.sign(tvi_diff[j]).astype(dt) * dt.type(w_i)
        _field_bwd(fs.grid_i, fs.mlp_i, tvi_off_caches[j], sgn, grads, "psi_i",
                   want_coord_grad=False)
        acc_base_i -= sgn
    _field_bwd(fs.grid_i, fs.mlp_i, tvi_base_cache, acc_base_i, grads, "psi_i",
               want_coord_grad=False)

    return breakdown, grads
