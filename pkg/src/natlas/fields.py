"""The four learnable fields and their composed intensity predictor.

* ``psi_r``: 4D hash grid + MLP -> 3-vector velocity.  Its output layer
  starts at zero so the untrained model is exactly the identity map.
* ``psi_s``: 3D hash grid + MLP -> n-vector of time-invariant features.
* ``psi_i``: 4D hash grid + MLP -> n-vector of per-time intensity features.
* ``psi_d``: MLP n -> 1, squashed through a sigmoid so predicted
  intensities stay in (0, 1).

The two latent vectors are fused by elementwise sum before decoding,
matching the temporal-mean construction used at atlas inference time.

Every query has a ``*_fwd`` variant returning a cache and a ``*_bwd``
variant that accumulates parameter gradients into a flat ``{name: array}``
dict and returns the gradient with respect to the query coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from .encoding import HashGrid, HashGridConfig, encode_bwd, encode_fwd
from .errors import ConfigError
from .mlp import MLP, mlp_bwd, mlp_fwd


@dataclass
class FieldSetConfig:
    latent_dim: int = 16
    hidden_width: int = 64
    hidden_layers: int = 2
    decoder_width: int = 64
    decoder_layers: int = 1
    levels: int = 8
    features_per_level: int = 2
    table_size_log2: int = 15
    base_resolution: int = 4
    growth_factor: float = 1.5
    table_init_scale: float = 1e-4
    dtype: str = "float32"

    def np_dtype(self):
        return np.dtype(self.dtype)

    def grid_config(self, input_dim: int) -> HashGridConfig:
        return HashGridConfig(
            levels=self.levels,
            features_per_level=self.features_per_level,
            table_size_log2=self.table_size_log2,
            base_resolution=self.base_resolution,
            growth_factor=self.growth_factor,
            input_dim=input_dim,
        )

    def to_dict(self):
        return asdict(self)


class FieldSet:
    """Container for the four fields plus their configuration."""

    def __init__(self, cfg, grid_r, mlp_r, grid_s, mlp_s, grid_i, mlp_i, mlp_d):
        if mlp_s.out_dim != mlp_i.out_dim:
            raise ConfigError("static and intensity fields must share the latent width")
        if mlp_d.in_dim != mlp_s.out_dim:
            raise ConfigError("decoder input width must equal the latent width")
        self.cfg = cfg
        self.grid_r, self.mlp_r = grid_r, mlp_r
        self.grid_s, self.mlp_s = grid_s, mlp_s
        self.grid_i, self.mlp_i = grid_i, mlp_i
        self.mlp_d = mlp_d

    @classmethod
    def create(cls, cfg: FieldSetConfig | None = None, seed: int = 0) -> "FieldSet":
        cfg = cfg or FieldSetConfig()
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype()
        enc_out = cfg.levels * cfg.features_per_level
        hidden = [cfg.hidden_width] * cfg.hidden_layers
        grid_r = HashGrid.create(cfg.grid_config(4), rng, dt, cfg.table_init_scale)
        mlp_r = MLP.create([enc_out, *hidden, 3], rng, dt, zero_last_layer=True)
        grid_s = HashGrid.create(cfg.grid_config(3), rng, dt, cfg.table_init_scale)
        mlp_s = MLP.create([enc_out, *hidden, cfg.latent_dim], rng, dt)
        grid_i = HashGrid.create(cfg.grid_config(4), rng, dt, cfg.table_init_scale)
        mlp_i = MLP.create([enc_out, *hidden, cfg.latent_dim], rng, dt)
        mlp_d = MLP.create(
            [cfg.latent_dim, *([cfg.decoder_width] * cfg.decoder_layers), 1], rng, dt
        )
        return cls(cfg, grid_r, mlp_r, grid_s, mlp_s, grid_i, mlp_i, mlp_d)

    # -- parameter registry -------------------------------------------------

    def params(self) -> dict:
        """Flat name -> array mapping; arrays are the live parameters."""
        out = {}
        for name, grid, mlp in (("psi_r", self.grid_r, self.mlp_r),
                                ("psi_s", self.grid_s, self.mlp_s),
                                ("psi_i", self.grid_i, self.mlp_i)):
            out[f"{name}.table"] = grid.table
            for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{name}.w{i}"] = W
                out[f"{name}.b{i}"] = b
        for i, (W, b) in enumerate(zip(self.mlp_d.weights, self.mlp_d.biases)):
            out[f"psi_d.w{i}"] = W
            out[f"psi_d.b{i}"] = b
        return out

    def param_groups(self) -> dict:
        """Seven groups: each field's grid and MLP parameters."""
        groups = {"psi_r.grid": [], "psi_r.mlp": [], "psi_s.grid": [], "psi_s.mlp": [],
                  "psi_i.grid": [], "psi_i.mlp": [], "psi_d.mlp": []}
        for key in self.params():
            head, tail = key.split(".", 1)
            kind = "grid" if tail == "table" else "mlp"
            groups[f"{head}.{kind}"].append(key)
        return groups

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def set_params(self, values: dict) -> None:
        params = self.params()
        for k, v in values.items():
            if k not in params:
                raise ConfigError(f"unknown parameter {k!r}")
            params[k][...] = v

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())


class LatentVectors(NamedTuple):
    v_static: np.ndarray
    v_intensity: np.ndarray


# ---------------------------------------------------------------------------
# single-field queries


class FieldCache(NamedTuple):
    enc: object
    mlp: object


def _field_fwd(grid: HashGrid, mlp: MLP, pts: np.ndarray):
    feats, enc_cache = encode_fwd(grid, pts)
    out, mlp_cache = mlp_fwd(mlp, feats)
    return out, FieldCache(enc_cache, mlp_cache)


def _field_bwd(grid, mlp, cache: FieldCache, upstream, grads, prefix,
               want_coord_grad=True):
    mlp_grads, dfeat = mlp_bwd(mlp, cache.mlp, upstream)
    for i in range(mlp.n_layers):
        grads[f"{prefix}.w{i}"] += mlp_grads[2 * i]
        grads[f"{prefix}.b{i}"] += mlp_grads[2 * i + 1]
    _, dpts = encode_bwd(grid, cache.enc, dfeat, grads[f"{prefix}.table"],
                         want_coord_grad=want_coord_grad)
    return dpts


def _with_time(x: np.ndarray, t) -> np.ndarray:
    x = np.asarray(x)
    t = np.broadcast_to(np.asarray(t, dtype=x.dtype), x.shape[:-1])
    return np.concatenate([x, t[..., None]], axis=-1)


def velocity_fwd(fs: FieldSet, x, t):
    return _field_fwd(fs.grid_r, fs.mlp_r, _with_time(x, t))


def velocity(fs: FieldSet, x, t) -> np.ndarray:
    """v(x, t): the stationary velocity decoded at spacetime points."""
    return velocity_fwd(fs, x, t)[0]


def static_features_fwd(fs: FieldSet, p):
    return _field_fwd(fs.grid_s, fs.mlp_s, np.asarray(p))


def static_features(fs: FieldSet, p) -> np.ndarray:
    return static_features_fwd(fs, p)[0]


def intensity_features_fwd(fs: FieldSet, p, t):
    return _field_fwd(fs.grid_i, fs.mlp_i, _with_time(p, t))


def intensity_features(fs: FieldSet, p, t) -> np.ndarray:
    return intensity_features_fwd(fs, p, t)[0]


def _sigmoid(y):
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return out


class DecodeCache(NamedTuple):
    mlp: object
    out: np.ndarray


def decode_fwd(fs: FieldSet, z):
    logits, mlp_cache = mlp_fwd(fs.mlp_d, z)
    out = _sigmoid(logits[..., 0])
    return out, DecodeCache(mlp_cache, out)


def decode(fs: FieldSet, z) -> np.ndarray:
    """Fused latent vector -> intensity in (0, 1)."""
    return decode_fwd(fs, z)[0]


def decode_bwd(fs: FieldSet, cache: DecodeCache, upstream, grads):
    s = cache.out
    dlogit = (upstream * s * (1.0 - s))[..., None]
    mlp_grads, dz = mlp_bwd(fs.mlp_d, cache.mlp, dlogit)
    for i in range(fs.mlp_d.n_layers):
        grads[f"psi_d.w{i}"] += mlp_grads[2 * i]
        grads[f"psi_d.b{i}"] += mlp_grads[2 * i + 1]
    return dz


# ---------------------------------------------------------------------------
# displacement: SVF integration of the velocity field, or direct output


class DispCache(NamedTuple):
    steps: list  # per Euler step: (field cache, pass-through mask)
    use_svf: bool
    n_steps: int


def displacement_fwd(fs: FieldSet, x, t, steps: int = 8, use_svf: bool = True):
    """u(x) for a batch of points; forward-Euler flow of the velocity.

    With ``use_svf=False`` the network output is used as the displacement
    directly (the non-diffeomorphic ablation).
    """
    x = np.asarray(x)
    if not use_svf:
        v, cache = velocity_fwd(fs, x, t)
        return v, DispCache([(cache, None)], False, 1)
    if steps < 1:
        raise ConfigError("SVF integration needs steps >= 1")
    xk = x
    caches = []
    for _ in range(steps):
        v, cache = velocity_fwd(fs, xk, t)
        raw = xk + v / steps
        nxt = np.clip(raw, 0.0, 1.0)
        mask = ((raw >= 0.0) & (raw <= 1.0)).astype(v.dtype)
        caches.append((cache, mask))
        xk = nxt
    return xk - x, DispCache(caches, True, steps)


def displacement_bwd(fs: FieldSet, cache: DispCache, du, grads):
    """Backpropagate du through the integrator; returns d(start point)."""
    if not cache.use_svf:
        fcache, _ = cache.steps[0]
        dpts = _field_bwd(fs.grid_r, fs.mlp_r, fcache, du, grads, "psi_r")
        return dpts[:, :3]
    g = np.array(du, copy=True)
    for fcache, mask in reversed(cache.steps):
        g_pre = g * mask
        dv = g_pre / cache.n_steps
        dpts = _field_bwd(fs.grid_r, fs.mlp_r, fcache, dv, grads, "psi_r")
        g = g_pre + dpts[:, :3]
    return g - du


def displacement(fs: FieldSet, x, t, steps: int = 8, use_svf: bool = True):
    return displacement_fwd(fs, x, t, steps, use_svf)[0]


# ---------------------------------------------------------------------------
# full predictor


class PredictCache(NamedTuple):
    disp: DispCache
    static: FieldCache
    intensity: FieldCache
    decode: DecodeCache
    u: np.ndarray
    phi: np.ndarray
    latents: LatentVectors


def predict_fwd(fs: FieldSet, x, t, steps: int = 8, use_svf: bool = True):
    x = np.asarray(x)
    u, disp_cache = displacement_fwd(fs, x, t, steps, use_svf)
    phi = x + u
    v_static, s_cache = static_features_fwd(fs, phi)
    v_intensity, i_cache = intensity_features_fwd(fs, phi, t)
    ihat, d_cache = decode_fwd(fs, v_static + v_intensity)
    latents = LatentVectors(v_static, v_intensity)
    return ihat, PredictCache(disp_cache, s_cache, i_cache, d_cache, u, phi, latents)


def predict_bwd(fs: FieldSet, cache: PredictCache, dihat, grads,
                dvi_extra=None, du_extra=None):
    """Backward through decode -> features -> deformation.

    ``dvi_extra`` adds an upstream on v_intensity (intensity regularizer);
    ``du_extra`` adds an upstream on u (deformation penalties).
    """
    dz = decode_bwd(fs, cache.decode, dihat, grads)
    dvs = dz
    dvi = dz if dvi_extra is None else dz + dvi_extra
    dphi_s = _field_bwd(fs.grid_s, fs.mlp_s, cache.static, dvs, grads, "psi_s")
    dphi_i = _field_bwd(fs.grid_i, fs.mlp_i, cache.intensity, dvi, grads, "psi_i")
    du = dphi_s + dphi_i[:, :3]
    if du_extra is not None:
        du = du + du_extra
    displacement_bwd(fs, cache.disp, du, grads)
    return du


@dataclass
class DeformationSample:
    """Per-point deformation quantities in normalized coordinates."""

    x: np.ndarray
    t: np.ndarray
    v: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    J: np.ndarray | None = None
    det_j: np.ndarray | None = None
    div_u: np.ndarray | None = None


def predict_intensity(fs: FieldSet, x, t, steps: int = 8, use_svf: bool = True,
                      jacobian_h=None):
    """Full pipeline: deform, fetch latents, decode.

    Returns (ihat, DeformationSample, LatentVectors).  ``jacobian_h``
    (per-axis step, normalized units, default 1/32) controls the
    finite-difference stencil for J / det / div; pass ``None`` arrays of
    points of shape (N, 3) and times of shape (N,).
    """
    from .deformation import jacobian_pointwise  # local import, avoids a cycle

    x = np.atleast_2d(np.asarray(x))
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    ihat, cache = predict_fwd(fs, x, t, steps, use_svf)
    v = velocity(fs, x, t)
    h = np.full(3, 1.0 / 32.0) if jacobian_h is None else np.asarray(jacobian_h, float)

    def u_fn(pts):
        return displacement(fs, pts, t, steps, use_svf)

    J = jacobian_pointwise(u_fn, x, h)
    det = np.linalg.det(J)
    div = np.trace(J, axis1=1, axis2=2) - 3.0
    sample = DeformationSample(x=x, t=t, v=v, u=cache.u, phi=cache.phi,
                               J=J, det_j=det, div_u=div)
    return ihat, sample, cache.latents
