"""Training loop: batch sampling, Adam, cosine schedule, checkpoints.

Each step draws a cartesian batch (S jittered spatial points x M frame
indices), evaluates the full objective with gradients and applies one
Adam update with a cosine-decayed learning rate.  All randomness flows
through a single PCG64 generator whose state is serialized into
checkpoints, so training N steps equals training k steps, saving,
loading and training N-k more, bit for bit.

Checkpoints are a sectioned binary container (magic ``NATC``): every
section carries a name, a payload (ndarray or JSON) and a CRC32 so
truncation or corruption is detected on load.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DataError
from .fields import FieldSet, FieldSetConfig
from .losses import CentralityState, LossWeights, SampleBatch, compute_losses
from .volume import Volume4D, frame_times

CHECKPOINT_MAGIC = b"NATC"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sII")
_SEC_HEAD = struct.Struct("<H")
_SEC_BODY = struct.Struct("<BQ")
_CRC = struct.Struct("<I")

_KIND_ARRAY = 0
_KIND_JSON = 1


@dataclass
class TrainConfig:
    iterations: int = 20000
    spatial_batch: int = 256
    temporal_batch: int = 2
    learning_rate: float = 1e-3
    lr_end: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    integration_steps: int = 8
    use_svf: bool = True
    seed: int = 0
    checkpoint_interval: int = 1000
    foreground_bias: bool = True
    foreground_percentile: float = 5.0
    background_floor: float = 0.1
    centrality_bins: int = 8
    centrality_decay: float = 0.99

    def __post_init__(self):
        errors = []
        if self.iterations < 0:
            errors.append("iterations must be >= 0")
        if self.spatial_batch < 1 or self.temporal_batch < 1:
            errors.append("batch sizes must be >= 1")
        if self.learning_rate <= 0 or self.lr_end <= 0:
            errors.append("learning rates must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            errors.append("Adam betas must lie in [0, 1)")
        if self.integration_steps < 1:
            errors.append("integration_steps must be >= 1")
        if not 0 <= self.background_floor <= 1:
            errors.append("background_floor must lie in [0, 1]")
        if not 0 <= self.foreground_percentile <= 100:
            errors.append("foreground_percentile must lie in [0, 100]")
        if self.centrality_bins < 1:
            errors.append("centrality_bins must be >= 1")
        if not 0 < self.centrality_decay < 1:
            errors.append("centrality_decay must lie in (0, 1)")
        if errors:
            raise ConfigError(errors)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown training option {k!r}" for k in unknown])
        return cls(**d)


def cosine_lr(iteration: int, cfg: TrainConfig) -> float:
    """Cosine decay from learning_rate at step 0 to lr_end at the last step."""
    span = max(cfg.iterations - 1, 1)
    frac = min(max(iteration, 0), span) / span
    return cfg.lr_end + 0.5 * (cfg.learning_rate - cfg.lr_end) * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# batch sampling


class SpatialSampler:
    """Draws jittered voxel-centre coordinates, biased toward foreground.

    Foreground is every voxel whose temporal-mean intensity reaches the
    configured percentile; a floor fraction of each batch is drawn
    uniformly from the whole volume so background is never starved.
    With bias disabled all draws are uniform over voxels.
    """

    def __init__(self, vol: Volume4D, bias: bool = True,
                 percentile: float = 5.0, floor: float = 0.1):
        self.dims = vol.spatial_dims
        self.n_vox = int(np.prod(self.dims))
        self.floor = float(floor)
        self.foreground = None
        if bias:
            mean_img = vol.data.mean(axis=3)
            thresh = np.percentile(mean_img, percentile)
            fg = np.flatnonzero(mean_img.ravel() >= thresh)
            if 0 < fg.size < self.n_vox:
                self.foreground = fg

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.foreground is None:
            flat = rng.integers(0, self.n_vox, n)
        else:
            uniform = rng.random(n) < self.floor
            flat = np.empty(n, np.int64)
            flat[uniform] = rng.integers(0, self.n_vox, int(uniform.sum()))
            picks = rng.integers(0, self.foreground.size, int(n - uniform.sum()))
            flat[~uniform] = self.foreground[picks]
        idx = np.stack(np.unravel_index(flat, self.dims), axis=1).astype(np.float64)
        denom = np.maximum(np.asarray(self.dims, np.float64) - 1.0, 1.0)
        jitter = rng.uniform(-0.5, 0.5, (n, 3))
        return np.clip((idx + jitter) / denom, 0.0, 1.0)


def sample_batch(rng: np.random.Generator, sampler: SpatialSampler,
                 n_frames: int, spatial: int, temporal: int) -> SampleBatch:
    pts = sampler.draw(rng, spatial)
    t_idx = rng.integers(0, n_frames, temporal)
    t_norm = frame_times(n_frames)[t_idx]
    return SampleBatch(pts, t_idx, t_norm)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def create(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15) -> None:
    """One in-place Adam update with bias-corrected moment estimates."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# trainer state and loop


@dataclass
class TrainerState:
    fs: FieldSet
    adam: AdamState
    centrality: CentralityState
    rng: np.random.Generator
    iteration: int
    cfg: TrainConfig
    weights: LossWeights
    volume_dims: tuple | None = None  # (X, Y, Z, T) of the training data


def init_training(cfg: TrainConfig | None = None,
                  fs_cfg: FieldSetConfig | None = None,
                  weights: LossWeights | None = None) -> TrainerState:
    cfg = cfg or TrainConfig()
    fs = FieldSet.create(fs_cfg, seed=cfg.seed)
    return TrainerState(
        fs=fs,
        adam=AdamState.create(fs.params()),
        centrality=CentralityState.create(cfg.centrality_bins, cfg.centrality_decay),
        rng=np.random.default_rng(cfg.seed),
        iteration=0,
        cfg=cfg,
        weights=weights or LossWeights(),
    )


def train(vol: Volume4D, state: TrainerState, until: int | None = None,
          log_fh=None, out_dir=None, progress=None) -> list:
    """Run training steps until ``until`` (default: cfg.iterations).

    Appends one JSON line per step to ``log_fh`` when given, writes
    interval checkpoints under ``out_dir`` and returns the per-step loss
    records.  Resuming a loaded state continues the same trajectory.
    """
    cfg = state.cfg
    stop = cfg.iterations if until is None else min(until, cfg.iterations)
    if state.volume_dims is not None and tuple(state.volume_dims) != vol.dims:
        raise ConfigError(
            f"volume dims {vol.dims} do not match the trained dims {tuple(state.volume_dims)}")
    state.volume_dims = vol.dims
    sampler = SpatialSampler(vol, cfg.foreground_bias,
                             cfg.foreground_percentile, cfg.background_floor)
    out_dir = Path(out_dir) if out_dir is not None else None
    records = []
    while state.iteration < stop:
        t0 = time.perf_counter()
        i = state.iteration
        lr = cosine_lr(i, cfg)
        batch = sample_batch(state.rng, sampler, vol.n_frames,
                             cfg.spatial_batch, cfg.temporal_batch)
        breakdown, grads = compute_losses(
            state.fs, vol, batch, state.weights, state.centrality,
            steps=cfg.integration_steps, use_svf=cfg.use_svf)
        if not breakdown.finite():
            bad = sorted(k for k, v in breakdown.to_dict().items()
                         if not np.isfinite(v))
            raise DataError(f"non-finite loss term(s) {bad} at iteration {i}")
        adam_step(state.fs.params(), grads, state.adam, lr,
                  cfg.beta1, cfg.beta2, cfg.adam_eps)
        state.iteration = i + 1
        record = {"iter": i, **breakdown.to_dict(),
                  "wall_ms": (time.perf_counter() - t0) * 1e3}
        records.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
        if progress is not None:
            progress(record)
        if (out_dir is not None and cfg.checkpoint_interval > 0
                and state.iteration % cfg.checkpoint_interval == 0
                and state.iteration < cfg.iterations):
            save_checkpoint(out_dir / f"checkpoint_{state.iteration:06d}.natc", state)
    if log_fh is not None:
        log_fh.flush()
    return records


# ---------------------------------------------------------------------------
# checkpoint container


def _rng_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_from_json(d: dict) -> np.random.Generator:
    name = d["bit_generator"]
    bitgen_cls = getattr(np.random, name, None)
    if bitgen_cls is None:
        raise CheckpointError(f"unknown random bit generator {name!r}")
    rng = np.random.Generator(bitgen_cls())
    rng.bit_generator.state = {
        "bit_generator": name,
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return rng


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a)
    dt = a.dtype.str.encode("ascii")
    head = struct.pack("<B", len(dt)) + dt + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
    return head + a.tobytes()


def _unpack_array(payload: bytes, name: str) -> np.ndarray:
    try:
        n = payload[0]
        dt = np.dtype(payload[1:1 + n].decode("ascii"))
        ndim = payload[1 + n]
        off = 2 + n
        shape = struct.unpack_from(f"<{ndim}I", payload, off) if ndim else ()
        off += 4 * ndim
        a = np.frombuffer(payload[off:], dtype=dt)
    except (IndexError, struct.error, ValueError) as e:
        raise CheckpointError(f"malformed array section {name!r}: {e}") from e
    expected = int(np.prod(shape)) if shape else 1
    if a.size != expected:
        raise CheckpointError(f"array section {name!r} has wrong payload size")
    return a.reshape(shape).copy()


def _write_section(fh, name: str, kind: int, payload: bytes) -> None:
    nb = name.encode("utf-8")
    fh.write(_SEC_HEAD.pack(len(nb)))
    fh.write(nb)
    fh.write(_SEC_BODY.pack(kind, len(payload)))
    fh.write(payload)
    fh.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))


def save_checkpoint(path, state: TrainerState) -> None:
    sections = []

    def add_json(name, obj):
        sections.append((name, _KIND_JSON, json.dumps(obj, sort_keys=True).encode()))

    def add_array(name, a):
        sections.append((name, _KIND_ARRAY, _pack_array(a)))

    add_json("meta", {"iteration": state.iteration, "adam_t": state.adam.t,
                      "volume_dims": list(state.volume_dims) if state.volume_dims else None})
    add_json("field_config", state.fs.cfg.to_dict())
    add_json("train_config", state.cfg.to_dict())
    add_json("loss_weights", state.weights.to_dict())
    add_json("rng_state", _rng_to_json(state.rng))
    add_array("centrality.mean", state.centrality.mean)
    add_array("centrality.touched", state.centrality.touched.astype(np.uint8))
    for k, p in state.fs.params().items():
        add_array(f"param.{k}", p)
        add_array(f"adam_m.{k}", state.adam.m[k])
        add_array(f"adam_v.{k}", state.adam.v[k])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(sections)))
        for name, kind, payload in sections:
            _write_section(fh, name, kind, payload)
    tmp.replace(path)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_checkpoint_sections(path) -> dict:
    """Parse and CRC-verify all sections of a checkpoint file."""
    out = {}
    with open(path, "rb") as fh:
        magic, version, n_sections = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(n_sections):
            (name_len,) = _SEC_HEAD.unpack(_read_exact(fh, _SEC_HEAD.size, "section name length"))
            name = _read_exact(fh, name_len, "section name").decode("utf-8")
            kind, payload_len = _SEC_BODY.unpack(_read_exact(fh, _SEC_BODY.size, name))
            payload = _read_exact(fh, payload_len, name)
            (crc,) = _CRC.unpack(_read_exact(fh, _CRC.size, f"{name} checksum"))
            if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
                raise CheckpointError(f"checksum mismatch in section {name!r}")
            if kind == _KIND_JSON:
                out[name] = json.loads(payload.decode("utf-8"))
            elif kind == _KIND_ARRAY:
                out[name] = _unpack_array(payload, name)
            else:
                raise CheckpointError(f"unknown section kind {kind} in {name!r}")
    return out


def load_checkpoint(path) -> TrainerState:
    sections = read_checkpoint_sections(path)
    try:
        meta = sections["meta"]
        fs_cfg = FieldSetConfig(**sections["field_config"])
        cfg = TrainConfig.from_dict(sections["train_config"])
        weights = LossWeights(**sections["loss_weights"])
        rng = _rng_from_json(sections["rng_state"])
    except KeyError as e:
        raise CheckpointError(f"checkpoint missing section {e.args[0]!r}") from e
    fs = FieldSet.create(fs_cfg, seed=cfg.seed)
    params = fs.params()
    adam = AdamState.create(params)
    adam.t = int(meta["adam_t"])
    for k in params:
        for prefix, target in (("param", params), ("adam_m", adam.m), ("adam_v", adam.v)):
            key = f"{prefix}.{k}"
            if key not in sections:
                raise CheckpointError(f"checkpoint missing section {key!r}")
            if sections[key].shape != target[k].shape:
                raise CheckpointError(f"shape mismatch in section {key!r}")
            target[k][...] = sections[key]
    centrality = CentralityState(
        mean=np.asarray(sections["centrality.mean"], np.float64),
        touched=np.asarray(sections["centrality.touched"], bool),
        decay=cfg.centrality_decay,
        bins=cfg.centrality_bins,
    )
    if centrality.mean.shape != (cfg.centrality_bins,) * 3 + (3,):
        raise CheckpointError("centrality state shape mismatch")
    dims = meta.get("volume_dims")
    return TrainerState(fs, adam, centrality, rng, int(meta["iteration"]), cfg,
                        weights, tuple(dims) if dims else None)
