"""Registration-quality metrics and the pairwise evaluation harness.

Alignment quality is scored on randomly sampled ordered frame pairs
(i, j): the forward deformation of frame j is composed with the inverse
deformation of frame i, frame i is resampled into frame j's space
through the composite, and windowed normalized cross-correlation (plus
weighted Dice when label volumes are available) is accumulated against
frame j.  Deformation statistics (mean displacement norm, mean Jacobian
determinant, folding ratio) are computed over every frame's dense
forward field through the same code paths the regularizers use.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .atlas import dense_displacement
from .deformation import (DenseDeformation, compose, dense_grid_coords,
                          folding_ratio, jacobian_det_grid)
from .errors import ConfigError, DataError
from .fields import FieldSet
from .volume import (LabelVolume4D, Volume4D, frame_times, nearest_sample,
                     trilinear_sample)


@dataclass
class EvalConfig:
    n_pairs: int = 50
    window: int = 7
    seed: int = 0
    labels: tuple | None = None   # label ids to score; None = all present
    squarings: int = 6
    use_svf: bool = True

    def __post_init__(self):
        errors = []
        if self.n_pairs < 1:
            errors.append("n_pairs must be >= 1")
        if self.window < 3 or self.window % 2 == 0:
            errors.append("window must be odd and >= 3")
        if self.squarings < 1:
            errors.append("squarings must be >= 1")
        if errors:
            raise ConfigError(errors)

    def to_dict(self):
        d = asdict(self)
        d["labels"] = list(self.labels) if self.labels is not None else None
        return d


# ---------------------------------------------------------------------------
# similarity metrics


def _window_counts(dims, window: int) -> np.ndarray:
    """Number of in-bounds voxels of each (truncated) window."""
    r = window // 2
    per_axis = [np.minimum(np.arange(n) + r, n - 1) - np.maximum(np.arange(n) - r, 0) + 1
                for n in dims]
    return (per_axis[0][:, None, None] * per_axis[1][None, :, None]
            * per_axis[2][None, None, :]).astype(np.float64)


def lncc(a: np.ndarray, b: np.ndarray, window: int = 7,
         mask: np.ndarray | None = None, eps: float = 1e-8) -> float:
    """Mean windowed Pearson correlation of two scalar volumes.

    Windows are truncated at the boundary (statistics use the actual
    in-bounds voxel count).  Windows where either input has variance
    <= eps are excluded from the mean (eps guards the denominator), as
    are voxels outside the optional mask; surviving windows use the
    plain Pearson quotient, so lncc(a, alpha*a + beta) = 1 exactly for
    any alpha > 0.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ConfigError(f"lncc needs two 3D volumes of equal dims, got {a.shape} vs {b.shape}")
    if window < 3 or window % 2 == 0:
        raise ConfigError("window must be odd and >= 3")
    counts = _window_counts(a.shape, window)

    def box_mean(x):
        return uniform_filter(x, size=window, mode="constant", cval=0.0) * window ** 3 / counts

    ma, mb = box_mean(a), box_mean(b)
    va = box_mean(a * a) - ma * ma
    vb = box_mean(b * b) - mb * mb
    cov = box_mean(a * b) - ma * mb
    valid = (va > eps) & (vb > eps)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    if not np.any(valid):
        return 0.0
    cc = cov[valid] / np.sqrt(va[valid] * vb[valid])
    return float(np.clip(np.mean(cc), -1.0, 1.0))


def dice(a: np.ndarray, b: np.ndarray, label: int) -> float:
    """Overlap 2|A n B| / (|A| + |B|) of one label; NaN if absent from both."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ConfigError(f"label volumes differ in shape: {a.shape} vs {b.shape}")
    in_a = a == label
    in_b = b == label
    denom = int(in_a.sum()) + int(in_b.sum())
    if denom == 0:
        warnings.warn(f"label {label} absent from both volumes; skipped", stacklevel=2)
        return float("nan")
    return 2.0 * int((in_a & in_b).sum()) / denom


def weighted_dice(reference: np.ndarray, moving: np.ndarray,
                  labels=None) -> float:
    """Count-weighted mean Dice; weights are reference-volume label counts.

    Labels absent from both volumes are skipped (with a warning); the
    remaining weights are renormalized to sum to one, so the result is a
    convex combination of the per-label scores.
    """
    reference = np.asarray(reference)
    moving = np.asarray(moving)
    if labels is None:
        labels = np.union1d(np.unique(reference), np.unique(moving))
        labels = [int(l) for l in labels if l != 0]
    scores, counts = [], []
    for label in labels:
        s = dice(reference, moving, label)
        if np.isnan(s):
            continue
        scores.append(s)
        counts.append(int((reference == label).sum()))
    if not scores:
        warnings.warn("no labels to score; weighted dice undefined", stacklevel=2)
        return float("nan")
    total = sum(counts)
    if total == 0:
        return float(np.mean(scores))
    return float(sum(w * s for w, s in zip(counts, scores)) / total)


# ---------------------------------------------------------------------------
# deformation statistics


def deformation_stats(fs: FieldSet, dims, n_frames: int, squarings: int = 6,
                      use_svf: bool = True) -> dict:
    """Mean ||u||, mean interior det J and folding ratio over all frames."""
    u_norms, dets, folds = [], [], []
    for t in frame_times(n_frames):
        fwd = dense_displacement(fs, dims, float(t), squarings, use_svf)
        u_norms.append(float(np.mean(np.linalg.norm(fwd.disp, axis=-1))))
        det = jacobian_det_grid(fwd)
        interior = det[1:-1, 1:-1, 1:-1] if min(dims) > 2 else det
        dets.append(float(np.mean(interior)))
        folds.append(folding_ratio(fwd))
    return {
        "u_norm": float(np.mean(u_norms)),
        "det_j": float(np.mean(dets)),
        "fold_ratio": float(np.mean(folds)),
    }


def motion_recovery_error(comp: DenseDeformation, gt_disp: np.ndarray,
                          dims, mask: np.ndarray | None = None) -> float:
    """Mean voxel-space error between a composed warp and ground truth."""
    scale = np.maximum(np.asarray(dims, np.float64) - 1.0, 1.0)
    err = (np.asarray(comp.disp) - np.asarray(gt_disp)) * scale
    norms = np.linalg.norm(err, axis=-1)
    if mask is not None:
        norms = norms[np.asarray(mask, bool)]
        if norms.size == 0:
            raise DataError("empty mask in motion-recovery scoring")
    return float(np.mean(norms))


# ---------------------------------------------------------------------------
# pairwise evaluation


def sample_pairs(n_frames: int, n_pairs: int, seed: int) -> list:
    """Ordered frame pairs (i, j), i != j, sampled without replacement."""
    if n_frames < 2:
        raise ConfigError("pairwise evaluation needs at least 2 frames")
    pool = [(i, j) for i in range(n_frames) for j in range(n_frames) if i != j]
    take = min(n_pairs, len(pool))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=take, replace=False)
    return [pool[int(p)] for p in picks]


def composed_pair_warp(fwd: dict, inv: dict, i: int, j: int) -> DenseDeformation:
    """Displacement mapping frame-j grid coordinates to frame-i points."""
    return compose(inv[i], fwd[j])


@dataclass
class EvalReport:
    config: dict
    per_pair: list
    summary: dict
    unaligned: dict
    runtime_s: float

    def to_dict(self):
        return {"config": self.config, "per_pair": self.per_pair,
                "summary": self.summary, "unaligned": self.unaligned,
                "runtime_s": self.runtime_s}


def _mean_sd(vals):
    arr = np.asarray([v for v in vals if v is not None], np.float64)
    if arr.size == 0:
        return None, None
    return float(arr.mean()), float(arr.std())


def evaluate_pairs(fs: FieldSet, vol: Volume4D,
                   labels: LabelVolume4D | None = None,
                   cfg: EvalConfig | None = None) -> EvalReport:
    """Score composed frame-to-frame warps on sampled ordered pairs."""
    cfg = cfg or EvalConfig()
    t0 = time.perf_counter()
    T = vol.n_frames
    dims = vol.spatial_dims
    pairs = sample_pairs(T, cfg.n_pairs, cfg.seed)
    times = frame_times(T)

    needed = sorted({k for p in pairs for k in p})
    fwd = {k: dense_displacement(fs, dims, float(times[k]), cfg.squarings, cfg.use_svf)
           for k in needed}
    inv = {k: dense_displacement(fs, dims, float(times[k]), cfg.squarings, cfg.use_svf,
                                 inverse=True)
           for k in needed}
    grid = dense_grid_coords(dims)
    label_ids = list(cfg.labels) if cfg.labels is not None else None

    per_pair = []
    for i, j in pairs:
        comp = composed_pair_warp(fwd, inv, i, j)
        pts = (grid + comp.disp).reshape(-1, 3)
        warped = trilinear_sample(vol.frame(i), pts).reshape(dims)
        rec = {
            "i": i,
            "j": j,
            "lncc": lncc(warped, vol.frame(j), cfg.window),
            "lncc_unaligned": lncc(vol.frame(i), vol.frame(j), cfg.window),
            "wdice": None,
            "wdice_unaligned": None,
        }
        if labels is not None:
            lab_i = labels.frame(i)
            lab_j = labels.frame(j)
            warped_lab = nearest_sample(lab_i, pts).reshape(dims)
            rec["wdice"] = weighted_dice(lab_j, warped_lab, label_ids)
            rec["wdice_unaligned"] = weighted_dice(lab_j, lab_i, label_ids)
        per_pair.append(rec)

    lncc_mean, lncc_sd = _mean_sd([r["lncc"] for r in per_pair])
    wdice_mean, wdice_sd = _mean_sd([r["wdice"] for r in per_pair])
    un_lncc, _ = _mean_sd([r["lncc_unaligned"] for r in per_pair])
    un_wdice, _ = _mean_sd([r["wdice_unaligned"] for r in per_pair])
    stats = deformation_stats(fs, dims, T, cfg.squarings, cfg.use_svf)
    summary = {
        "lncc_mean": lncc_mean,
        "lncc_sd": lncc_sd,
        "wdice_mean": wdice_mean,
        "wdice_sd": wdice_sd,
        "u_norm": stats["u_norm"],
        "det_j": stats["det_j"],
        "fold_ratio": stats["fold_ratio"],
    }
    unaligned = {"lncc_mean": un_lncc, "wdice_mean": un_wdice}
    return EvalReport(cfg.to_dict(), per_pair, summary, unaligned,
                      time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# report i/o


REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "per_pair", "summary", "unaligned", "runtime_s"],
    "properties": {
        "config": {
            "type": "object",
            "required": ["n_pairs", "window", "seed", "labels", "squarings", "use_svf"],
        },
        "per_pair": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["i", "j", "lncc", "lncc_unaligned", "wdice",
                             "wdice_unaligned"],
                "properties": {
                    "i": {"type": "integer", "minimum": 0},
                    "j": {"type": "integer", "minimum": 0},
                    "lncc": {"type": "number", "minimum": -1.0, "maximum": 1.0},
                    "lncc_unaligned": {"type": "number", "minimum": -1.0, "maximum": 1.0},
                    "wdice": {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0},
                    "wdice_unaligned": {"type": ["number", "null"],
                                        "minimum": 0.0, "maximum": 1.0},
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["lncc_mean", "lncc_sd", "wdice_mean", "wdice_sd",
                         "u_norm", "det_j", "fold_ratio"],
            "properties": {
                "lncc_mean": {"type": "number", "minimum": -1.0, "maximum": 1.0},
                "lncc_sd": {"type": "number", "minimum": 0.0},
                "wdice_mean": {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0},
                "wdice_sd": {"type": ["number", "null"], "minimum": 0.0},
                "u_norm": {"type": "number", "minimum": 0.0},
                "det_j": {"type": "number"},
                "fold_ratio": {"type": "number", "minimum": 0.0, "maximum": 1.0},
            },
        },
        "unaligned": {
            "type": "object",
            "required": ["lncc_mean", "wdice_mean"],
        },
        "runtime_s": {"type": "number", "minimum": 0.0},
    },
}


def _check_schema(value, schema, path="report"):
    types = {"object": dict, "array": list, "number": (int, float),
             "integer": int, "null": type(None), "string": str,
             "boolean": bool}
    allowed = schema.get("type")
    if allowed is not None:
        names = allowed if isinstance(allowed, list) else [allowed]
        pytypes = tuple(t for name in names for t in np.atleast_1d(types[name]))
        if not isinstance(value, pytypes) or (isinstance(value, bool) and "boolean" not in names):
            raise DataError(f"{path}: expected {allowed}, got {type(value).__name__}")
    if isinstance(value, dict):
        for key in schema.get("required", []):
            if key not in value:
                raise DataError(f"{path}: missing key {key!r}")
        for key, sub in schema.get("properties", {}).items():
            if key in value:
                _check_schema(value[key], sub, f"{path}.{key}")
    if isinstance(value, list):
        if "minItems" in schema and len(value) < schema["minItems"]:
            raise DataError(f"{path}: fewer than {schema['minItems']} items")
        item_schema = schema.get("items")
        if item_schema:
            for n, item in enumerate(value):
                _check_schema(item, item_schema, f"{path}[{n}]")
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if "minimum" in schema and value < schema["minimum"] - 1e-12:
            raise DataError(f"{path}: {value} below minimum {schema['minimum']}")
        if "maximum" in schema and value > schema["maximum"] + 1e-12:
            raise DataError(f"{path}: {value} above maximum {schema['maximum']}")


def validate_report(d: dict) -> None:
    """Raise DataError unless d matches the report schema."""
    _check_schema(d, REPORT_SCHEMA)


def write_report(report: EvalReport | dict, path) -> None:
    d = report.to_dict() if isinstance(report, EvalReport) else report
    validate_report(d)
    path = Path(path)
    if not path.parent.exists():
        raise DataError(f"output directory {path.parent} does not exist")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")
