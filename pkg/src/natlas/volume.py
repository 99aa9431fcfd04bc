"""Volume containers, normalized coordinates, trilinear sampling and file I/O.

Conventions used throughout the package:

* A 4D volume is stored as a float32 array indexed ``[x, y, z, t]`` with
  intensities in ``[0, 1]``.
* Normalized world coordinates map voxel ``i`` on an axis of length ``n`` to
  ``i / (n - 1)`` (a single-voxel axis maps to 0), so the voxel grid spans
  the unit cube and ``t`` spans ``[0, 1]``.
* Sampling outside the unit cube clamps to the border.

The canonical on-disk container is a small raw format (magic ``NATL``,
64-byte header, little-endian payload written x-fastest).  A minimal
NIfTI-1 reader (uncompressed single-file, scalar dtypes) is provided as a
convenience for real data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError

RAW_MAGIC = b"NATL"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sI4I3fB27x")  # magic, version, dims, spacing, dtype
assert _RAW_HEADER.size == 64

_DTYPE_F32 = 0
_DTYPE_U8 = 1


def _validate_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or any(d < 1 for d in dims):
        raise DataError(f"dims must be 4 positive integers, got {dims}")
    return dims


@dataclass
class Volume4D:
    """Spatiotemporal intensity grid, intensities normalized to [0, 1]."""

    data: np.ndarray  # (X, Y, Z, T) float32 in [0, 1]
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3, np.float32))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        _validate_dims(self.data.shape)
        if not np.all(np.isfinite(self.data)):
            raise DataError("volume contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise DataError("volume intensities must lie in [0, 1]")
        self.spacing = np.asarray(self.spacing, dtype=np.float32).reshape(3)

    @property
    def dims(self):
        return self.data.shape

    @property
    def spatial_dims(self):
        return self.data.shape[:3]

    @property
    def n_frames(self):
        return self.data.shape[3]

    def frame(self, t: int) -> np.ndarray:
        return self.data[..., t]


@dataclass
class LabelVolume4D:
    """Small-integer label grid; 0 is background, 1..L are regions."""

    data: np.ndarray  # (X, Y, Z, T) uint8
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3, np.float32))

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[..., None]
        if not np.issubdtype(arr.dtype, np.integer):
            raise DataError("label volume requires an integer dtype")
        if arr.min() < 0 or arr.max() > 255:
            raise DataError("labels must lie in 0..255")
        self.data = arr.astype(np.uint8)
        _validate_dims(self.data.shape)
        self.spacing = np.asarray(self.spacing, dtype=np.float32).reshape(3)

    @property
    def dims(self):
        return self.data.shape

    @property
    def labels(self):
        """Sorted nonzero labels present in the volume."""
        present = np.unique(self.data)
        return [int(v) for v in present if v != 0]

    def frame(self, t: int) -> np.ndarray:
        return self.data[..., t]


# ---------------------------------------------------------------------------
# normalized coordinates


def axis_coords(n: int, dtype=np.float64) -> np.ndarray:
    """Normalized coordinates of the voxel centers along an axis of length n."""
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return np.arange(n, dtype=dtype) / (n - 1)


def grid_coords(spatial_dims, dtype=np.float64) -> np.ndarray:
    """(X*Y*Z, 3) array of normalized voxel-center coordinates, x fastest."""
    X, Y, Z = spatial_dims
    ax = [axis_coords(n, dtype) for n in (X, Y, Z)]
    gz, gy, gx = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return np.ascontiguousarray(pts)


def voxel_to_world(idx, dims) -> np.ndarray:
    """Map integer voxel indices to normalized coordinates (per axis)."""
    idx = np.asarray(idx, dtype=np.float64)
    scale = np.maximum(np.asarray(dims, dtype=np.float64) - 1.0, 1.0)
    return idx / scale


def world_to_voxel(pts, dims) -> np.ndarray:
    """Map normalized coordinates to fractional voxel indices (per axis)."""
    pts = np.asarray(pts, dtype=np.float64)
    scale = np.maximum(np.asarray(dims, dtype=np.float64) - 1.0, 1.0)
    return pts * scale


def frame_times(n_frames: int, dtype=np.float64) -> np.ndarray:
    """Normalized time of each frame; a single frame sits at t=0."""
    return axis_coords(n_frames, dtype)


# ---------------------------------------------------------------------------
# trilinear sampling


def trilinear_sample(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample a 3D scalar grid at normalized points with border clamp.

    vol: (X, Y, Z) array.  pts: (..., 3) normalized coordinates; values
    outside [0, 1]^3 are clamped.  Exact at voxel centers, linear along
    each axis in between.
    """
    vol = np.asarray(vol)
    pts = np.asarray(pts, dtype=np.float64)
    dims = np.asarray(vol.shape, dtype=np.float64)
    g = np.clip(pts, 0.0, 1.0) * np.maximum(dims - 1.0, 0.0)
    lo = np.floor(g).astype(np.int64)
    lo = np.minimum(lo, np.maximum(vol.shape, 1) - np.array([2, 2, 2]))
    lo = np.maximum(lo, 0)
    f = g - lo

    def at(dx, dy, dz):
        ix = np.clip(lo[..., 0] + dx, 0, vol.shape[0] - 1)
        iy = np.clip(lo[..., 1] + dy, 0, vol.shape[1] - 1)
        iz = np.clip(lo[..., 2] + dz, 0, vol.shape[2] - 1)
        return vol[ix, iy, iz]

    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    c00 = at(0, 0, 0) * (1 - fx) + at(1, 0, 0) * fx
    c10 = at(0, 1, 0) * (1 - fx) + at(1, 1, 0) * fx
    c01 = at(0, 0, 1) * (1 - fx) + at(1, 0, 1) * fx
    c11 = at(0, 1, 1) * (1 - fx) + at(1, 1, 1) * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def nearest_sample(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Nearest-neighbor sampling of a 3D grid at normalized points."""
    vol = np.asarray(vol)
    pts = np.asarray(pts, dtype=np.float64)
    dims = np.asarray(vol.shape, dtype=np.float64)
    g = np.clip(pts, 0.0, 1.0) * np.maximum(dims - 1.0, 0.0)
    idx = np.rint(g).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(vol.shape) - 1)
    return vol[idx[..., 0], idx[..., 1], idx[..., 2]]


def sample_volume(vol: Volume4D, pts: np.ndarray, t: int) -> np.ndarray:
    """Trilinear sample of frame t at normalized spatial points."""
    return trilinear_sample(vol.frame(t), pts)


# ---------------------------------------------------------------------------
# raw container


def _to_xfastest_bytes(arr: np.ndarray) -> bytes:
    # payload order: x fastest, then y, z, t
    return np.ascontiguousarray(arr.transpose(3, 2, 1, 0)).tobytes()


def _from_xfastest(buf: bytes, dims, dtype) -> np.ndarray:
    X, Y, Z, T = dims
    arr = np.frombuffer(buf, dtype=dtype).reshape(T, Z, Y, X)
    return np.ascontiguousarray(arr.transpose(3, 2, 1, 0))


def save_array_raw(arr: np.ndarray, spacing, path, dtype_code: int = _DTYPE_F32) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[..., None]
    dims = _validate_dims(arr.shape)
    np_dtype = np.float32 if dtype_code == _DTYPE_F32 else np.uint8
    header = _RAW_HEADER.pack(
        RAW_MAGIC, RAW_VERSION, *dims, *np.asarray(spacing, np.float32), dtype_code
    )
    payload = _to_xfastest_bytes(arr.astype(np_dtype))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _read_raw(path):
    with open(path, "rb") as fh:
        head = fh.read(_RAW_HEADER.size)
        if len(head) < _RAW_HEADER.size:
            raise FormatError(f"{path}: raw header truncated")
        magic, version, x, y, z, t, sx, sy, sz, dtype_code = _RAW_HEADER.unpack(head)
        if magic != RAW_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
        if version != RAW_VERSION:
            raise FormatError(f"{path}: unsupported raw version {version}")
        if dtype_code not in (_DTYPE_F32, _DTYPE_U8):
            raise FormatError(f"{path}: unknown dtype code {dtype_code}")
        dims = _validate_dims((x, y, z, t))
        np_dtype = np.dtype("<f4") if dtype_code == _DTYPE_F32 else np.dtype("u1")
        expected = int(np.prod(dims)) * np_dtype.itemsize
        payload = fh.read(expected)
        if len(payload) != expected:
            raise FormatError(f"{path}: payload truncated ({len(payload)}/{expected} bytes)")
    data = _from_xfastest(payload, dims, np_dtype)
    return data, np.array([sx, sy, sz], np.float32), dtype_code


def save_volume(vol: Volume4D, path, fmt: str = "raw") -> None:
    """Write a volume; only the raw container supports writing."""
    if fmt != "raw":
        raise FormatError(f"writing format {fmt!r} is not supported (raw only)")
    if not str(path):
        raise FormatError("empty output path")
    save_array_raw(vol.data, vol.spacing, path, _DTYPE_F32)


def save_label_volume(labels: LabelVolume4D, path) -> None:
    save_array_raw(labels.data, labels.spacing, path, _DTYPE_U8)


def _normalize_intensities(data: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a zero-range volume maps to all zeros."""
    data = data.astype(np.float32)
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0.0:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def load_volume(path, fmt: str | None = None) -> Volume4D:
    """Load an intensity volume from a raw or NIfTI-1 file.

    Intensities are min-max normalized to [0, 1].  Raw payloads already
    inside [0, 1] are kept verbatim so that save/load round-trips exactly.
    """
    if fmt is None:
        fmt = sniff_format(path)
    if fmt == "raw":
        data, spacing, dtype_code = _read_raw(path)
        if dtype_code != _DTYPE_F32:
            raise FormatError(f"{path}: expected intensity volume, found label dtype")
        if not np.all(np.isfinite(data)):
            raise DataError(f"{path}: non-finite intensity values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            data = _normalize_intensities(data)
        return Volume4D(data, spacing)
    if fmt == "nifti1":
        data, spacing = _read_nifti1(path)
        if not np.all(np.isfinite(data)):
            raise DataError(f"{path}: non-finite intensity values")
        return Volume4D(_normalize_intensities(data), spacing)
    raise FormatError(f"unknown volume format {fmt!r}")


def load_label_volume(path) -> LabelVolume4D:
    data, spacing, dtype_code = _read_raw(path)
    if dtype_code != _DTYPE_U8:
        raise FormatError(f"{path}: expected label volume, found intensity dtype")
    return LabelVolume4D(data, spacing)


def sniff_format(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(348)
    if head[:4] == RAW_MAGIC:
        return "raw"
    if len(head) >= 348 and head[344:347] == b"n+1":
        return "nifti1"
    raise FormatError(f"{path}: unrecognized file format")


# ---------------------------------------------------------------------------
# NIfTI-1 (read-only subset: single uncompressed .nii, little-endian, scalar)

_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 8: np.dtype("<i4"),
                 16: np.dtype("<f4"), 64: np.dtype("<f8"), 256: np.dtype("i1"),
                 512: np.dtype("<u2")}


def _read_nifti1(path):
    with open(path, "rb") as fh:
        hdr = fh.read(348)
        if len(hdr) < 348:
            raise FormatError(f"{path}: NIfTI header truncated")
        sizeof_hdr = struct.unpack_from("<i", hdr, 0)[0]
        if sizeof_hdr != 348:
            raise FormatError(f"{path}: not a little-endian NIfTI-1 file")
        if hdr[344:347] != b"n+1":
            raise FormatError(f"{path}: magic is not 'n+1' (detached .hdr/.img unsupported)")
        dim = struct.unpack_from("<8h", hdr, 40)
        ndim = dim[0]
        if ndim not in (3, 4):
            raise FormatError(f"{path}: unsupported NIfTI dimensionality {ndim}")
        dims = (dim[1], dim[2], dim[3], dim[4] if ndim == 4 and dim[4] > 0 else 1)
        datatype = struct.unpack_from("<h", hdr, 70)[0]
        if datatype not in _NIFTI_DTYPES:
            raise FormatError(f"{path}: unsupported NIfTI datatype {datatype}")
        pixdim = struct.unpack_from("<8f", hdr, 76)
        vox_offset = int(struct.unpack_from("<f", hdr, 108)[0])
        scl_slope = struct.unpack_from("<f", hdr, 112)[0]
        scl_inter = struct.unpack_from("<f", hdr, 116)[0]
        fh.seek(vox_offset)
        np_dtype = _NIFTI_DTYPES[datatype]
        expected = int(np.prod(dims)) * np_dtype.itemsize
        payload = fh.read(expected)
        if len(payload) != expected:
            raise FormatError(f"{path}: NIfTI payload truncated")
    data = _from_xfastest(payload, dims, np_dtype).astype(np.float32)
    if scl_slope not in (0.0, 1.0):
        data = data * scl_slope + scl_inter
    spacing = np.array(pixdim[1:4], np.float32)
    if not np.all(spacing > 0):
        spacing = np.ones(3, np.float32)
    return data, spacing


# ---------------------------------------------------------------------------
# PGM slices (quick visual inspection)


def write_pgm(img: np.ndarray, path) -> None:
    """Write a 2D [0,1] image as binary PGM (P5, maxval 255)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise DataError("PGM export expects a 2D image")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())
