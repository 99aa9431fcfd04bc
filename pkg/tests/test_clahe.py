import numpy as np
import pytest

from natlas.clahe import ClaheConfig, clahe, equalize_frame, _clip_histogram, _tile_grid
from natlas.errors import ConfigError
from natlas.volume import Volume4D


def test_config_validation():
    with pytest.raises(ConfigError) as e:
        ClaheConfig(clip_limit=-1, tiles=(0, 2, 2))
    assert len(e.value.errors) == 2
    ClaheConfig()  # defaults valid


def test_tile_grid_minimum_size():
    # tiles shrink so each keeps at least 4 voxels
    assert _tile_grid((32, 32, 32), (8, 8, 8)) == (8, 8, 8)
    assert _tile_grid((12, 12, 12), (8, 8, 8)) == (3, 3, 3)
    assert _tile_grid((3, 12, 40), (8, 8, 8)) == (1, 3, 8)


def test_clip_histogram_conserves_mass():
    hist = np.zeros(256)
    hist[10] = 1000.0
    hist[20] = 24.0
    clipped = _clip_histogram(hist, 2.0)
    assert clipped.sum() == pytest.approx(1024.0, rel=1e-6)
    limit = 2.0 * 1024.0 / 256
    assert clipped.max() <= limit * 1.01


def test_constant_volume_unchanged():
    vol = Volume4D(np.full((16, 16, 16, 2), 0.4, np.float32))
    out = clahe(vol)
    np.testing.assert_array_equal(out.data, vol.data)


def test_output_range_and_shape(rng):
    vol = Volume4D(rng.uniform(0, 1, (16, 14, 12, 2)).astype(np.float32))
    out = clahe(vol, clip_limit=3.0, tiles=(2, 2, 2))
    assert out.dims == vol.dims
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_contrast_expansion():
    # intensities squeezed into [0.45, 0.55] should spread out
    rng = np.random.default_rng(3)
    frame = (0.45 + 0.1 * rng.uniform(0, 1, (16, 16, 16))).astype(np.float64)
    out = equalize_frame(frame, clip_limit=4.0, tiles=(2, 2, 2))
    assert out.std() > 1.5 * frame.std()


def test_monotone_within_tile():
    # a single tile applies one global mapping, which must be monotone
    rng = np.random.default_rng(4)
    frame = rng.uniform(0, 1, (8, 8, 8))
    out = equalize_frame(frame, clip_limit=10.0, tiles=(1, 1, 1))
    a = frame.ravel()
    b = out.ravel()
    order = np.argsort(a)
    assert np.all(np.diff(b[order]) >= -1e-12)


def test_determinism(rng):
    vol = Volume4D(rng.uniform(0, 1, (12, 12, 12, 1)).astype(np.float32))
    a = clahe(vol, 2.0, (2, 2, 2)).data
    b = clahe(vol, 2.0, (2, 2, 2)).data
    np.testing.assert_array_equal(a, b)


def test_invalid_clip_limit():
    vol = Volume4D(np.zeros((8, 8, 8, 1), np.float32))
    with pytest.raises(ConfigError):
        clahe(vol, clip_limit=0.0)
