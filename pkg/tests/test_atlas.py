import numpy as np
import pytest

from natlas.atlas import (apply_deformation, dense_displacement,
                          dense_velocity, export_atlas, infer_atlas,
                          warp_atlas_to_image, warp_image_to_atlas)
from natlas.deformation import DenseDeformation, compose
from natlas.errors import ConfigError
from natlas.fields import FieldSet
from natlas.volume import load_volume

from conftest import small_field_config, warm_fields

DIMS = (10, 10, 10)


@pytest.fixture()
def warm_fs(rng):
    fs = FieldSet.create(small_field_config(), seed=4)
    warm_fields(fs, rng)
    # rescale the (linear) velocity head so flows stay well inside the domain
    v = dense_velocity(fs, DIMS, 0.5)
    peak = np.linalg.norm(v, axis=-1).max()
    if peak > 0.04:
        for key in ("psi_r.w1", "psi_r.b1"):
            fs.params()[key] *= 0.04 / peak
    return fs


def test_dense_velocity_zero_at_init():
    fs = FieldSet.create(small_field_config(), seed=0)
    assert np.all(dense_velocity(fs, DIMS, 0.0) == 0.0)
    d = dense_displacement(fs, DIMS, 0.0)
    assert np.all(d.disp == 0.0)


def test_dense_velocity_chunking(warm_fs):
    full = dense_velocity(warm_fs, DIMS, 0.3, chunk=100000)
    split = dense_velocity(warm_fs, DIMS, 0.3, chunk=37)
    # chunked matmuls may take different BLAS paths; equal to f64 roundoff
    np.testing.assert_allclose(split, full, atol=1e-13)
    assert full.shape == DIMS + (3,)


def test_dense_displacement_directions(warm_fs):
    fwd = dense_displacement(warm_fs, DIMS, 0.5)
    inv = dense_displacement(warm_fs, DIMS, 0.5, inverse=True)
    assert fwd.direction == "forward" and inv.direction == "inverse"
    resid = compose(fwd, inv).disp
    err = np.linalg.norm(resid, axis=-1)[2:-2, 2:-2, 2:-2]
    assert err.max() < 0.5 / 9.0


def test_dense_displacement_direct_mode(warm_fs):
    d = dense_displacement(warm_fs, DIMS, 0.5, use_svf=False)
    np.testing.assert_array_equal(d.disp, dense_velocity(warm_fs, DIMS, 0.5))
    inv = dense_displacement(warm_fs, DIMS, 0.5, use_svf=False, inverse=True)
    assert inv.direction == "inverse"
    resid = compose(d, inv).disp
    err = np.linalg.norm(resid, axis=-1)[2:-2, 2:-2, 2:-2]
    assert err.max() < 0.5 / 9.0


def test_infer_atlas_shape_range_chunking(warm_fs):
    a = infer_atlas(warm_fs, DIMS, n_frames=3)
    assert a.shape == DIMS and a.dtype == np.float32
    assert np.all((a > 0.0) & (a < 1.0))
    np.testing.assert_allclose(infer_atlas(warm_fs, DIMS, 3, chunk=41), a,
                               atol=1e-6)
    assert infer_atlas(warm_fs, DIMS, n_frames=1).shape == DIMS
    with pytest.raises(ConfigError):
        infer_atlas(warm_fs, DIMS, n_frames=0)


def test_infer_atlas_averages_intensity_latents(warm_fs):
    from natlas.fields import decode, intensity_features, static_features
    a = infer_atlas(warm_fs, (4, 4, 4), n_frames=2)
    from natlas.deformation import dense_grid_coords
    pts = dense_grid_coords((4, 4, 4)).reshape(-1, 3)
    z = static_features(warm_fs, pts)
    z = z + (intensity_features(warm_fs, pts, np.zeros(len(pts)))
             + intensity_features(warm_fs, pts, np.ones(len(pts)))) / 2
    np.testing.assert_allclose(a.ravel(), decode(warm_fs, z), atol=1e-6)


def test_apply_deformation_identity(rng):
    vals = rng.uniform(0, 1, (5, 6, 7))
    out = apply_deformation(vals, DenseDeformation(np.zeros((5, 6, 7, 3))))
    np.testing.assert_allclose(out, vals, atol=1e-12)


def test_apply_deformation_unit_shift(rng):
    vals = rng.uniform(0, 1, (5, 6, 7))
    disp = np.zeros((5, 6, 7, 3))
    disp[..., 0] = 1.0 / 4.0  # exactly one voxel along x
    out = apply_deformation(vals, DenseDeformation(disp))
    expected = np.concatenate([vals[1:], vals[-1:]], axis=0)  # clamped at the face
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_apply_deformation_rejects_non_3d():
    with pytest.raises(ConfigError):
        apply_deformation(np.zeros((4, 4)), DenseDeformation(np.zeros((4, 4, 4, 3))))


def test_warp_direction_guards():
    fwd = DenseDeformation(np.zeros((4, 4, 4, 3)), "forward")
    inv = DenseDeformation(np.zeros((4, 4, 4, 3)), "inverse")
    img = np.zeros((4, 4, 4))
    with pytest.raises(ConfigError):
        warp_image_to_atlas(img, fwd)
    with pytest.raises(ConfigError):
        warp_atlas_to_image(img, inv)
    assert warp_image_to_atlas(img, inv).shape == (4, 4, 4)
    assert warp_atlas_to_image(img, fwd).shape == (4, 4, 4)


def test_export_atlas_files(tmp_path, rng):
    atlas = rng.uniform(0, 1, (8, 9, 10)).astype(np.float32)
    paths = export_atlas(atlas, tmp_path / "out", spacing=(1.0, 2.0, 3.0))
    assert set(paths) == {"volume", "xy", "xz", "yz"}
    vol = load_volume(paths["volume"])
    np.testing.assert_array_equal(vol.data[..., 0], atlas)
    np.testing.assert_allclose(vol.spacing, [1.0, 2.0, 3.0])
    for key in ("xy", "xz", "yz"):
        head = paths[key].read_bytes()[:2]
        assert head == b"P5"
    with pytest.raises(ConfigError):
        export_atlas(np.zeros((4, 4)), tmp_path)
