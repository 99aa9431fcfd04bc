import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from natlas.encoding import (HASH_PRIMES, EncodeCache, HashGrid, HashGridConfig,
                             encode, encode_bwd, encode_fwd, hash_index,
                             level_resolution)
from natlas.errors import ConfigError

from conftest import rel_err


def make_grid(seed=0, dtype=np.float64, **kw):
    cfg = HashGridConfig(**kw)
    return HashGrid.create(cfg, np.random.default_rng(seed), dtype=dtype)


def reference_encode(grid: HashGrid, pts: np.ndarray) -> np.ndarray:
    """Independent per-point reimplementation of the multilevel lookup."""
    cfg = grid.cfg
    d = cfg.input_dim
    out = np.zeros((len(pts), cfg.levels * cfg.features_per_level))
    for n, p in enumerate(np.clip(pts, 0.0, 1.0)):
        for lv in range(cfg.levels):
            res = level_resolution(cfg, lv)
            s = p * res
            cell = np.minimum(np.floor(s), res - 1).astype(int)
            cell = np.maximum(cell, 0)
            f = s - cell
            dense = (res + 1) ** d <= cfg.table_size
            acc = np.zeros(cfg.features_per_level)
            for c in range(2 ** d):
                bits = [(c >> j) & 1 for j in range(d)]
                corner = cell + np.array(bits)
                w = np.prod([f[j] if bits[j] else 1.0 - f[j] for j in range(d)])
                if dense:
                    strides = [(res + 1) ** j for j in range(d)]
                    slot = int(np.dot(corner, strides))
                else:
                    slot = 0
                    for j in range(d):
                        slot ^= (int(corner[j]) * HASH_PRIMES[j]) & 0xFFFFFFFF
                    slot &= cfg.table_size - 1
                acc = acc + w * grid.table[lv, slot]
            out[n, lv * cfg.features_per_level:(lv + 1) * cfg.features_per_level] = acc
    return out


def test_level_resolutions_default():
    cfg = HashGridConfig()
    assert [level_resolution(cfg, lv) for lv in range(8)] == [4, 6, 9, 13, 20, 30, 45, 68]
    with pytest.raises(ConfigError):
        level_resolution(cfg, 8)


def test_hash_index_frozen_values():
    cells = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                      [5, 7, 11], [100, 200, 300]])
    assert hash_index(cells, 15).tolist() == [0, 1, 31153, 22421, 4277, 12464]
    cells4 = np.array([[0, 0, 0, 0], [1, 2, 3, 4], [9, 8, 7, 6]])
    assert hash_index(cells4, 10).tolist() == [0, 520, 300]


def test_hash_x_passthrough():
    # first prime is 1, so x alone indexes small tables directly
    cells = np.stack([np.arange(16), np.zeros(16, int), np.zeros(16, int)], axis=1)
    assert hash_index(cells, 10).tolist() == list(range(16))


def test_config_validation():
    with pytest.raises(ConfigError) as e:
        HashGridConfig(levels=0, growth_factor=0.5, input_dim=2)
    assert len(e.value.errors) == 3


def test_dense_levels_are_collision_free():
    g = make_grid(levels=3, table_size_log2=10, base_resolution=4, input_dim=3)
    for lv in range(3):
        res = level_resolution(g.cfg, lv)
        assert (res + 1) ** 3 <= g.cfg.table_size
        cells = np.stack(np.meshgrid(*[np.arange(res)] * 3, indexing="ij"),
                         axis=-1).reshape(-1, 3)
        pts = (cells + 0.5) / res
        _, cache = encode_fwd(g, pts)
        # vertex -> slot must be a bijection onto the (res+1)^3 dense block
        seen = {}
        for c in range(8):
            bits = np.array([(c >> j) & 1 for j in range(3)])
            slots = cache.flat[c, :, lv] - lv * g.cfg.table_size
            for vert, slot in zip(map(tuple, cells + bits), slots):
                assert seen.setdefault(vert, slot) == slot
        assert len(set(seen.values())) == (res + 1) ** 3


def test_encode_matches_reference(rng):
    for d in (3, 4):
        g = make_grid(seed=d, levels=4, table_size_log2=8, input_dim=d)
        pts = rng.uniform(-0.1, 1.1, (40, d))
        np.testing.assert_allclose(encode(g, pts), reference_encode(g, pts),
                                   rtol=1e-10, atol=1e-12)


def test_encode_exact_at_vertices():
    g = make_grid(levels=1, table_size_log2=12, base_resolution=4, input_dim=3)
    # at a lattice vertex the blend is one-hot on that vertex's features
    vert = np.array([[0.25, 0.5, 0.75]])  # cell coords (1, 2, 3) at res 4
    feats = encode(g, vert)
    slot = 1 * 1 + 2 * 5 + 3 * 25  # dense strides (1, 5, 25) at res 4
    np.testing.assert_allclose(feats[0], g.table[0, slot], atol=1e-12)


def test_encode_linear_along_edge():
    g = make_grid(levels=2, input_dim=3)
    a = np.array([0.1, 0.2, 0.3])
    b = a + np.array([0.02, 0.0, 0.0])  # stays inside one cell at both levels
    mid = (a + b) / 2
    fa, fb, fm = encode(g, np.stack([a, b, mid]))
    np.testing.assert_allclose(fm, (fa + fb) / 2, atol=1e-12)


def test_encode_clamps_outside_points():
    g = make_grid(input_dim=3)
    out = encode(g, np.array([[-0.3, 0.5, 1.7]]))
    ref = encode(g, np.array([[0.0, 0.5, 1.0]]))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_encode_rejects_bad_shape():
    g = make_grid(input_dim=3)
    with pytest.raises(ConfigError):
        encode(g, np.zeros((5, 4)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_hash_stays_in_table(seed):
    r = np.random.default_rng(seed)
    cells = r.integers(0, 10000, (8, 4))
    idx = hash_index(cells, 9)
    assert np.all(idx >= 0) and np.all(idx < 512)


def test_table_gradient_fd(rng):
    for d in (3, 4):
        g = make_grid(seed=10 + d, levels=3, table_size_log2=8, input_dim=d)
        g.table += rng.normal(0, 0.3, g.table.shape)
        pts = rng.uniform(0, 1, (12, d))
        up = rng.standard_normal((12, g.cfg.output_dim))
        feats, cache = encode_fwd(g, pts)
        tg, _ = encode_bwd(g, cache, up)

        def loss():
            return float(np.sum(encode(g, pts) * up))

        flat = g.table.reshape(-1)
        gflat = tg.reshape(-1)
        idxs = np.flatnonzero(np.abs(gflat) > 1e-12)[:20]
        h = 1e-6
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            flat[i] = old - h
            fm = loss()
            flat[i] = old
            assert rel_err((fp - fm) / (2 * h), gflat[i]) < 1e-6


def test_coord_gradient_fd(rng):
    for d in (3, 4):
        g = make_grid(seed=20 + d, levels=3, table_size_log2=8, input_dim=d)
        g.table += rng.normal(0, 0.3, g.table.shape)
        pts = rng.uniform(0.05, 0.95, (10, d))
        up = rng.standard_normal((10, g.cfg.output_dim))
        _, cache = encode_fwd(g, pts)
        _, dpts = encode_bwd(g, cache, up)
        h = 1e-7
        for n in range(5):
            for j in range(d):
                p = pts.copy()
                p[n, j] += h
                fp = float(np.sum(encode(g, p) * up))
                p[n, j] -= 2 * h
                fm = float(np.sum(encode(g, p) * up))
                fd = (fp - fm) / (2 * h)
                # skip probes that straddle a cell boundary (kink in the blend)
                cell_hi = np.floor((pts[n, j] + h) * g._res_i)
                cell_lo = np.floor((pts[n, j] - h) * g._res_i)
                if np.any(cell_hi != cell_lo):
                    continue
                assert rel_err(fd, dpts[n, j]) < 1e-5


def test_coord_gradient_zero_when_clamped():
    g = make_grid(input_dim=3)
    pts = np.array([[-0.2, 0.5, 0.5], [0.5, 0.5, 1.4]])
    _, cache = encode_fwd(g, pts)
    _, dpts = encode_bwd(g, cache, np.ones((2, g.cfg.output_dim)))
    assert dpts[0, 0] == 0.0
    assert dpts[1, 2] == 0.0
    assert dpts[0, 1] != 0.0


def test_bwd_accumulates_into_given_buffer(rng):
    g = make_grid(levels=2, table_size_log2=8, input_dim=3)
    pts = rng.uniform(0, 1, (6, 3))
    up = rng.standard_normal((6, g.cfg.output_dim))
    _, cache = encode_fwd(g, pts)
    buf = np.full_like(g.table, 0.5)
    out, _ = encode_bwd(g, cache, up, table_grad=buf)
    assert out is buf
    fresh, _ = encode_bwd(g, cache, up)
    np.testing.assert_allclose(buf - 0.5, fresh, atol=1e-12)


def test_cache_shapes(rng):
    g = make_grid(levels=3, input_dim=4, dtype=np.float32)
    pts = rng.uniform(0, 1, (7, 4)).astype(np.float32)
    feats, cache = encode_fwd(g, pts)
    assert isinstance(cache, EncodeCache)
    assert feats.shape == (7, g.cfg.output_dim)
    assert feats.dtype == np.float32
    assert cache.flat.shape == (16, 7, 3)
    assert cache.weights.shape == (16, 7, 3)
    assert cache.frac.shape == (4, 7, 3)
    assert cache.inside.shape == (7, 4)
    assert cache.gathered.shape == (16, 7, 3, 2)
    # blend weights form a partition of unity
    np.testing.assert_allclose(cache.weights.sum(axis=0), 1.0, atol=1e-6)
