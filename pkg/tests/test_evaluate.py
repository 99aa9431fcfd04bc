import json

import jsonschema
import numpy as np
import pytest

from natlas.deformation import DenseDeformation, identity_deformation
from natlas.errors import ConfigError, DataError
from natlas.evaluate import (REPORT_SCHEMA, EvalConfig, composed_pair_warp,
                             deformation_stats, dice, evaluate_pairs, lncc,
                             motion_recovery_error, sample_pairs,
                             validate_report, weighted_dice, write_report)
from natlas.fields import FieldSet

from conftest import small_field_config


def lncc_reference(a, b, window, eps=1e-8):
    """Direct per-voxel windowed Pearson correlation."""
    r = window // 2
    ccs = []
    X, Y, Z = a.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                sl = (slice(max(x - r, 0), x + r + 1),
                      slice(max(y - r, 0), y + r + 1),
                      slice(max(z - r, 0), z + r + 1))
                wa, wb = a[sl].ravel(), b[sl].ravel()
                ma, mb = wa.mean(), wb.mean()
                va = (wa * wa).mean() - ma * ma
                vb = (wb * wb).mean() - mb * mb
                if va > eps and vb > eps:
                    cov = (wa * wb).mean() - ma * mb
                    ccs.append(cov / np.sqrt(va * vb))
    if not ccs:
        return 0.0
    return float(np.clip(np.mean(ccs), -1.0, 1.0))


def test_lncc_matches_bruteforce(rng):
    for dims, window in (((9, 9, 9), 7), ((5, 6, 7), 3), ((8, 5, 9), 5)):
        a = rng.uniform(0, 1, dims)
        b = 0.5 * a + 0.3 * rng.uniform(0, 1, dims)
        assert abs(lncc(a, b, window) - lncc_reference(a, b, window)) < 1e-6


def test_lncc_affine_invariance(rng):
    a = rng.uniform(0, 1, (9, 9, 9))
    assert lncc(a, 2.5 * a + 0.3) == pytest.approx(1.0, abs=1e-6)
    assert lncc(a, 0.07 * a - 0.2) == pytest.approx(1.0, abs=1e-9)
    assert lncc(a, a) == pytest.approx(1.0, abs=1e-6)
    assert lncc(a, -a) == pytest.approx(-1.0, abs=1e-9)


def test_lncc_symmetry(rng):
    a = rng.uniform(0, 1, (7, 7, 7))
    b = rng.uniform(0, 1, (7, 7, 7))
    assert lncc(a, b) == pytest.approx(lncc(b, a), abs=1e-12)


def test_lncc_constant_input_scores_zero(rng):
    a = np.full((6, 6, 6), 0.4)
    b = rng.uniform(0, 1, (6, 6, 6))
    assert lncc(a, b) == 0.0


def test_lncc_mask(rng):
    a = rng.uniform(0, 1, (7, 7, 7))
    b = rng.uniform(0, 1, (7, 7, 7))
    assert lncc(a, b, mask=np.zeros(a.shape, bool)) == 0.0
    half = np.zeros(a.shape, bool)
    half[:3] = True
    full = lncc(a, b, mask=None)
    masked = lncc(a, b, mask=half)
    assert masked != pytest.approx(full, abs=1e-9)


def test_lncc_validation():
    with pytest.raises(ConfigError):
        lncc(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))
    with pytest.raises(ConfigError):
        lncc(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), window=4)


def test_dice_oracle():
    a = np.array([[[1, 1, 2, 0]]])
    b = np.array([[[1, 2, 2, 2]]])
    assert dice(a, b, 1) == pytest.approx(2 * 1 / (2 + 1))
    assert dice(a, b, 2) == pytest.approx(2 * 1 / (1 + 3))
    with pytest.raises(ConfigError):
        dice(a, b[..., :3], 1)


def test_dice_absent_label_warns():
    a = np.zeros((3, 3, 3), np.uint8)
    with pytest.warns(UserWarning):
        assert np.isnan(dice(a, a, 5))


def test_weighted_dice_oracle():
    ref = np.zeros((4, 4, 4), np.uint8)
    mov = np.zeros((4, 4, 4), np.uint8)
    ref[:2, 0, 0] = 1          # 2 voxels of label 1
    mov[:1, 0, 0] = 1          # overlap 1 -> dice 2/3
    ref[0, 1, :4] = 2          # 4 voxels of label 2
    mov[0, 1, :2] = 2          # overlap 2 -> dice 2*2/6
    expected = (2 * (2 / 3) + 4 * (4 / 6)) / 6
    assert weighted_dice(ref, mov) == pytest.approx(expected)
    # explicit labels including one absent from both -> skipped with warning
    with pytest.warns(UserWarning):
        assert weighted_dice(ref, mov, labels=[1, 2, 9]) == pytest.approx(expected)


def test_weighted_dice_no_labels_warns():
    empty = np.zeros((3, 3, 3), np.uint8)
    with pytest.warns(UserWarning):
        assert np.isnan(weighted_dice(empty, empty))


def test_deformation_stats_identity():
    fs = FieldSet.create(small_field_config(), seed=0)
    stats = deformation_stats(fs, (8, 8, 8), n_frames=2)
    assert stats["u_norm"] == 0.0
    assert stats["det_j"] == pytest.approx(1.0, abs=1e-12)
    assert stats["fold_ratio"] == 0.0


def test_motion_recovery_oracle():
    dims = (5, 5, 5)
    gt = np.zeros(dims + (3,))
    comp = np.zeros(dims + (3,))
    comp[..., 0] = 0.25  # one voxel at 5 samples -> scale 4
    err = motion_recovery_error(DenseDeformation(comp), gt, dims)
    assert err == pytest.approx(1.0)
    mask = np.zeros(dims, bool)
    mask[0, 0, 0] = True
    assert motion_recovery_error(DenseDeformation(comp), gt, dims, mask) == pytest.approx(1.0)
    with pytest.raises(DataError):
        motion_recovery_error(DenseDeformation(comp), gt, dims, np.zeros(dims, bool))


def test_sample_pairs_properties():
    pairs = sample_pairs(8, 20, seed=3)
    assert len(pairs) == 20
    assert len(set(pairs)) == 20
    assert all(i != j and 0 <= i < 8 and 0 <= j < 8 for i, j in pairs)
    assert pairs == sample_pairs(8, 20, seed=3)
    assert len(sample_pairs(3, 100, seed=0)) == 6  # capped at the pool
    with pytest.raises(ConfigError):
        sample_pairs(1, 5, seed=0)


def test_composed_pair_warp_identity():
    ident = {k: identity_deformation((5, 5, 5)) for k in range(3)}
    comp = composed_pair_warp(ident, ident, 0, 2)
    assert np.all(comp.disp == 0.0)


def test_eval_config_validation():
    with pytest.raises(ConfigError) as e:
        EvalConfig(n_pairs=0, window=4, squarings=0)
    assert len(e.value.errors) == 3
    d = EvalConfig(labels=(1, 2)).to_dict()
    assert d["labels"] == [1, 2]
    assert EvalConfig().to_dict()["labels"] is None


def test_untrained_model_scores_equal_unaligned(tiny_phantom):
    fs = FieldSet.create(small_field_config(), seed=0)
    cfg = EvalConfig(n_pairs=4, window=5, seed=1)
    rep = evaluate_pairs(fs, tiny_phantom.volume, labels=tiny_phantom.labels,
                         cfg=cfg)
    for rec in rep.per_pair:
        assert rec["lncc"] == pytest.approx(rec["lncc_unaligned"], abs=1e-9)
        assert rec["wdice"] == pytest.approx(rec["wdice_unaligned"], abs=1e-9)
    assert rep.summary["lncc_mean"] == pytest.approx(
        rep.unaligned["lncc_mean"], abs=1e-9)
    assert rep.summary["u_norm"] == 0.0


def test_report_schema_and_jsonschema_agree(tiny_phantom):
    fs = FieldSet.create(small_field_config(), seed=0)
    rep = evaluate_pairs(fs, tiny_phantom.volume,
                         cfg=EvalConfig(n_pairs=2, window=5))
    d = rep.to_dict()
    validate_report(d)
    jsonschema.validate(d, REPORT_SCHEMA)
    assert d["summary"]["wdice_mean"] is None  # no labels passed


def test_validate_report_rejects_bad_documents(tiny_phantom):
    fs = FieldSet.create(small_field_config(), seed=0)
    d = evaluate_pairs(fs, tiny_phantom.volume,
                       cfg=EvalConfig(n_pairs=2, window=5)).to_dict()
    missing = dict(d)
    del missing["summary"]
    with pytest.raises(DataError):
        validate_report(missing)
    bad = json.loads(json.dumps(d))
    bad["per_pair"][0]["lncc"] = 2.0
    with pytest.raises(DataError):
        validate_report(bad)
    empty = json.loads(json.dumps(d))
    empty["per_pair"] = []
    with pytest.raises(DataError):
        validate_report(empty)


def test_write_report(tmp_path, tiny_phantom):
    fs = FieldSet.create(small_field_config(), seed=0)
    rep = evaluate_pairs(fs, tiny_phantom.volume,
                         cfg=EvalConfig(n_pairs=2, window=5))
    out = tmp_path / "report.json"
    write_report(rep, out)
    loaded = json.loads(out.read_text())
    assert loaded["summary"]["lncc_mean"] == pytest.approx(
        rep.summary["lncc_mean"])
    with pytest.raises(DataError):
        write_report(rep, tmp_path / "missing" / "report.json")
