import json
import os

import numpy as np
import pytest

from natlas.cli import main
from natlas.evaluate import validate_report
from natlas.trainer import read_checkpoint_sections
from natlas.volume import load_label_volume, load_volume

SMALL_FIELD = ["--set", "field.latent_dim=4", "--set", "field.hidden_width=16",
               "--set", "field.hidden_layers=1", "--set", "field.decoder_width=16",
               "--set", "field.levels=3", "--set", "field.table_size_log2=10"]


def run_synth(out_dir, extra=()):
    return main(["synth", "--out-dir", str(out_dir), "--dims", "12,12,12",
                 "--frames", "3", "--amplitude", "0.5",
                 "--set", "phantom.radii=0.25,0.22,0.2", "--quiet", *extra])


@pytest.mark.parametrize("cmd,flag", [
    ("synth", "--out-dir"),
    ("preprocess", "--clip-limit"),
    ("train", "--no-svf"),
    ("infer", "--dims"),
    ("warp", "--frame"),
    ("evaluate", "--pairs"),
])
def test_subcommand_help(capsys, cmd, flag):
    assert main([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    assert flag in out
    assert "--strict-determinism" in out


def test_top_level_help_lists_commands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "preprocess", "train", "infer", "warp", "evaluate"):
        assert cmd in out


def test_missing_command_exits_nonzero():
    assert main([]) != 0


def test_synth_writes_files(tmp_path):
    assert run_synth(tmp_path) == 0
    vol = load_volume(tmp_path / "volume.raw")
    assert vol.dims == (12, 12, 12, 3)
    labels = load_label_volume(tmp_path / "labels.raw")
    assert set(np.unique(labels.data)) <= {0, 1, 2}
    motion = json.loads((tmp_path / "motion.json").read_text())
    assert len(motion["translations_voxels"]) == 3
    assert (tmp_path / "effective_config.json").exists()


def test_synth_bad_dims_is_error(tmp_path, capsys):
    code = main(["synth", "--out-dir", str(tmp_path), "--dims", "12,12"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_preprocess_roundtrip(tmp_path):
    run_synth(tmp_path / "ph")
    out = tmp_path / "pre.raw"
    code = main(["preprocess", "--input", str(tmp_path / "ph" / "volume.raw"),
                 "--output", str(out), "--tiles", "2,2,2", "--quiet"])
    assert code == 0
    vol = load_volume(out)
    assert vol.dims == (12, 12, 12, 3)
    assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0


def test_preprocess_missing_input(tmp_path, capsys):
    code = main(["preprocess", "--input", str(tmp_path / "nope.raw"),
                 "--output", str(tmp_path / "out.raw")])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_full_pipeline_smoke(tmp_path):
    ph = tmp_path / "ph"
    run_dir = tmp_path / "run"
    assert run_synth(ph) == 0

    code = main(["train", "--data", str(ph / "volume.raw"),
                 "--out-dir", str(run_dir), "--iterations", "3",
                 "--spatial-batch", "16", "--quiet", *SMALL_FIELD])
    assert code == 0
    ckpt = run_dir / "checkpoint.natc"
    assert ckpt.exists()
    log = [json.loads(l) for l in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 3

    code = main(["infer", "--checkpoint", str(ckpt),
                 "--out-dir", str(run_dir / "atlas"), "--quiet"])
    assert code == 0
    atlas = load_volume(run_dir / "atlas" / "atlas.raw")
    assert atlas.dims == (12, 12, 12, 1)

    code = main(["warp", "--checkpoint", str(ckpt), "--data", str(ph / "volume.raw"),
                 "--out-dir", str(run_dir / "warped"), "--frame", "1", "--quiet"])
    assert code == 0
    warped = load_volume(run_dir / "warped" / "warped_001.raw")
    assert warped.dims == (12, 12, 12, 1)

    report_path = run_dir / "report.json"
    code = main(["evaluate", "--checkpoint", str(ckpt), "--data", str(ph / "volume.raw"),
                 "--labels", str(ph / "labels.raw"), "--output", str(report_path),
                 "--pairs", "2", "--window", "5", "--quiet"])
    assert code == 0
    report = json.loads(report_path.read_text())
    validate_report(report)
    assert report["summary"]["wdice_mean"] is not None


def test_warp_frame_out_of_range(tmp_path, capsys):
    ph = tmp_path / "ph"
    run_dir = tmp_path / "run"
    run_synth(ph)
    main(["train", "--data", str(ph / "volume.raw"), "--out-dir", str(run_dir),
          "--iterations", "1", "--spatial-batch", "8", "--quiet", *SMALL_FIELD])
    code = main(["warp", "--checkpoint", str(run_dir / "checkpoint.natc"),
                 "--data", str(ph / "volume.raw"), "--out-dir", str(run_dir),
                 "--frame", "9"])
    assert code == 1
    assert "out of range" in capsys.readouterr().err


def test_cli_resume_matches_straight_run(tmp_path):
    ph = tmp_path / "ph"
    run_synth(ph)
    common = ["--data", str(ph / "volume.raw"), "--spatial-batch", "16",
              "--quiet", *SMALL_FIELD, "--set", "train.checkpoint_interval=2"]

    straight = tmp_path / "straight"
    assert main(["train", "--out-dir", str(straight), "--iterations", "4",
                 *common]) == 0

    resumed = tmp_path / "resumed"
    assert main(["train", "--out-dir", str(resumed), "--iterations", "4",
                 *common]) == 0  # interval checkpoint lands at iteration 2
    mid = resumed / "checkpoint_000002.natc"
    assert mid.exists()
    assert main(["train", "--out-dir", str(resumed), "--iterations", "4",
                 "--resume", str(mid), *common]) == 0

    a = read_checkpoint_sections(straight / "checkpoint.natc")
    b = read_checkpoint_sections(resumed / "checkpoint.natc")
    assert a["meta"]["iteration"] == b["meta"]["iteration"] == 4
    for key, val in a.items():
        if key.startswith("param."):
            np.testing.assert_array_equal(b[key], val)


def test_threads_flag_sets_env(tmp_path, monkeypatch):
    for var in ("OMP_NUM_THREADS", "NATLAS_THREADS"):
        monkeypatch.delenv(var, raising=False)
    assert run_synth(tmp_path, extra=["--threads", "2"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"
    monkeypatch.setenv("NATLAS_THREADS", "3")
    assert run_synth(tmp_path) == 0
    assert os.environ["OMP_NUM_THREADS"] == "3"
    assert run_synth(tmp_path, extra=["--strict-determinism"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "1"


def test_threads_zero_rejected(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path), "--threads", "0"]) == 2


def test_bad_override_exits_with_error(tmp_path, capsys):
    code = main(["synth", "--out-dir", str(tmp_path), "--set", "nope.x=1"])
    assert code == 1
    assert "unknown config section" in capsys.readouterr().err
