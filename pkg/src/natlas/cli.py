"""Command-line entry points: synth | preprocess | train | infer | warp | evaluate.

Thread environment variables are set from --threads / NATLAS_THREADS
(or forced to 1 by --strict-determinism) before numpy is imported, so
the heavy modules are loaded lazily inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _configure_threads(args) -> None:
    threads = getattr(args, "threads", None)
    if getattr(args, "strict_determinism", False):
        threads = 1
    if threads is None:
        env = os.environ.get("NATLAS_THREADS")
        if env:
            threads = int(env)
    if threads is not None:
        if threads < 1:
            raise SystemExit("error: --threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH",
                   help="JSON run config; command flags override file values")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   dest="overrides", help="override one config value (repeatable)")
    p.add_argument("--threads", type=int, metavar="N",
                   help="worker thread cap (default: NATLAS_THREADS or all cores)")
    p.add_argument("--strict-determinism", action="store_true",
                   help="force single-threaded, bit-reproducible execution")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="natlas",
        description="Subject-specific spatiotemporal atlas from a 4D time-series.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom sequence")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--dims", metavar="X,Y,Z", help="grid size, e.g. 32,32,32")
    p.add_argument("--frames", type=int, help="number of timepoints")
    p.add_argument("--amplitude", type=float, help="peak translation in voxels")
    p.add_argument("--rotation-deg", type=float, help="peak rotation in degrees")
    p.add_argument("--noise-sigma", type=float, help="additive noise level")
    p.add_argument("--seed", type=int, help="random seed")
    _add_common(p)

    p = sub.add_parser("preprocess", help="contrast-normalize a volume (CLAHE)")
    p.add_argument("--input", required=True, help="input volume (raw or NIfTI-1)")
    p.add_argument("--output", required=True, help="output volume (raw)")
    p.add_argument("--clip-limit", type=float, help="histogram clip limit")
    p.add_argument("--tiles", metavar="X,Y,Z", help="tile counts, e.g. 8,8,8")
    _add_common(p)

    p = sub.add_parser("train", help="fit the neural fields to a volume")
    p.add_argument("--data", required=True, help="training volume (raw or NIfTI-1)")
    p.add_argument("--out-dir", required=True, help="directory for checkpoint and log")
    p.add_argument("--iterations", type=int, help="number of optimization steps")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--spatial-batch", type=int, help="spatial points per step")
    p.add_argument("--temporal-batch", type=int, help="timepoints per step")
    p.add_argument("--no-svf", action="store_true",
                   help="ablation: use the network output as displacement directly")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    _add_common(p)

    p = sub.add_parser("infer", help="decode the atlas volume from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out-dir", required=True, help="directory for atlas files")
    p.add_argument("--dims", metavar="X,Y,Z", help="override the atlas grid size")
    p.add_argument("--frames", type=int, help="override the timepoint count")
    _add_common(p)

    p = sub.add_parser("warp", help="pull frames into atlas space (stabilize)")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="volume to stabilize")
    p.add_argument("--out-dir", required=True, help="directory for warped frames")
    p.add_argument("--frame", type=int, help="single frame index (default: all)")
    _add_common(p)

    p = sub.add_parser("evaluate", help="score composed pairwise warps")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="evaluation volume")
    p.add_argument("--labels", help="aligned label volume (raw)")
    p.add_argument("--output", required=True, help="report JSON path")
    p.add_argument("--pairs", type=int, help="number of ordered frame pairs")
    p.add_argument("--window", type=int, help="correlation window size (odd)")
    p.add_argument("--eval-seed", type=int, help="pair-sampling seed")
    _add_common(p)

    return parser


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


def _load_run_config(args):
    from .config import RunConfig, apply_overrides, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args.overrides)


def _parse_dims(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated sizes, got {text!r}")
    return tuple(parts)


def _echo_config(cfg, out_dir: Path) -> None:
    from .config import write_effective_config

    write_effective_config(cfg, out_dir / "effective_config.json")


def cmd_synth(args) -> int:
    from dataclasses import replace

    from .synth import synth_sequence
    from .volume import save_label_volume, save_volume

    cfg = _load_run_config(args)
    pc = cfg.phantom
    if args.dims:
        pc = replace(pc, dims=_parse_dims(args.dims))
    if args.frames is not None:
        pc = replace(pc, n_frames=args.frames)
    if args.amplitude is not None:
        pc = replace(pc, amplitude=args.amplitude)
    if args.rotation_deg is not None:
        pc = replace(pc, rotation_deg=args.rotation_deg)
    if args.noise_sigma is not None:
        pc = replace(pc, noise_sigma=args.noise_sigma)
    cfg = replace(cfg, phantom=pc)
    seed = args.seed if args.seed is not None else cfg.train.seed

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = synth_sequence(pc, seed=seed)
    save_volume(result.volume, out_dir / "volume.raw")
    save_label_volume(result.labels, out_dir / "labels.raw")
    with open(out_dir / "motion.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": seed,
                   "translations_voxels": result.translations.tolist(),
                   "rotations_radians": result.rotations.tolist()}, fh, indent=2)
        fh.write("\n")
    _echo_config(cfg, out_dir)
    _say(args, f"wrote phantom to {out_dir}")
    return 0


def cmd_preprocess(args) -> int:
    from dataclasses import replace

    from .clahe import clahe
    from .volume import load_volume, save_volume

    cfg = _load_run_config(args)
    cc = cfg.clahe
    if args.clip_limit is not None:
        cc = replace(cc, clip_limit=args.clip_limit)
    if args.tiles:
        cc = replace(cc, tiles=_parse_dims(args.tiles))
    vol = load_volume(args.input)
    out = clahe(vol, cc.clip_limit, cc.tiles)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_volume(out, out_path)
    _say(args, f"wrote {out_path}")
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from .trainer import init_training, load_checkpoint, save_checkpoint, train
    from .volume import load_volume

    cfg = _load_run_config(args)
    tc = cfg.train
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.spatial_batch is not None:
        tc = replace(tc, spatial_batch=args.spatial_batch)
    if args.temporal_batch is not None:
        tc = replace(tc, temporal_batch=args.temporal_batch)
    if args.no_svf:
        tc = replace(tc, use_svf=False)
    cfg = replace(cfg, train=tc)

    vol = load_volume(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)

    if args.resume:
        state = load_checkpoint(args.resume)
        if args.iterations is not None:
            state.cfg = replace(state.cfg, iterations=args.iterations)
        _say(args, f"resuming from {args.resume} at iteration {state.iteration}")
    else:
        state = init_training(tc, cfg.field, cfg.loss)

    interval = max(1, state.cfg.iterations // 20)

    def progress(record):
        if record["iter"] % interval == 0 or record["iter"] + 1 == state.cfg.iterations:
            _say(args, f"iter {record['iter'] + 1}/{state.cfg.iterations} "
                       f"total {record['total']:.5f} rec {record['rec']:.5f} "
                       f"({record['wall_ms']:.0f} ms)")

    mode = "a" if args.resume else "w"
    with open(out_dir / "train_log.jsonl", mode, encoding="utf-8") as log_fh:
        train(vol, state, log_fh=log_fh, out_dir=out_dir, progress=progress)
    save_checkpoint(out_dir / "checkpoint.natc", state)
    _say(args, f"wrote {out_dir / 'checkpoint.natc'}")
    return 0


def _state_dims(state, dims_flag, frames_flag):
    from .errors import ConfigError

    if dims_flag:
        dims = _parse_dims(dims_flag)
    elif state.volume_dims:
        dims = tuple(state.volume_dims[:3])
    else:
        raise ConfigError("checkpoint lacks volume dims; pass --dims X,Y,Z")
    if frames_flag is not None:
        n_frames = frames_flag
    elif state.volume_dims:
        n_frames = int(state.volume_dims[3])
    else:
        n_frames = 1
    return dims, n_frames


def cmd_infer(args) -> int:
    from .atlas import export_atlas, infer_atlas
    from .trainer import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    dims, n_frames = _state_dims(state, args.dims, args.frames)
    atlas = infer_atlas(state.fs, dims, n_frames)
    out_dir = Path(args.out_dir)
    paths = export_atlas(atlas, out_dir)
    cfg = _load_run_config(args)
    _echo_config(cfg, out_dir)
    _say(args, f"wrote {paths['volume']}")
    return 0


def cmd_warp(args) -> int:
    from .atlas import dense_displacement, warp_image_to_atlas
    from .errors import ConfigError
    from .trainer import load_checkpoint
    from .volume import frame_times, load_volume, save_array_raw

    state = load_checkpoint(args.checkpoint)
    vol = load_volume(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = range(vol.n_frames) if args.frame is None else [args.frame]
    times = frame_times(vol.n_frames)
    cfg_train = state.cfg
    for k in frames:
        if not 0 <= k < vol.n_frames:
            raise ConfigError(f"frame {k} out of range 0..{vol.n_frames - 1}")
        inv = dense_displacement(state.fs, vol.spatial_dims, float(times[k]),
                                 use_svf=cfg_train.use_svf, inverse=True)
        warped = warp_image_to_atlas(vol.frame(k), inv)
        path = out_dir / f"warped_{k:03d}.raw"
        save_array_raw(warped[..., None], vol.spacing, path)
        _say(args, f"wrote {path}")
    return 0


def cmd_evaluate(args) -> int:
    from dataclasses import replace

    from .evaluate import evaluate_pairs, write_report
    from .trainer import load_checkpoint
    from .volume import load_label_volume, load_volume

    cfg = _load_run_config(args)
    ec = cfg.eval
    if args.pairs is not None:
        ec = replace(ec, n_pairs=args.pairs)
    if args.window is not None:
        ec = replace(ec, window=args.window)
    if args.eval_seed is not None:
        ec = replace(ec, seed=args.eval_seed)

    state = load_checkpoint(args.checkpoint)
    ec = replace(ec, use_svf=state.cfg.use_svf)
    vol = load_volume(args.data)
    labels = load_label_volume(args.labels) if args.labels else None
    report = evaluate_pairs(state.fs, vol, labels, ec)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out_path)
    _say(args, f"wrote {out_path} (lncc {report.summary['lncc_mean']:.4f}, "
               f"unaligned {report.unaligned['lncc_mean']:.4f})")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "infer": cmd_infer,
    "warp": cmd_warp,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _configure_threads(args)
    except SystemExit as e:
        print(e, file=sys.stderr)
        return 2
    from .errors import NatlasError

    try:
        return _COMMANDS[args.command](args)
    except NatlasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
