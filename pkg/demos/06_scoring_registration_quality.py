"""
Scoring registration quality
============================

Evaluates the model from demo 04 on sampled frame pairs: every pair is
aligned by composing frame i's forward warp with frame j's inverse, then
scored with windowed normalized cross-correlation and label overlap.
The report is written as schema-checked JSON.
"""

import json
from pathlib import Path

from natlas.evaluate import EvalConfig, evaluate_pairs, validate_report, write_report
from natlas.synth import PhantomConfig, synth_sequence
from natlas.trainer import load_checkpoint

out = Path(__file__).parent / "_out"
ckpt = out / "demo_checkpoint.natc"
if not ckpt.exists():
    raise SystemExit("run 04_stabilize_a_beating_phantom.py first")

state = load_checkpoint(ckpt)
dims, T = state.volume_dims[:3], state.volume_dims[3]
res = synth_sequence(PhantomConfig(dims=dims, n_frames=T,
                                   radii=(0.28, 0.24, 0.2), amplitude=1.5),
                     seed=5)

cfg = EvalConfig(n_pairs=12, seed=0, window=7)
report = evaluate_pairs(state.fs, res.volume, res.labels, cfg)

print(" i  j   lncc (unaligned)   wdice (unaligned)")
for rec in report.per_pair:
    print(f"{rec['i']:>2} {rec['j']:>2}   {rec['lncc']:.3f} ({rec['lncc_unaligned']:.3f})"
          f"      {rec['wdice']:.3f} ({rec['wdice_unaligned']:.3f})")

s = report.summary
print(f"\nsummary: lncc {s['lncc_mean']:.3f} +- {s['lncc_sd']:.3f}, "
      f"wdice {s['wdice_mean']:.3f}, fold {s['fold_ratio']:.4f}, "
      f"det J {s['det_j']:.3f}")

path = out / "demo_report.json"
write_report(report, path)
validate_report(json.loads(path.read_text()))
print(f"wrote schema-valid report to {path}")
