"""Run the full pipeline and read the aggregate table it writes."""

import csv
import sys
import tempfile
from pathlib import Path

from mgu.experiment import ExperimentConfig, run_experiment

spec = {
    "blocks": [30, 30, 30],
    "p_in": 0.1,
    "p_out": 0.01,
    "feat_dim": 16,
    "mean_shift": 1.5,
    "label_noise": 0.05,
    "seed": 1,
}
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "run"
cfg = ExperimentConfig.from_dict({"dataset": {"source": "sbm", "spec": spec}, "out": str(out), "mem": {"num_seeds": 2}})
run_experiment(cfg)

print(f"artifacts in {out}:")
for p in sorted(out.iterdir()):
    print("  ", p.name + ("/" if p.is_dir() else ""))
with open(out / "aggregate.csv", newline="") as f:
    for r in csv.DictReader(f):
        print(f"{r['label']:12} {r['setting']:7} ToU {float(r['tou_mean']):.3f} +- {float(r['tou_std']):.3f}")
