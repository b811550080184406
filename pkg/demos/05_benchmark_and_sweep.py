"""
The corruption benchmark, end to end
====================================

``run_experiment`` owns the full pipeline: generate the task, train the
source model, store its statistics, then run every (method, corruption,
severity, seed) cell through the online loop and aggregate errors. The
same entry points back the ``ttaforge run`` / ``ttaforge sweep`` CLI; a
config file is just these fields as key=value lines.
"""

import os
import tempfile

from ttaforge import RunConfig, run_experiment, sweep

# Trimmed sizes so the demo finishes in about a minute; drop the overrides
# for the full-size benchmark (512 test images per class, seeds 0-2).
cfg = RunConfig(
    test_per_class=256,
    train_steps=200,
    methods=("source", "tent", "cfa"),
    corruptions=("gaussian_noise",),
    severities=(4, 6, 8),
    seeds=(0,),
)

report = run_experiment(cfg)
print(report.render())

# Every cell is addressable; aggregates carry mean and spread across seeds.
cell = report.cell("cfa", "gaussian_noise", 8)
print("cfa @ gaussian 8:", [f"{e:.2f}" for e in cell.seed_errors], "->", f"{cell.mean:.2f}%")

# --- CSV + sweep --------------------------------------------------------------
# Reports serialize to a stable CSV (same config + seeds => identical bytes).
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "report.csv")
    report.write_csv(path)
    print("\nfirst CSV lines:")
    with open(path) as fh:
        for line in list(fh)[:4]:
            print(" ", line.rstrip())

# A sweep repeats the grid while varying one axis, tagging each variant.
cfg2 = RunConfig(
    test_per_class=256, train_steps=200, methods=("cfa",),
    corruptions=("gaussian_noise",), severities=(6,), seeds=(0,),
)
sw = sweep(cfg2, "lr")
print()
for variant in sorted({c.variant for c in sw.cells}):
    mean = sw.cell("cfa", "gaussian_noise", 6, variant).mean
    print(f"{variant:>12}: {mean:6.2f}% error")

# ``ttaforge sweep --axis lr --plot sweep.png`` renders the same numbers as
# a line chart (needs matplotlib, the package's only optional extra).
