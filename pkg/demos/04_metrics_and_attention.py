"""Reading the outputs: F1 reports, confusion matrices, attention rankings.

Run:  python demos/04_metrics_and_attention.py
"""

import os
import tempfile

from patchbag.metrics import task_metrics
from patchbag.model import ModelDims, ModelParams, TagSchema
from patchbag.synth import SynthConfig, generate
from patchbag.training import evaluate, export_attention

# Metrics on a hand-made prediction set: truth AABB, predictions ABBB.
m = task_metrics([0, 0, 1, 1], [0, 1, 1, 1], ("A", "B"), task="demo")
print(f"per-class F1: {m.per_class_f1}")
print(f"macro {m.macro_f1:.4f}, micro {m.micro_f1:.4f}")
print("row-normalized confusion:")
for row in m.confusion:
    print("   ", " ".join(f"{v:.2f}" for v in row))

# A fresh (untrained) model evaluated on a small dataset: numbers are near
# chance, but every report field is populated the same way as after training.
schema = TagSchema(tasks=(("color", ("red", "blue")),
                          ("shape", ("dot", "bar", "box"))))
config = SynthConfig(schema=schema, feature_dim=12, patches_per_bag=6,
                     n_bags=24, signal_fraction=0.34, noise_std=0.15, seed=0)
bags = generate(config)
params = ModelParams(schema, ModelDims(feature_dim=12, n_heads=1), "gated", 0)
report = evaluate(params, bags)
print(f"untrained avg macro F1: {report.avg_macro_f1:.3f} (chance-ish)")

# Attention export: one CSV per bag ranking patches per task, plus SVGs.
with tempfile.TemporaryDirectory() as out:
    written = export_attention(params, bags[:2], out, svg=True)
    print("export wrote:", [os.path.basename(p) for p in written])
    with open(written[0]) as fh:
        for line in list(fh)[:4]:
            print("   ", line.rstrip())
