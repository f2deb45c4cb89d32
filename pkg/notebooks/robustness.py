"""
Adversarial robustness of stabilized classifiers
================================================

A small classifier ``A1 -> neural ODE block -> A2`` is trained on synthetic
blobs, stabilized with a few target log-norms, retrained and attacked with
FGSM and FGM.  The shifted and negative-semidefinite baselines are included.
This is a reduced configuration that finishes in a few seconds.
"""

# %%
import tempfile

from logstab.robustness import ExperimentConfig, rows_to_csv, run_experiment

cfg = ExperimentConfig(dimension=4, hidden=4, samples=300, epochs=20, retrain_epochs=10)
with tempfile.TemporaryDirectory() as out:
    summary = run_experiment(cfg, out)

# %%
# Accuracy per model, attack and magnitude on the test split.
print(rows_to_csv(summary["rows"]))

# %%
# Selected targets and certificates.
print(summary["delta"])
for name, (quantity, value) in summary["certificates"].items():
    print(f"{name:14s} {quantity:20s} {value:.6g}")
