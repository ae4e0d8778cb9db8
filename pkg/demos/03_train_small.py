"""Fit the forecaster on a small two-arm cohort and read the metrics.

Scaled down from the defaults (80 patients, short epoch budget) so the whole
script runs in about a minute on one core.  The printed comparison to the
carry-forward baseline — predict the baseline score at every visit — is the
first thing to check on any trained model; the retention curve is the
second.
"""
import numpy as np

from trajcast import (Arm, CohortConfig, ConvEncoderSpec, ModelSpec,
                      TrainConfig, carry_forward_mse, fit, generate_cohort,
                      make_folds, per_patient_mse, retention_curve)
from trajcast.train import _predict_fold, summarize_mse

cfg = CohortConfig(n_per_arm=40, seed=9,
                   arms=(Arm("placebo"),
                         Arm("active", effect=0.8, responder_fraction=0.55)))
records = generate_cohort(cfg)
tcfg = TrainConfig(epochs=60, patience=15, batch=32, solver_h=2.0,
                   samples=20)
spec = ModelSpec(vol=ConvEncoderSpec(side=cfg.side), n_arms=2,
                 solver_h=tcfg.solver_h, samples=tcfg.samples)

folds = make_folds(records, 4, seed=0)
by_id = {r.patient_id: r for r in records}
train = [by_id[i] for f in folds[1:] for i in f]
held = [by_id[i] for i in folds[0]]
print(f"training on {len(train)}, evaluating on {len(held)} held-out")

def show(h):
    if h["epoch"] % 10 == 0:
        print(f"  epoch {h['epoch']:3d}  train loss {h['loss']:7.3f}  "
              f"val MSE {h['val_mse']:.3f}")

bundle, history = fit(train, held, spec, lr=3e-3, sigma=0.5, cfg=tcfg,
                      arm_names=cfg.arm_names, seed=1, log=show)
print(f"best val MSE {bundle.meta['val_mse']:.3f} "
      f"at epoch {bundle.meta['best_epoch']}")

preds = _predict_fold(bundle, spec, held, tcfg, cfg.arm_names, 0)
mse, se = summarize_mse(per_patient_mse(held, preds))
cfm, cfse = summarize_mse(carry_forward_mse(held))
print(f"\nheld-out factual MSE {mse:.3f} ({se:.3f})")
print(f"carry-forward        {cfm:.3f} ({cfse:.3f})")
print(f"relative improvement {100 * (1 - mse / cfm):.0f}%")

curve = retention_curve(held, preds, levels=(0.3, 0.5, 0.7, 1.0))
print("\nnormalized MSE when keeping only the most confident fraction:")
for lvl in sorted(curve):
    bar = "#" * int(round(40 * curve[lvl]))
    print(f"  {lvl:.1f}  {curve[lvl]:5.3f}  {bar}")
