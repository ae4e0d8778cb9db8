"""Command-line front end: generate, train, predict, evaluate, uplift, report.

Every command is a thin shell over the library; anything it writes, the
library can also produce in-process.  Exit codes: 0 success, 2 usage error
(argparse), 3 data or validation failure.

The evaluate and uplift commands re-derive per-patient predictions from a
training run directory.  Both enforce the fold discipline recorded at
training time: a patient is only ever predicted by the one fold model that
never saw them, and a run directory whose fold map does not cleanly
partition the cohort — or whose parameter files disagree about which fold
they belong to — is rejected rather than silently rescored.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import causal
from . import data as dat
from . import model as mdl
from . import nets
from . import train as trn

# every library failure mode subclasses ValueError (DataError, ModelError,
# NetError, SdeError, TrainError, CausalError, bad JSON, bad numbers in
# argument lists); KeyError/OSError cover missing metadata and unreadable
# files. Anything else is a bug and should traceback.
_DATA_ERRORS = (ValueError, KeyError, OSError)


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _cohort_config(meta) -> dat.CohortConfig:
    return dat.CohortConfig.from_dict(meta["config"])


def _marks(cfg: dat.CohortConfig) -> np.ndarray:
    return cfg.marks


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = (dat.CohortConfig.from_dict(_load_json(args.config))
           if args.config else dat.CohortConfig())
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_per_arm is not None:
        overrides["n_per_arm"] = args.n_per_arm
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    records = dat.generate_cohort(cfg)
    dat.save_cohort(args.out, records, cfg)
    print(f"wrote {len(records)} patients ({len(cfg.arms)} arms, "
          f"seed {cfg.seed}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _build_spec(cohort_cfg: dat.CohortConfig, tcfg: trn.TrainConfig,
                model_json=None) -> mdl.ModelSpec:
    if model_json:
        return mdl.ModelSpec.from_dict(_load_json(model_json))
    return mdl.ModelSpec(vol=nets.ConvEncoderSpec(side=cohort_cfg.side),
                         n_arms=len(cohort_cfg.arms),
                         solver_h=tcfg.solver_h, samples=tcfg.samples)


def cmd_train(args) -> int:
    records, meta = dat.load_cohort(args.cohort)
    cohort_cfg = _cohort_config(meta)
    tcfg = (trn.TrainConfig.from_dict(_load_json(args.config))
            if args.config else trn.TrainConfig())
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    spec = _build_spec(cohort_cfg, tcfg, args.model)

    log = None
    if args.verbose:
        log = lambda e: print(f"  epoch {e['epoch']:3d}  "
                              f"loss {e['loss']:8.4f}  "
                              f"val {e['val_mse']:8.4f}", flush=True)
    result = trn.run_nested_cv(records, cohort_cfg.arm_names,
                               spec=spec, cfg=tcfg, log=log)

    os.makedirs(args.outdir, exist_ok=True)
    for k, bundle in enumerate(result.bundles):
        bundle.meta["fold"] = k
        nets.save_params(os.path.join(args.outdir, f"fold{k}.params"), bundle)
    summary = trn.save_metrics(os.path.join(args.outdir, "metrics"),
                               records, result)
    print(f"factual MSE {summary['factual_mse']:.4f} "
          f"(carry-forward {summary['carry_forward_mse']:.4f}, "
          f"{100 * summary['relative_improvement']:.1f}% better) "
          f"-> {args.outdir}")
    return 0


# ---------------------------------------------------------------------------
# run-directory plumbing shared by evaluate/uplift
# ---------------------------------------------------------------------------

def _load_run(run_dir, records):
    """Load fold params + run metadata, enforcing the fold discipline."""
    run = _load_json(os.path.join(run_dir, "metrics.run.json"))
    tcfg = trn.TrainConfig.from_dict(run["train_config"])
    folds = [list(map(int, f)) for f in run["folds"]]
    ids = sorted(r.patient_id for r in records)
    flat = sorted(pid for f in folds for pid in f)
    if flat != ids:
        raise trn.TrainError("run fold map does not partition this cohort; "
                             "refusing to score (wrong cohort or tampered "
                             "run directory)")
    bundles = []
    for k in range(len(folds)):
        b = nets.load_params(os.path.join(run_dir, f"fold{k}.params"))
        if b.meta.get("fold") != k:
            raise trn.TrainError(f"fold{k}.params claims fold "
                                 f"{b.meta.get('fold')}; file layout and "
                                 "parameter metadata disagree")
        bundles.append(b)
    spec = mdl.ModelSpec.from_dict(bundles[0].meta["model"])
    arm_names = run["arm_names"]
    return run, tcfg, folds, bundles, spec, arm_names


def cmd_evaluate(args) -> int:
    records, meta = dat.load_cohort(args.cohort)
    records = dat.sanitize(records)
    run, tcfg, folds, bundles, spec, arm_names = _load_run(args.run, records)
    by_id = {r.patient_id: r for r in records}
    predictions = {}
    for k, fold in enumerate(folds):
        predictions.update(trn._predict_fold(
            bundles[k], spec, [by_id[i] for i in fold], tcfg, arm_names, k))
    result = trn.CvResult(config=tcfg, arm_names=arm_names, folds=folds,
                          fold_of={p: k for k, f in enumerate(folds)
                                   for p in f},
                          chosen=run["chosen"], bundles=bundles,
                          predictions=predictions,
                          inner_scores=run["inner_scores"])
    summary = trn.save_metrics(args.out, records, result)
    print(f"factual MSE {summary['factual_mse']:.4f} over "
          f"{summary['n_patients']} patients -> {args.out}.json")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def cmd_predict(args) -> int:
    records, meta = dat.load_cohort(args.cohort)
    records = dat.sanitize(records)
    cohort_cfg = _cohort_config(meta)
    bundle = nets.load_params(args.params)
    spec = mdl.ModelSpec.from_dict(bundle.meta["model"])
    arm_names = bundle.meta.get("arm_names", cohort_cfg.arm_names)
    if args.arm not in arm_names:
        raise mdl.ModelError(f"unknown arm {args.arm!r}; "
                             f"this model knows {arm_names}")
    if args.patients:
        want = {int(p) for p in args.patients.split(",")}
        records = [r for r in records if r.patient_id in want]
        missing = want - {r.patient_id for r in records}
        if missing:
            raise dat.DataError(f"cohort has no patients {sorted(missing)}")
    if not records:
        raise dat.DataError("no patients selected")
    weeks = (np.asarray([float(w) for w in args.weeks.split(",")])
             if args.weeks else _marks(cohort_cfg))
    pred = mdl.predict_trajectory(
        bundle, spec,
        np.stack([r.volume for r in records]),
        np.stack([r.tabular for r in records]),
        arm_names.index(args.arm), weeks,
        seed=args.seed, samples=args.samples)
    mdl.save_predictions(args.out, [r.patient_id for r in records],
                         args.arm, pred,
                         extra_meta={"cohort": os.path.basename(args.cohort)})
    print(f"{len(records)} patients x {pred.samples.shape[1]} paths "
          f"under {args.arm} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# uplift
# ---------------------------------------------------------------------------

def cmd_uplift(args) -> int:
    records, meta = dat.load_cohort(args.cohort)
    records = dat.sanitize(records)
    cohort_cfg = _cohort_config(meta)
    run, tcfg, folds, bundles, spec, arm_names = _load_run(args.run, records)
    for name in (args.arm, args.reference):
        if name not in arm_names:
            raise mdl.ModelError(f"unknown arm {name!r}; "
                                 f"this run knows {arm_names}")
    weeks = _marks(cohort_cfg)
    b_idx = dat.TABULAR_FIELDS.index("baseline_edss")
    by_id = {r.patient_id: r for r in records}

    ids_all, up_all, unc_all = [], [], []
    for k, fold in enumerate(folds):
        rs = [by_id[i] for i in fold]
        vols = np.stack([r.volume for r in rs])
        tabs = np.stack([r.tabular for r in rs])
        seed = (tcfg.seed * 3_000_017 + k) & 0x7FFFFFFF
        # same base seed for both arms -> shared noise paths, so the path
        # noise cancels inside every per-sample difference
        pred_s = mdl.predict_trajectory(bundles[k], spec, vols, tabs,
                                        arm_names.index(args.arm), weeks,
                                        seed=seed, samples=tcfg.samples)
        pred_0 = mdl.predict_trajectory(bundles[k], spec, vols, tabs,
                                        arm_names.index(args.reference),
                                        weeks, seed=seed,
                                        samples=tcfg.samples)
        ids_all.extend(r.patient_id for r in rs)
        up_all.append(causal.uplift_scores(pred_s, pred_0, tabs[:, b_idx]))
        unc_all.append(causal.uplift_uncertainty(pred_s, pred_0))

    ids = np.asarray(ids_all)
    uplift = np.concatenate(up_all)
    unc = np.concatenate(unc_all)
    levels = [float(x) for x in args.retention.split(",")]
    splits = [causal.responder_split(ids, uplift, unc, retention=l)
              for l in levels]
    causal.save_uplift_csv(args.out, args.arm, splits)
    full = splits[levels.index(1.0)] if 1.0 in levels else None
    msg = f"uplift for {len(ids)} patients -> {args.out}"
    if full is not None:
        msg += f" (mean {full.uplift.mean():+.3f} EDSS vs {args.reference})"
    print(msg)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    summary = _load_json(os.path.join(args.run, "metrics.json"))
    run = _load_json(os.path.join(args.run, "metrics.run.json"))
    print(f"patients            {summary['n_patients']}")
    print(f"factual MSE         {summary['factual_mse']:.4f} "
          f"(se {summary['factual_mse_se']:.4f})")
    print(f"carry-forward MSE   {summary['carry_forward_mse']:.4f} "
          f"(se {summary['carry_forward_mse_se']:.4f})")
    print(f"relative improvement {100 * summary['relative_improvement']:.1f}%")
    print("retention curve     "
          + "  ".join(f"{k}:{v:.3f}"
                      for k, v in sorted(summary["retention_curve"].items(),
                                         key=lambda kv: float(kv[0]))))
    for k, c in enumerate(run["chosen"]):
        print(f"fold {k}: lr {c['lr']:g}  sigma {c['sigma']:g}  "
              f"inner val {c['score']:.4f}")
    cov = summary["coverage"]
    if cov["skipped"]:
        print(f"note: {cov['skipped']} of {cov['visits']} visits fell "
              "outside the scored window")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trajcast",
        description="latent-SDE disability trajectory pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic trial cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="cohort config JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-per-arm", type=int, dest="n_per_arm")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="nested cross-validated training run")
    s.add_argument("--cohort", required=True)
    s.add_argument("--outdir", required=True)
    s.add_argument("--config", help="train config JSON")
    s.add_argument("--model", help="model spec JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="sample trajectories under one arm")
    s.add_argument("--cohort", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--arm", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--weeks", help="comma list; default scheduled marks")
    s.add_argument("--patients", help="comma list of ids; default all")
    s.add_argument("--samples", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("evaluate",
                       help="re-score a training run from its fold params")
    s.add_argument("--cohort", required=True)
    s.add_argument("--run", required=True, help="training output directory")
    s.add_argument("--out", required=True, help="metrics file prefix")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("uplift",
                       help="per-patient treatment effect vs a reference arm")
    s.add_argument("--cohort", required=True)
    s.add_argument("--run", required=True)
    s.add_argument("--arm", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--retention", default="0.3,0.5,1.0",
                   help="comma list of retained fractions")
    s.set_defaults(fn=cmd_uplift)

    s = sub.add_parser("report", help="print a run summary")
    s.add_argument("--run", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
