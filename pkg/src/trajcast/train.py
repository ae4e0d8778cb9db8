"""Training loop, nested cross-validation, and factual-accuracy metrics.

The trainable model is the whole encode -> evolve -> decode pipeline from
:mod:`trajcast.model`; this module owns everything around it: the balanced
regression loss, Adam, the fold protocol (stratified 4-fold outer split,
3-rotation inner tuning, crogged test predictions), the carry-forward
baseline, and the retention curve used for confidence filtering.

Protocol notes
--------------
* Training code never sees counterfactuals: every entry point re-sanitizes
  its records, so even a caller holding unsanitized data cannot leak the
  hidden fields into a fit.
* One Brownian draw per patient per epoch (fresh noise each epoch, seeded
  deterministically from (seed, epoch, batch)).
* Early stopping monitors *noise-free* trajectories (all increments zero)
  so the monitor doesn't bounce with the path sampling.
* "Crogging": each outer fold's model predicts its own held-out fold and
  the pooled predictions are scored once — every patient is scored exactly
  once, by the one model that never trained on them.
"""

import dataclasses
from dataclasses import dataclass
import json

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import model as mdl
from . import sde


class TrainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def balanced_mse(pred, target, sigma):
    """Balanced-MSE loss: squared error plus a log-partition repulsion term.

    ``mean_i [ (p_i - t_i)^2 / (2 s^2) + log sum_k exp(-(p_i - t_k)^2 / (2 s^2)) ]``

    The second term treats every target in the batch as a candidate match for
    every prediction, which counteracts regression-to-the-mean on imbalanced
    score distributions.  With all targets equal it degenerates to scaled MSE
    plus log(n).  ``pred`` may be a tape Var or a plain array; ``target`` is
    a plain 1-D array.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 1 or len(target) < 2:
        raise TrainError("balanced_mse needs a flat batch of >= 2 targets")
    if not (sigma > 0):
        raise TrainError(f"sigma must be positive, got {sigma}")
    m = len(target)
    c = -1.0 / (2.0 * sigma * sigma)
    resid = ad.add(pred, -target)
    sq = ad.scale(ad.reduce_mean(ad.square(resid)), -c)
    # pairwise (m, m) matrix pred_i - target_k via rank-1 products
    tmat = np.ones((m, 1)) @ target.reshape(1, m)
    pairs = ad.add(ad.matmul(ad.reshape(pred, (m, 1)), np.ones((1, m))), -tmat)
    lse = ad.reduce_mean(ad.log_sum_exp(ad.scale(ad.square(pairs), c), axis=1))
    return ad.add(sq, lse)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; skips (and counts) non-finite updates."""

    def __init__(self, tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.skipped = 0

    def step(self, tensors, grads):
        """Update tensors in place. Returns False if the step was skipped."""
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensors[k] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return True


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    patience: int = 20
    tune_epochs: int = 40        # epoch cap for inner tuning runs
    tune_patience: int = 10
    batch: int = 128
    lr_grid: tuple = (3e-3, 1e-2)
    sigma_grid: tuple = (0.5, 1.0)
    outer_folds: int = 4
    seed: int = 0
    solver_h: float = 2.0        # training lattice; the model default is 1.0
    samples: int = 30            # Monte Carlo paths for held-out predictions

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("lr_grid", "sigma_grid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def _design(records, arm_names):
    """Standardized input blocks + per-record targets, sliced by the loop."""
    index = {name: i for i, name in enumerate(arm_names)}
    missing = sorted({r.arm for r in records} - set(index))
    if missing:
        raise TrainError(f"records mention arms not in arm_names: {missing}")
    vols = np.stack([mdl.standardize_volume(r.volume) for r in records])
    tabs = mdl.standardize_tabular(np.stack([r.tabular for r in records]))
    arms = np.array([index[r.arm] for r in records], dtype=np.int64)
    visits = [(np.asarray(r.visit_weeks, float), np.asarray(r.visit_edss, float))
              for r in records]
    return vols, tabs, arms, visits


def _targets(visits, idx):
    """Union week grid + flat gather indices + target vector for a batch."""
    weeks = np.unique(np.concatenate([visits[i][0] for i in idx]))
    col = {w: j for j, w in enumerate(weeks)}
    rows, cols, y = [], [], []
    for b, i in enumerate(idx):
        for w, s in zip(*visits[i]):
            rows.append(b)
            cols.append(col[w])
            y.append(s)
    flat = np.asarray(rows, dtype=np.int64) * len(weeks) + np.asarray(cols)
    return weeks, flat, np.asarray(y, dtype=np.float64)


def _forward(params, spec, vols, tabs, arms, weeks, path_seed):
    """Forward pass to the (batch, n_weeks) trajectory block.

    ``params`` may be tape-bound Vars (training) or plain arrays (monitor);
    ``path_seed=None`` silences the diffusion instead of sampling it.
    """
    n = vols.shape[0]
    z0 = mdl.encode_baseline(params, spec, vols, tabs)
    s = mdl.onehot(arms, spec.n_arms)
    grid = sde.time_grid(0.0, weeks, spec.solver_h)
    if path_seed is None:
        path = sde.BrownianPath(seed=0, times=grid.times,
                                increments=np.zeros((grid.n_steps, n,
                                                     spec.latent)))
    else:
        path = sde.brownian_path(path_seed, grid, (n, spec.latent))
    return mdl.unroll(params, spec, z0, s, grid, path)


def _noise_free_mse(bundle, spec, design):
    """Monitor: per-patient MSE of the zero-diffusion trajectory, averaged."""
    vols, tabs, arms, visits = design
    n = len(visits)
    weeks, flat, y = _targets(visits, range(n))
    out = _forward(bundle.tensors, spec, vols, tabs, arms, weeks, None)
    err = (np.take(out.reshape(-1), flat) - y) ** 2
    rows = flat // len(weeks)
    per = np.bincount(rows, err, minlength=n) / np.bincount(rows, minlength=n)
    return float(per.mean())


# ---------------------------------------------------------------------------
# Single fit
# ---------------------------------------------------------------------------

def fit(train_records, val_records, spec, lr, sigma, cfg, arm_names,
        seed=0, epochs=None, patience=None, log=None):
    """Train one model; early-stop on noise-free validation MSE.

    ``arm_names`` is the trial's canonical arm order — record arm names map
    to one-hot indices through it, so it must match whatever order later
    counterfactual queries use.  Returns ``(bundle, history)``; the bundle
    holds the best-validation parameters (not the last ones) and its meta
    records the stopping point and the arm order.
    """
    train_records = dat.sanitize(train_records)
    val_records = dat.sanitize(val_records)
    if len(arm_names) != spec.n_arms:
        raise TrainError(f"spec expects {spec.n_arms} arms, "
                         f"got {len(arm_names)} names")
    if epochs is None:
        epochs = cfg.epochs
    if patience is None:
        patience = cfg.patience
    n = len(train_records)
    if n < 2:
        raise TrainError("need at least 2 training records")

    bundle = mdl.init_params(spec, seed=seed)
    bundle.meta["arm_names"] = list(arm_names)
    opt = Adam(bundle.tensors, lr=lr)
    vols, tabs, arms, visits = _design(train_records, arm_names)
    val_design = _design(val_records, arm_names)
    order_rng = np.random.default_rng((cfg.seed, seed, 0x0ED0))

    best = (np.inf, -1, None)       # (val mse, epoch, tensor snapshot)
    history = []
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        ep_loss, nb = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            if len(idx) < 2:        # balanced MSE needs a real batch
                continue
            weeks, flat, y = _targets(visits, idx)
            tape = ad.Tape()
            binding = bundle.bind(tape)
            path_seed = ((cfg.seed * 1_000_003 + seed * 8191
                          + epoch * 1009 + nb * 127) & 0x7FFFFFFF)
            out = _forward(binding, spec, vols[idx], tabs[idx], arms[idx],
                           weeks, path_seed)
            yh = ad.take(ad.reshape(out, (out.shape[0] * out.shape[1],)), flat)
            loss = balanced_mse(yh, y, sigma)
            grads = tape.backward(loss)
            opt.step(bundle.tensors,
                     {k: grads[v.idx] for k, v in binding.items()})
            ep_loss += float(loss.value)
            nb += 1

        val = _noise_free_mse(bundle, spec, val_design)
        history.append({"epoch": epoch, "loss": ep_loss / max(nb, 1),
                        "val_mse": val})
        if log:
            log(history[-1])
        if val < best[0] - 1e-9:
            best = (val, epoch,
                    {k: v.copy() for k, v in bundle.tensors.items()})
        elif epoch - best[1] >= patience:
            break

    if best[2] is not None:
        bundle.tensors.update(best[2])
    bundle.meta.update({"val_mse": best[0], "best_epoch": best[1],
                        "epochs_run": len(history),
                        "skipped_steps": opt.skipped,
                        "lr": lr, "sigma": sigma})
    return bundle, history


# ---------------------------------------------------------------------------
# Fold protocol
# ---------------------------------------------------------------------------

def make_folds(records, k, seed):
    """Stratified-by-arm folds: list of k sorted patient-id lists.

    Within each arm the ids are shuffled and dealt round-robin, so every fold
    holds (nearly) the same number of patients from every arm.
    """
    if k < 2:
        raise TrainError("need at least 2 folds")
    by_arm = {}
    for r in records:
        by_arm.setdefault(r.arm, []).append(r.patient_id)
    folds = [[] for _ in range(k)]
    rng = np.random.default_rng((seed, 0xF01D))
    for arm in sorted(by_arm):
        ids = np.sort(np.asarray(by_arm[arm]))
        rng.shuffle(ids)
        for j, pid in enumerate(ids):
            folds[j % k].append(int(pid))
    return [sorted(f) for f in folds]


@dataclass
class CvResult:
    config: TrainConfig
    arm_names: list                  # canonical arm order (one-hot indices)
    folds: list                      # fold -> sorted patient ids
    fold_of: dict                    # patient id -> outer fold index
    chosen: list                     # per fold: {"lr":, "sigma":, "score":}
    bundles: list                    # per fold: trained ParamBundle
    predictions: dict                # patient id -> TrajectoryPrediction
    inner_scores: list               # per fold: {"lr=..,sigma=..": mean mse}


def _predict_fold(bundle, spec, fold_records, cfg, arm_names, fold_index):
    """Factual Monte Carlo predictions for one held-out fold, batched per arm
    (one solver run per sample covers every patient in the arm group), then
    sliced back to each patient's own visit columns."""
    out = {}
    by_arm = {}
    for r in fold_records:
        by_arm.setdefault(r.arm, []).append(r)
    index = {name: i for i, name in enumerate(arm_names)}
    for arm in sorted(by_arm):
        rs = by_arm[arm]
        ai = index[arm]
        weeks = np.unique(np.concatenate(
            [np.asarray(r.visit_weeks, float) for r in rs]))
        pred = mdl.predict_trajectory(
            bundle, spec,
            np.stack([r.volume for r in rs]),
            np.stack([r.tabular for r in rs]),
            ai, weeks,
            seed=(cfg.seed * 2_000_003 + 977 * fold_index + ai) & 0x7FFFFFFF,
            samples=cfg.samples)
        col = {w: j for j, w in enumerate(weeks)}
        for i, r in enumerate(rs):
            c = np.asarray([col[w] for w in np.asarray(r.visit_weeks, float)])
            out[r.patient_id] = mdl.TrajectoryPrediction(
                arm_index=ai, weeks=weeks[c],
                samples=pred.samples[i:i + 1][:, :, c],
                mean=pred.mean[i:i + 1][:, c],
                variance=pred.variance[i:i + 1][:, c],
                seed=pred.seed)
    return out


def run_nested_cv(records, arm_names, spec=None, cfg=None, log=None):
    """Nested CV with crogging.

    Outer: stratified k folds; each in turn is the untouched test fold.
    Inner: the other three folds rotate 2-train/1-validate to score every
    (lr, sigma) grid point by mean noise-free validation MSE; the winner is
    refit on all three.  Every patient ends up with exactly one prediction,
    made by the one model that never trained on them.
    """
    cfg = cfg or TrainConfig()
    if spec is None:
        spec = mdl.ModelSpec(solver_h=cfg.solver_h, samples=cfg.samples)
    records = dat.sanitize(records)
    by_id = {r.patient_id: r for r in records}
    folds = make_folds(records, cfg.outer_folds, cfg.seed)
    fold_of = {pid: k for k, f in enumerate(folds) for pid in f}

    grid = [(lr, s) for lr in cfg.lr_grid for s in cfg.sigma_grid]
    chosen, bundles, inner_all = [], [], []
    predictions = {}
    for k in range(cfg.outer_folds):
        inner = [folds[j] for j in range(cfg.outer_folds) if j != k]
        mean_scores = {}
        for pair in grid:
            lr, sigma = pair
            vals = []
            for r in range(len(inner)):
                tr = [by_id[i] for j, f in enumerate(inner) if j != r
                      for i in f]
                va = [by_id[i] for i in inner[r]]
                b, _ = fit(tr, va, spec, lr, sigma, cfg, arm_names,
                           seed=cfg.seed + 17 * k + 3 * r,
                           epochs=cfg.tune_epochs,
                           patience=cfg.tune_patience, log=log)
                vals.append(b.meta["val_mse"])
            mean_scores[pair] = float(np.mean(vals))
        best_pair = min(grid, key=lambda p: mean_scores[p])  # grid-order ties
        inner_all.append({f"lr={p[0]},sigma={p[1]}": mean_scores[p]
                          for p in grid})
        chosen.append({"lr": best_pair[0], "sigma": best_pair[1],
                       "score": mean_scores[best_pair]})

        # Final refit on all three inner folds. The fold cyclically after
        # the test fold doubles as the early-stop monitor; it sits inside
        # the training data — the test fold stays untouched until now.
        monitor = [by_id[i] for i in folds[(k + 1) % cfg.outer_folds]]
        tr = [by_id[i] for f in inner for i in f]
        bundle, _ = fit(tr, monitor, spec, best_pair[0], best_pair[1], cfg,
                        arm_names, seed=cfg.seed + 101 + k, log=log)
        bundles.append(bundle)
        predictions.update(_predict_fold(
            bundle, spec, [by_id[i] for i in folds[k]], cfg, arm_names, k))
    return CvResult(cfg, list(arm_names), folds, fold_of, chosen, bundles,
                    predictions, inner_all)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def per_patient_mse(records, predictions):
    """patient id -> mean squared factual error over that patient's visits,
    scored on the Monte Carlo mean trajectory."""
    out = {}
    for r in records:
        p = predictions[r.patient_id]
        w = np.asarray(r.visit_weeks, float)
        if len(p.weeks) != len(w) or np.any(p.weeks != w):
            raise TrainError(f"prediction weeks for patient {r.patient_id} "
                             "do not match the record's visit weeks")
        out[r.patient_id] = float(np.mean((p.mean - r.visit_edss) ** 2))
    return out


def summarize_mse(per_patient):
    """(mean, standard error) across patients of a per-patient MSE dict."""
    v = np.asarray([per_patient[k] for k in sorted(per_patient)], float)
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def carry_forward_mse(records):
    """Baseline: predict the baseline score at every visit, forever."""
    b_idx = dat.TABULAR_FIELDS.index("baseline_edss")
    return {r.patient_id:
            float(np.mean((np.asarray(r.visit_edss) - r.tabular[b_idx]) ** 2))
            for r in records}


def binned_mse(records, predictions, bin_weeks=12, horizon=96):
    """Rows of (arm, bin_week, mse, n): squared errors pooled into 12-week
    visit bins per arm.  Visits outside (0, horizon + bin_weeks/2] are
    skipped and counted in the returned coverage dict."""
    hi = horizon + bin_weeks / 2
    cells = {}
    skipped = 0
    total = 0
    for r in records:
        p = predictions[r.patient_id]
        for w, y, yh in zip(r.visit_weeks, r.visit_edss, p.mean.reshape(-1)):
            total += 1
            if not 0 < w <= hi:
                skipped += 1
                continue
            b = int(min(np.ceil(w / bin_weeks), horizon // bin_weeks))
            cells.setdefault((r.arm, b * bin_weeks),
                             []).append((yh - y) ** 2)
    rows = [{"arm": a, "bin_week": b, "mse": float(np.mean(v)), "n": len(v)}
            for (a, b), v in sorted(cells.items())]
    coverage = {"visits": total, "scored": total - skipped, "skipped": skipped}
    return rows, coverage


def retention_curve(records, predictions, levels=(0.3, 0.5, 1.0)):
    """Normalized MSE when only the most-confident fraction is kept.

    Confidence is the time-averaged Monte Carlo variance of each patient's
    own predicted trajectory (lower variance = kept first).  The curve is
    normalized by the keep-everyone MSE, so its value at retention 1.0 is
    exactly 1.0 by construction.
    """
    levels = tuple(float(l) for l in levels)
    if 1.0 not in levels:
        raise TrainError("retention levels must include 1.0 (the normalizer)")
    if any(not 0 < l <= 1 for l in levels):
        raise TrainError("retention levels must lie in (0, 1]")
    per = per_patient_mse(records, predictions)
    ids = np.asarray(sorted(per))
    mse = np.asarray([per[i] for i in ids])
    conf = np.asarray([float(np.mean(predictions[i].variance)) for i in ids])
    order = np.lexsort((ids, conf))          # most confident first, id ties
    base = float(mse.mean())
    curve = {}
    for l in sorted(levels):
        keep = order[:int(np.ceil(l * len(ids)))]
        curve[l] = float(mse[keep].mean() / base) if l < 1.0 else 1.0
    return curve


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def save_metrics(prefix, records, result, levels=(0.3, 0.5, 1.0)):
    """Write <prefix>.csv (binned table), <prefix>.json (summary), and
    <prefix>.run.json (config echo + fold map).  Returns the summary dict."""
    records = dat.sanitize(records)
    per = per_patient_mse(records, result.predictions)
    mean, se = summarize_mse(per)
    cf_mean, cf_se = summarize_mse(carry_forward_mse(records))
    rows, coverage = binned_mse(records, result.predictions)
    curve = retention_curve(records, result.predictions, levels)

    with open(f"{prefix}.csv", "w", encoding="utf-8") as fh:
        fh.write("arm,bin_week,mse,n\n")
        for r in rows:
            fh.write(f"{r['arm']},{r['bin_week']},{r['mse']:.10f},{r['n']}\n")

    summary = {
        "factual_mse": mean, "factual_mse_se": se,
        "carry_forward_mse": cf_mean, "carry_forward_mse_se": cf_se,
        "relative_improvement": 1.0 - mean / cf_mean if cf_mean > 0 else 0.0,
        "retention_curve": {f"{k:g}": v for k, v in curve.items()},
        "coverage": coverage,
        "n_patients": len(records),
    }
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    run = {
        "train_config": result.config.to_dict(),
        "arm_names": result.arm_names,
        "folds": result.folds,
        "chosen": result.chosen,
        "inner_scores": result.inner_scores,
        "best_epochs": [b.meta.get("best_epoch") for b in result.bundles],
    }
    with open(f"{prefix}.run.json", "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
    return summary
