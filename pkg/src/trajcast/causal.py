"""Counterfactual contrasts between paired trajectory predictions.

Everything here is arithmetic on prediction objects that already share
their Brownian paths (same base seed): sample j under the treated arm is
paired with sample j under the reference arm, so differencing cancels the
path noise and leaves the treatment effect plus decoder disagreement.
The functions refuse unpaired inputs rather than silently producing
contrasts whose variance is dominated by noise mismatch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import TrajectoryPrediction, patient_confidence

TERCILE_LABELS = ("responder", "intermediate", "non_responder")


class CausalError(ValueError):
    pass


def _check_paired(pred_s: TrajectoryPrediction, pred_0: TrajectoryPrediction):
    if pred_s.samples.shape != pred_0.samples.shape:
        raise CausalError(f"prediction shapes differ: "
                          f"{pred_s.samples.shape} vs {pred_0.samples.shape}")
    if not np.array_equal(pred_s.weeks, pred_0.weeks):
        raise CausalError("predictions evaluate different week grids")
    if pred_s.seed != pred_0.seed:
        raise CausalError(
            f"predictions are not noise-paired: base seeds {pred_s.seed} != "
            f"{pred_0.seed}; contrasts need common random numbers")


def pointwise_ite(pred_s, pred_0) -> np.ndarray:
    """Per-sample, per-time effect: treated minus reference, (n, J, n_t)."""
    _check_paired(pred_s, pred_0)
    return pred_s.samples - pred_0.samples


def trajectory_ite(pointwise: np.ndarray, weeks,
                   normalization: str = "marks") -> np.ndarray:
    """Collapse the time axis of pointwise effects -> (n, J).

    ``marks`` (default) takes the arithmetic mean over the scheduled
    timepoints.  ``span`` divides the plain sum by the elapsed span
    ``t_k - t_0`` instead — the two differ by a constant factor
    (n_marks / span), so orderings are identical; span units are
    EDSS per week.
    """
    weeks = np.asarray(weeks, dtype=np.float64)
    if pointwise.shape[2] != len(weeks):
        raise CausalError(f"{pointwise.shape[2]} time slices vs "
                          f"{len(weeks)} weeks")
    if normalization == "marks":
        return pointwise.mean(axis=2)
    if normalization == "span":
        if weeks[-1] <= 0:
            raise CausalError("span normalization needs a positive horizon")
        return pointwise.sum(axis=2) / weeks[-1]
    raise CausalError(f"unknown normalization {normalization!r}")


def ite_moments(traj_ite: np.ndarray):
    """Mean and unbiased variance across path samples -> ((n,), (n,))."""
    if traj_ite.ndim != 2 or traj_ite.shape[1] < 2:
        raise CausalError("need an (n, J>=2) effect matrix")
    return traj_ite.mean(axis=1), traj_ite.var(axis=1, ddof=1)


def uplift_scores(pred_s, pred_0, baseline_edss) -> np.ndarray:
    """Difference in predicted EDSS change from baseline, treated - reference.

    Time-averaged over the prediction weeks.  Negative = the treatment
    slows accumulation.  Algebraically the baseline cancels and this equals
    the mean trajectory ITE; it is kept in change-from-baseline form because
    that is the quantity clinicians quote, and the identity is pinned by
    tests rather than assumed.
    """
    _check_paired(pred_s, pred_0)
    b0 = np.asarray(baseline_edss, dtype=np.float64)
    if b0.shape != (pred_s.samples.shape[0],):
        raise CausalError(f"baseline shape {b0.shape} vs "
                          f"{pred_s.samples.shape[0]} patients")
    change_s = pred_s.mean.mean(axis=1) - b0
    change_0 = pred_0.mean.mean(axis=1) - b0
    return change_s - change_0


def uplift_uncertainty(pred_s, pred_0) -> np.ndarray:
    """Sample variance of the trajectory effect; the filtering key."""
    ti = trajectory_ite(pointwise_ite(pred_s, pred_0), pred_s.weeks)
    return ite_moments(ti)[1]


@dataclass
class RetentionSplit:
    """Tercile assignment of the retained (most certain) patients."""
    retention: float
    patient_ids: np.ndarray   # retained ids, most certain first
    uplift: np.ndarray
    uncertainty: np.ndarray
    tercile: list             # label per retained patient


def responder_split(patient_ids, uplift, uncertainty,
                    retention: float) -> RetentionSplit:
    """Keep the most certain fraction, then cut the kept into uplift terciles.

    Retention keeps ``ceil(retention * n)`` patients with the smallest
    uncertainty.  Terciles order by uplift ascending, so the first third —
    the most negative uplift, the strongest predicted slowing — are the
    responders.  All orderings break ties by ascending patient id, which
    makes splits reproducible run to run.
    """
    if not 0.0 < retention <= 1.0:
        raise CausalError(f"retention must be in (0, 1], got {retention}")
    ids = np.asarray(patient_ids)
    uplift = np.asarray(uplift, dtype=np.float64)
    unc = np.asarray(uncertainty, dtype=np.float64)
    if not (len(ids) == len(uplift) == len(unc)):
        raise CausalError("ids, uplift, uncertainty lengths differ")
    n_keep = max(1, int(np.ceil(retention * len(ids))))
    keep = np.lexsort((ids, unc))[:n_keep]
    ids_k, up_k, unc_k = ids[keep], uplift[keep], unc[keep]
    order = np.lexsort((ids_k, up_k))
    cut1 = int(np.ceil(n_keep / 3))
    cut2 = int(np.ceil(2 * n_keep / 3))
    labels = [""] * n_keep
    for rank, pos in enumerate(order):
        if rank < cut1:
            labels[pos] = TERCILE_LABELS[0]
        elif rank < cut2:
            labels[pos] = TERCILE_LABELS[1]
        else:
            labels[pos] = TERCILE_LABELS[2]
    return RetentionSplit(retention=retention, patient_ids=ids_k,
                          uplift=up_k, uncertainty=unc_k, tercile=labels)


def save_uplift_csv(path, arm_name: str, splits) -> None:
    """Stack one or more retention splits into the uplift report CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "arm", "uplift", "confidence",
                    "tercile", "retention_level"])
        for split in splits:
            for i in range(len(split.patient_ids)):
                w.writerow([int(split.patient_ids[i]), arm_name,
                            f"{split.uplift[i]:.9g}",
                            f"{split.uncertainty[i]:.9g}",
                            split.tercile[i],
                            f"{split.retention:g}"])
