"""The trajectory model: baseline encoders feeding a treatment-conditioned
latent SDE, decoded to disability scores.

A patient's baseline volume and tabular covariates are encoded once into the
initial latent state ``z0 = [volume code | tabular code]``.  The state then
evolves under drift and diffusion nets that see ``[z | arm one-hot]``, and a
decoder maps ``[z | arm one-hot]`` to a real-valued score at any grid time
(no clipping — snapping to the ordinal scale is a reporting concern).

Sampling-based prediction runs the solver ``samples`` times; the j-th sample
uses path seed ``base_seed XOR j``, so two arms predicted with the same base
seed share their noise paths sample-for-sample.  That pairing is what makes
per-sample treatment-effect differences meaningful (common random numbers):
path noise cancels in the difference instead of inflating its variance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .nets import ConvEncoderSpec, MlpSpec, ParamBundle
from .sde import TimeGrid, brownian_path, solve, time_grid

PRED_SCHEMA = "nsde-pred-1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Shape of the whole pipeline; everything downstream reads from this."""
    vol: ConvEncoderSpec = field(default_factory=ConvEncoderSpec)
    tab_sizes: tuple = (5, 16, 8)
    n_arms: int = 5
    hidden: int = 32
    solver_h: float = 1.0          # weeks
    diffusion_scale: float = 0.1
    samples: int = 30

    @property
    def latent(self) -> int:
        return self.vol.latent + self.tab_sizes[-1]

    def to_dict(self) -> dict:
        return {"vol": {"side": self.vol.side, "channels": list(self.vol.channels),
                        "latent": self.vol.latent},
                "tab_sizes": list(self.tab_sizes), "n_arms": self.n_arms,
                "hidden": self.hidden, "solver_h": self.solver_h,
                "diffusion_scale": self.diffusion_scale, "samples": self.samples}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        v = d["vol"]
        return cls(vol=ConvEncoderSpec(side=v["side"], channels=tuple(v["channels"]),
                                       latent=v["latent"]),
                   tab_sizes=tuple(d["tab_sizes"]), n_arms=d["n_arms"],
                   hidden=d["hidden"], solver_h=d["solver_h"],
                   diffusion_scale=d["diffusion_scale"], samples=d["samples"])


def init_params(spec: ModelSpec, seed: int) -> ParamBundle:
    """Fresh bundle: uniform +/-sqrt(6/(fan_in+fan_out)) weights, zero biases.

    Exception: the *final* layers of the drift and diffusion heads start at
    zero.  A generic Glorot drift has per-step gain above one, and compounding
    it over a ~100-step weekly unroll overflows the divergence guard before
    the first optimizer step; zeroing the output layer starts the latent flow
    at the identity (constant mild diffusion) and lets training grow the
    dynamics from there.
    """
    rng = np.random.default_rng(seed)
    t: dict = {}
    nets.init_conv_encoder(rng, "vol.", spec.vol, t)
    nets.init_mlp(rng, "tab.", MlpSpec(spec.tab_sizes), t)
    d = spec.latent
    io = d + spec.n_arms
    nets.init_mlp(rng, "drift.", MlpSpec((io, spec.hidden, d)), t)
    nets.init_mlp(rng, "diff.", MlpSpec((io, spec.hidden, d)), t)
    nets.init_mlp(rng, "dec.", MlpSpec((io, spec.hidden, 1)), t)
    t["drift.W1"] = np.zeros_like(t["drift.W1"])
    t["diff.W1"] = np.zeros_like(t["diff.W1"])
    return ParamBundle(tensors=t, meta={"model": spec.to_dict(), "init_seed": seed})


def jitter_params(bundle: ParamBundle, seed: int, rel: float = 0.1) -> ParamBundle:
    """Every tensor redrawn uniform at ``rel`` of its Glorot limit.

    Produces a fully-participating, numerically tame parameter point (no
    exact zeros, no exploding unroll) — the right place to finite-difference
    the whole pipeline, where the pristine init would leave the dynamics
    heads' inner layers with exactly-zero gradients.
    """
    rng = np.random.default_rng(seed)
    t = {}
    for k, v in bundle.tensors.items():
        if v.ndim == 2:
            lim = rel * np.sqrt(6.0 / (v.shape[0] + v.shape[1]))
        else:
            lim = rel * 0.5
        t[k] = rng.uniform(-lim, lim, size=v.shape)
    return ParamBundle(tensors=t, meta=dict(bundle.meta))


# fixed affine standardization; constants, not fitted, so no fold leakage
_TAB_SHIFT = np.array([40.0, 0.5, 3.0, 8.0, 3.0])
_TAB_SCALE = np.array([12.0, 0.5, 2.5, 6.0, 2.0])


def standardize_tabular(tabs: np.ndarray) -> np.ndarray:
    return (np.asarray(tabs, dtype=np.float64) - _TAB_SHIFT) / _TAB_SCALE


def standardize_volume(vols: np.ndarray) -> np.ndarray:
    return (np.asarray(vols, dtype=np.float64) - 0.12) / 0.20


def onehot(arm_idx, n_arms: int) -> np.ndarray:
    arm_idx = np.asarray(arm_idx, dtype=int)
    if np.any(arm_idx < 0) or np.any(arm_idx >= n_arms):
        raise ModelError(f"arm index out of range 0..{n_arms - 1}")
    out = np.zeros((arm_idx.size, n_arms))
    out[np.arange(arm_idx.size), arm_idx] = 1.0
    return out


def encode_baseline(params, spec: ModelSpec, vols, tabs):
    """(n, side^3) volumes + (n, 5) covariates -> (n, latent) initial state."""
    zv = nets.conv_encoder(params, spec.vol, vols, prefix="vol.")
    zt = nets.mlp(params, "tab.", tabs)
    return ad.concat([zv, zt], axis=1)


def drift(params, spec, z, s):
    return nets.mlp(params, "drift.", ad.concat([z, s], axis=1))


def diffusion(params, spec, z, s):
    raw = nets.mlp(params, "diff.", ad.concat([z, s], axis=1))
    return ad.scale(ad.softplus(raw), spec.diffusion_scale)


def decode(params, spec, z, s):
    return nets.mlp(params, "dec.", ad.concat([z, s], axis=1))


def unroll(params, spec: ModelSpec, z0, arm_block, grid: TimeGrid, path):
    """Integrate the latent SDE and decode at every grid output time.

    Returns the decoded scores stitched into an (n, n_out) block — a tape
    variable when the inputs are, plain numpy otherwise.
    """
    f = lambda z, s: drift(params, spec, z, s)
    g = lambda z, s: diffusion(params, spec, z, s)
    states = solve(f, g, z0, arm_block, grid, path)
    return ad.concat([decode(params, spec, z, arm_block) for z in states],
                     axis=1)


@dataclass
class TrajectoryPrediction:
    """Monte Carlo summary of one arm's predicted score trajectories."""
    arm_index: int
    weeks: np.ndarray        # (n_t,)
    samples: np.ndarray      # (n, J, n_t)
    mean: np.ndarray         # (n, n_t)
    variance: np.ndarray     # (n, n_t), unbiased across samples
    seed: int


def predict_trajectory(bundle: ParamBundle, spec: ModelSpec, vols, tabs,
                       arm_index: int, weeks, seed: int,
                       samples: int | None = None) -> TrajectoryPrediction:
    """Sample ``samples`` decoded trajectories under one arm for a batch.

    Parameters
    ----------
    bundle : ParamBundle
        Trained parameters (plain arrays; inference never builds a tape).
    vols, tabs : ndarray
        Raw (unstandardized) baseline blocks, (n, side^3) and (n, 5).
    arm_index : int
        Which arm to condition on — predictions are counterfactual by
        construction, any arm can be requested for any patient.
    weeks : array-like
        Strictly increasing output times (weeks > 0).
    seed : int
        Base path seed; sample j runs on seed ``seed XOR j``.  Reusing the
        base seed across arms pairs their noise paths (common random
        numbers), which the causal contrasts rely on.
    samples : int, optional
        Path count J >= 2; defaults to ``spec.samples``.
    """
    J = spec.samples if samples is None else int(samples)
    if J < 2:
        raise ModelError(f"need at least 2 path samples for moments, got {J}")
    params = bundle.tensors
    n = vols.shape[0]
    grid = time_grid(0.0, np.asarray(weeks, dtype=np.float64), spec.solver_h)
    z0 = encode_baseline(params, spec, standardize_volume(vols),
                         standardize_tabular(tabs))
    s = onehot(np.full(n, arm_index), spec.n_arms)
    out = np.empty((n, J, len(grid.out_index)))
    for j in range(1, J + 1):
        path = brownian_path(int(seed) ^ j, grid, (n, spec.latent))
        out[:, j - 1, :] = unroll(params, spec, z0, s, grid, path)
    mean = out.mean(axis=1)
    var = out.var(axis=1, ddof=1)
    return TrajectoryPrediction(arm_index=arm_index,
                                weeks=np.asarray(weeks, dtype=np.float64),
                                samples=out, mean=mean, variance=var,
                                seed=int(seed))


def predict_noise_free(bundle: ParamBundle, spec: ModelSpec, vols, tabs,
                       arm_index: int, weeks) -> np.ndarray:
    """Deterministic drift-only skeleton (all increments zero) -> (n, n_t).

    Cheap stand-in for the predictive mean; used as a validation monitor
    during training, never for reported uncertainty.
    """
    params = bundle.tensors
    n = vols.shape[0]
    grid = time_grid(0.0, np.asarray(weeks, dtype=np.float64), spec.solver_h)
    z0 = encode_baseline(params, spec, standardize_volume(vols),
                         standardize_tabular(tabs))
    s = onehot(np.full(n, arm_index), spec.n_arms)
    from .sde import BrownianPath
    silent = BrownianPath(seed=0, times=grid.times,
                          increments=np.zeros((grid.n_steps, n, spec.latent)))
    return unroll(params, spec, z0, s, grid, silent)


def patient_confidence(pred: TrajectoryPrediction) -> np.ndarray:
    """Time-averaged sample variance per patient; smaller = more confident."""
    return pred.variance.mean(axis=1)


# ---------------------------------------------------------------------------
# prediction export (JSONL)
# ---------------------------------------------------------------------------

def save_predictions(path, patient_ids, arm_name: str, pred: TrajectoryPrediction,
                     extra_meta: dict | None = None) -> None:
    """One meta line, then per-patient rows with samples, moments, confidence."""
    conf = patient_confidence(pred)
    with open(path, "w", encoding="utf-8") as fh:
        meta = {"schema": PRED_SCHEMA, "arm": arm_name,
                "arm_index": pred.arm_index, "seed": pred.seed,
                "samples": int(pred.samples.shape[1]),
                "weeks": pred.weeks.tolist(),
                "n_records": len(patient_ids)}
        meta.update(extra_meta or {})
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for i, pid in enumerate(patient_ids):
            fh.write(json.dumps({
                "patient_id": int(pid),
                "samples": np.round(pred.samples[i], 9).tolist(),
                "mean": np.round(pred.mean[i], 9).tolist(),
                "variance": np.round(pred.variance[i], 9).tolist(),
                "confidence": round(float(conf[i]), 9),
            }, sort_keys=True) + "\n")


def load_predictions(path):
    """Read a nsde-pred-1 file -> (meta, {patient_id: row dict})."""
    rows, meta, offset = {}, None, 0
    with open(path, "rb") as fh:
        blob = fh.read()
    for line in blob.split(b"\n"):
        if line.strip():
            try:
                obj = json.loads(line.decode("utf-8"))
            except (ValueError, UnicodeDecodeError) as e:
                raise ModelError(f"malformed prediction line at byte offset "
                                 f"{offset}: {e}") from None
            if meta is None:
                if obj.get("schema") != PRED_SCHEMA:
                    raise ModelError(f"unsupported prediction schema "
                                     f"{obj.get('schema')!r}")
                meta = obj
            else:
                rows[obj["patient_id"]] = obj
        offset += len(line) + 1
    if meta is None:
        raise ModelError("empty prediction file")
    if meta["n_records"] != len(rows):
        raise ModelError(f"metadata promises {meta['n_records']} rows, "
                         f"file holds {len(rows)}")
    return meta, rows
