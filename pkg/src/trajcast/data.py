"""Synthetic randomized cohorts with known counterfactual trajectories.

Each patient carries a baseline volume, five tabular covariates, an assigned
arm, and jittered follow-up visits with quantized disability scores.  The
generator also records what no real trial can: the patient's potential
trajectory under *every* arm, built from one shared noise path so the
per-patient treatment effect is exactly the slope reduction and nothing
else.  Those counterfactuals live in a ``hidden`` field that the sanitized
view strips — model code sees only what a trial would measure, evaluation
code gets the ground truth.

Design notes that matter downstream:

* Visits land on integer weeks (12-weekly marks plus a small jitter drawn on
  a coarse lattice), so any batch's union time grid stays short: with the
  default 2-week jitter quantum every visit is an even week and a 2-week
  solver step never needs refinement between visits.
* Visit noise is an OU process whose scale is largest in the low range of
  the disability scale, where the score is assembled from functional-system
  exams, and decays once ambulation milestones anchor it.  Prediction
  difficulty therefore varies across patients in a way a trained model can
  pick up, which is what makes confidence-based retention curves
  informative.
* Treatment response is heterogeneous: a responsiveness gate driven partly
  by a factor rendered only into the volume (blob extent), so images carry
  signal the tabular covariates do not.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA = "synthrct-1"
TABULAR_FIELDS = ("age", "sex", "fss", "lesion_volume", "baseline_edss")


class DataError(ValueError):
    """Bad configuration or a file that does not parse as a cohort."""


def quantize_edss(x):
    """Snap to the half-point disability scale on [0, 10].

    Ties at x.25 / x.75 round half-up (1.25 -> 1.5, 1.75 -> 2.0).
    """
    q = np.floor(np.asarray(x, dtype=np.float64) * 2.0 + 0.5) / 2.0
    return np.clip(q, 0.0, 10.0)


@dataclass(frozen=True)
class Arm:
    name: str
    effect: float = 0.0             # fractional slope reduction for responders
    responder_fraction: float = 0.5


def default_arms():
    return (Arm("placebo_a"), Arm("placebo_b"),
            Arm("drug_high", effect=0.9, responder_fraction=0.55),
            Arm("drug_mid", effect=0.5, responder_fraction=0.5),
            Arm("drug_null", effect=0.0))


@dataclass
class CohortConfig:
    n_per_arm: int = 150
    seed: int = 0
    arms: tuple = field(default_factory=default_arms)
    horizon: int = 96               # weeks
    visit_every: int = 12
    jitter: int = 2                 # max |weeks| a visit strays from its mark
    jitter_step: int = 2            # jitter granularity (2 keeps visits on an
                                    # even-week lattice -> cheap union grids)
    dropout: float = 0.15
    side: int = 8                   # volume is side^3, single channel
    noise_base: float = 0.05        # OU innovation sd floor
    noise_low: float = 0.16         # extra innovation sd at low-range scores

    @property
    def marks(self) -> np.ndarray:
        """Scheduled follow-up weeks: 12, 24, ..., horizon."""
        return np.arange(self.visit_every, self.horizon + 1, self.visit_every,
                         dtype=np.float64)

    @property
    def arm_names(self) -> list:
        return [a.name for a in self.arms]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arms"] = [dataclasses.asdict(a) for a in self.arms]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        d["arms"] = tuple(Arm(**a) for a in d.get("arms", ()))
        return cls(**d)


@dataclass
class PatientRecord:
    patient_id: int
    arm: str
    tabular: np.ndarray      # (5,) per TABULAR_FIELDS
    volume: np.ndarray       # (side^3,) in [0, 1]
    visit_weeks: np.ndarray  # integer-valued, strictly increasing, in (0, horizon]
    visit_edss: np.ndarray   # quantized scores at the visits
    hidden: dict | None = None


def sanitize(records) -> list:
    """Strip counterfactual ground truth; what model code is allowed to see."""
    return [dataclasses.replace(r, hidden=None) for r in records]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _render_volume(rng, side, sev, lesion_unit, brain_load):
    ax = np.arange(side, dtype=np.float64)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    vol = rng.normal(0.10, 0.02, size=(side, side, side))

    def blob(center, radius, amp):
        d2 = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2
        return amp * np.exp(-d2 / (2.0 * radius ** 2))

    mid = (side - 1) / 2.0
    c1 = mid + rng.uniform(-0.8, 0.8, size=3)
    vol += blob(c1, 0.9 + 1.6 * brain_load, 0.35 + 0.40 * lesion_unit)
    c2 = rng.uniform(1.5, side - 2.5, size=3)
    vol += blob(c2, 1.1, 0.10 + 0.25 * sev)
    return np.clip(vol, 0.0, 1.0).ravel()


def _ou_path(rng, n, theta, sd):
    eta = np.zeros(n)
    shocks = rng.standard_normal(n - 1) * sd
    for w in range(1, n):
        eta[w] = eta[w - 1] * (1.0 - theta) + shocks[w - 1]
    return eta


def generate_cohort(config: CohortConfig) -> list:
    """Draw the full cohort; deterministic in ``config.seed``.

    Patient ``k`` uses its own random substream, so the same patient id
    reproduces bit-identically regardless of cohort size.
    """
    if config.n_per_arm < 1 or len(config.arms) < 1:
        raise DataError("need at least one arm and one patient per arm")
    names = config.arm_names
    if len(set(names)) != len(names):
        raise DataError(f"duplicate arm names in {names}")
    n_total = config.n_per_arm * len(names)
    # block randomization: exactly n_per_arm per arm, order shuffled
    assign = np.repeat(np.arange(len(names)), config.n_per_arm)
    np.random.default_rng((config.seed, 0xA5516)).shuffle(assign)

    weeks = np.arange(config.horizon + 1, dtype=np.float64)
    marks = config.marks
    mark_frac = marks.mean() / config.horizon
    records = []
    for pid in range(n_total):
        rng = np.random.default_rng((config.seed, pid + 1))
        sev = rng.beta(2.0, 2.0)
        age = rng.uniform(25.0, 55.0)
        sex = float(rng.random() < 0.55)
        brain_load = rng.uniform(0.0, 1.0)
        lesion_z = rng.normal(0.0, 1.0)
        lesion_volume = float(np.exp(1.9 + 0.5 * lesion_z))
        lesion_unit = float(np.clip((lesion_z + 2.0) / 4.0, 0.0, 1.0))
        fss = float(np.clip(1.2 + 4.0 * sev + rng.normal(0.0, 0.4), 0.0, 8.0))
        b0 = float(quantize_edss(1.0 + 4.2 * sev + 0.3 * np.clip(lesion_z, -2, 2)
                                 + rng.normal(0.0, 0.4)))
        b0 = min(b0, 6.5)
        slope = float(np.clip(0.25 + 1.9 * sev + 0.30 * np.clip(lesion_z, -2, 2)
                              + 0.55 * (brain_load - 0.5)
                              + 0.18 * rng.normal(), 0.05, 3.4))
        resp_score = 0.55 * brain_load + 0.45 * lesion_unit
        # Low-range scores are assembled from functional-system exams and
        # rescore poorly; once ambulation anchors the scale the score is
        # stable.  Key the noise to the patient's typical on-study score.
        midscore = b0 + 0.5 * slope
        noise_sd = config.noise_base + config.noise_low * float(
            1.0 / (1.0 + np.exp((midscore - 3.5) / 0.8)))
        eta = _ou_path(rng, config.horizon + 1, theta=0.06, sd=noise_sd)

        potential, true_ite = {}, {}
        for arm in config.arms:
            gate = 1.0 / (1.0 + np.exp(-10.0 * (resp_score -
                                                (1.0 - arm.responder_fraction))))
            rate = slope * (1.0 - arm.effect * gate)
            traj = np.round(b0 + rate * weeks / config.horizon + eta, 6)
            potential[arm.name] = traj
        ref = potential[names[0]]
        midx = marks.astype(int)
        for name in names:
            true_ite[name] = float(np.mean(potential[name][midx] - ref[midx]))

        kept = marks[rng.random(len(marks)) >= config.dropout]
        if len(kept) == 0:
            kept = marks[[rng.integers(len(marks))]]
        steps = np.arange(-config.jitter, config.jitter + 1, config.jitter_step)
        jit = steps[rng.integers(len(steps), size=len(kept))]
        visits = np.unique(np.clip(kept + jit, 1, config.horizon))
        arm_name = names[assign[pid]]
        scores = quantize_edss(potential[arm_name][visits.astype(int)])

        vol = np.round(_render_volume(rng, config.side, sev, lesion_unit,
                                      brain_load), 5)
        records.append(PatientRecord(
            patient_id=pid,
            arm=arm_name,
            tabular=np.array([round(age, 1), sex, round(fss, 2),
                              round(lesion_volume, 2), b0]),
            volume=vol,
            visit_weeks=visits,
            visit_edss=scores,
            hidden={
                "severity": round(sev, 6),
                "brain_load": round(brain_load, 6),
                "slope": round(slope, 6),
                "responsiveness": {a.name: round(float(
                    1.0 / (1.0 + np.exp(-10.0 * (resp_score -
                                                 (1.0 - a.responder_fraction))))), 6)
                    for a in config.arms},
                "noise_sd": round(float(noise_sd), 6),
                "potential": {k: v.tolist() for k, v in potential.items()},
                "true_ite": true_ite,
            }))
    return records


# ---------------------------------------------------------------------------
# JSONL wire format
# ---------------------------------------------------------------------------

def save_cohort(path, records, config: CohortConfig) -> None:
    """Write metadata line then one record per line (schema synthrct-1)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": SCHEMA, "n_records": len(records),
                             "config": config.to_dict()},
                            sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps({
                "patient_id": r.patient_id,
                "arm": r.arm,
                "tabular": {k: v for k, v in zip(TABULAR_FIELDS, r.tabular)},
                "volume": r.volume.tolist(),
                "visit_weeks": [int(w) for w in r.visit_weeks],
                "visit_edss": r.visit_edss.tolist(),
                "hidden": r.hidden,
            }, sort_keys=True) + "\n")


def load_cohort(path):
    """Read a synthrct-1 file -> (records, metadata dict).

    Raises
    ------
    DataError
        If the schema tag is missing/foreign, or a line fails to parse —
        the message names the byte offset where the bad line starts.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    records, meta, offset = [], None, 0
    for line in blob.split(b"\n"):
        if line.strip():
            try:
                obj = json.loads(line.decode("utf-8"))
            except (ValueError, UnicodeDecodeError) as e:
                raise DataError(f"malformed cohort line at byte offset "
                                f"{offset}: {e}") from None
            if meta is None:
                if obj.get("schema") != SCHEMA:
                    raise DataError(f"unsupported schema {obj.get('schema')!r}; "
                                    f"expected {SCHEMA!r}")
                meta = obj
            else:
                try:
                    records.append(PatientRecord(
                        patient_id=int(obj["patient_id"]),
                        arm=obj["arm"],
                        tabular=np.array([float(obj["tabular"][k])
                                          for k in TABULAR_FIELDS]),
                        volume=np.asarray(obj["volume"], dtype=np.float64),
                        visit_weeks=np.asarray(obj["visit_weeks"],
                                               dtype=np.float64),
                        visit_edss=np.asarray(obj["visit_edss"],
                                              dtype=np.float64),
                        hidden=obj.get("hidden"),
                    ))
                except (KeyError, TypeError) as e:
                    raise DataError(f"incomplete record at byte offset "
                                    f"{offset}: {e}") from None
        offset += len(line) + 1
    if meta is None:
        raise DataError("empty cohort file: no metadata line")
    if meta["n_records"] != len(records):
        raise DataError(f"metadata promises {meta['n_records']} records, "
                        f"file holds {len(records)}")
    return records, meta
