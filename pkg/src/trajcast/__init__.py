"""Treatment-conditioned neural SDE forecasting of disability trajectories.

The pipeline, end to end: encode a baseline brain volume and tabular
covariates into a latent state, evolve that state through a learned
stochastic differential equation conditioned on the assigned treatment
(Stratonovich convention, Euler-Heun solver), decode disability scores at
arbitrary follow-up weeks, and contrast arms under common random numbers to
estimate per-patient treatment effects with sampling-based uncertainty.
Everything runs on a hand-rolled reverse-mode tape over numpy — no
framework dependencies.

Layout: ``autodiff`` (tape + ops), ``sde`` (grids, Brownian paths, solver),
``nets`` (conv/MLP blocks and parameter bundles), ``model`` (the latent-SDE
forecaster), ``data`` (synthetic randomized cohorts with hidden
counterfactual ground truth), ``train`` (balanced-MSE fitting, nested CV,
metrics), ``causal`` (effect estimates, uplift, retention splits), ``cli``
(the ``trajcast`` command).
"""

from .autodiff import AutodiffError, Tape, grad_check
from .causal import (CausalError, RetentionSplit, ite_moments, pointwise_ite,
                     responder_split, trajectory_ite, uplift_scores,
                     uplift_uncertainty)
from .data import (Arm, CohortConfig, DataError, PatientRecord, default_arms,
                   generate_cohort, load_cohort, quantize_edss, sanitize,
                   save_cohort)
from .model import (ModelError, ModelSpec, TrajectoryPrediction, init_params,
                    load_predictions, patient_confidence, predict_noise_free,
                    predict_trajectory, save_predictions)
from .nets import ConvEncoderSpec, NetError, ParamBundle, load_params, save_params
from .sde import BrownianPath, SdeError, TimeGrid, brownian_path, solve, time_grid
from .train import (CvResult, TrainConfig, TrainError, balanced_mse,
                    carry_forward_mse, fit, make_folds, per_patient_mse,
                    retention_curve, run_nested_cv, save_metrics,
                    summarize_mse)

__version__ = "0.1.0"

__all__ = [
    "AutodiffError", "Tape", "grad_check",
    "CausalError", "RetentionSplit", "ite_moments", "pointwise_ite",
    "responder_split", "trajectory_ite", "uplift_scores",
    "uplift_uncertainty",
    "Arm", "CohortConfig", "DataError", "PatientRecord", "default_arms",
    "generate_cohort", "load_cohort", "quantize_edss", "sanitize",
    "save_cohort",
    "ModelError", "ModelSpec", "TrajectoryPrediction", "init_params",
    "load_predictions", "patient_confidence", "predict_noise_free",
    "predict_trajectory", "save_predictions",
    "ConvEncoderSpec", "NetError", "ParamBundle", "load_params",
    "save_params",
    "BrownianPath", "SdeError", "TimeGrid", "brownian_path", "solve",
    "time_grid",
    "CvResult", "TrainConfig", "TrainError", "balanced_mse",
    "carry_forward_mse", "fit", "make_folds", "per_patient_mse",
    "retention_curve", "run_nested_cv", "save_metrics", "summarize_mse",
    "__version__",
]
