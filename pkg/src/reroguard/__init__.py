"""Reconstruction-robustness bounds and matching attacks for DP-SGD."""

__version__ = "0.1.0"

from .accountant import (  # noqa: E402
    PrivacyParams,
    RdpCurve,
    approx_epsilon,
    calibrate_sigma,
    epsilon_from_rdp,
    rdp_full_batch,
    rdp_subsampled,
)
from .bounds import (  # noqa: E402
    BoundEstimate,
    PriorSpec,
    estimate_gamma,
    gamma_closed_form_fullbatch,
    guo_mse_lower_bound,
    kappa_discrete,
    kappa_from_samples,
    log_mixture_ratio,
    rero_from_rdp,
    rero_fullbatch_rdp_closed,
)
from .errors import BracketExhaustedError, InvalidParameterError, ReroError, UnstableOrderError  # noqa: E402

__all__ = [
    "BoundEstimate",
    "BracketExhaustedError",
    "InvalidParameterError",
    "PriorSpec",
    "PrivacyParams",
    "RdpCurve",
    "ReroError",
    "UnstableOrderError",
    "approx_epsilon",
    "calibrate_sigma",
    "epsilon_from_rdp",
    "estimate_gamma",
    "gamma_closed_form_fullbatch",
    "guo_mse_lower_bound",
    "kappa_discrete",
    "kappa_from_samples",
    "log_mixture_ratio",
    "rdp_full_batch",
    "rdp_subsampled",
    "rero_from_rdp",
    "rero_fullbatch_rdp_closed",
]
