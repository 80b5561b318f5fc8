"""dpge: differentially private training of a small transformer encoder.

DP-SGD with per-example clipping and sharded accumulation, a Renyi-DP
accountant with noise calibration, gradient SNR telemetry and a benchmark of
per-sample gradient strategies.
"""

__version__ = "0.1.0"

from .accountant import (account, calibrate_sigma, compose, rdp_curve,  # noqa: E402
                         rdp_subsampled_gaussian, rdp_to_eps)
from .params import ModelConfig, ParamVector, init_params  # noqa: E402

__all__ = [
    "__version__",
    "account",
    "calibrate_sigma",
    "compose",
    "rdp_curve",
    "rdp_subsampled_gaussian",
    "rdp_to_eps",
    "ModelConfig",
    "ParamVector",
    "init_params",
]
