"""Binarized point-cloud networks.

Training with straight-through-estimator binarization, entropy-maximizing
aggregation, and layer-wise scale recovery; inference with bit-packed
XNOR+popcount kernels; plus a numerical laboratory for the underlying
information-theoretic behaviour.
"""

from .aggregation import EMAConfig, ema_forward, solve_delta_max_cf, solve_delta_max_mc
from .autodiff import Tensor, backward
from .binary import BiLinearLayer, BitMatrix, lsr_init, pack, sign_ste, unpack, xnor_gemm
from .entropy import (
    EntropyReport,
    binary_entropy,
    homogenization_score,
    maxpool_entropy,
    measure_feature_entropy,
    ste_saturation_ratio,
    verify_theorem1,
)

__version__ = "0.1.0"

__all__ = [
    "BiLinearLayer",
    "BitMatrix",
    "EMAConfig",
    "EntropyReport",
    "Tensor",
    "backward",
    "binary_entropy",
    "ema_forward",
    "homogenization_score",
    "lsr_init",
    "maxpool_entropy",
    "measure_feature_entropy",
    "pack",
    "sign_ste",
    "solve_delta_max_cf",
    "solve_delta_max_mc",
    "ste_saturation_ratio",
    "unpack",
    "verify_theorem1",
    "xnor_gemm",
]
