"""Entropy-maximizing aggregation: a constant pre-pooling offset chosen so the
binarized aggregate has maximal information entropy.

For max pooling over n standard-normal values the offset solves
P(max >= delta) = 0.5, i.e. delta = Phi^-1(0.5^(1/n)): the closed form of the
entropy objective's optimum, and also exactly the quantile targeted by the
Monte Carlo median-of-maxima simulation kept here as the sampling route.
For average pooling the optimal offset is 0 for every n, which is what makes
it the flexible choice under varying point counts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .autodiff import Tensor, segment_pool, shift

logger = logging.getLogger(__name__)

AGGREGATION_KINDS = ("max", "avg", "ema-max", "ema-avg")

_MC_GROUP_CHUNK = 20_000_000  # cap scratch draws per chunk


def solve_delta_max_cf(n: int) -> float:
    """Closed-form offset for max pooling: Phi^-1(0.5^(1/n))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return float(ndtri(0.5 ** (1.0 / n)))


def solve_delta_max_mc(n: int, mc_samples: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo offset for max pooling: median of maxima of n-point groups.

    Draws ``mc_samples`` groups of n iid N(0,1) values and returns the sample
    median of the group maxima; the median is the point where the sign split
    of the pooled output balances.  Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mc_samples < 1000:
        raise ValueError("mc_samples must be >= 1000")
    rng = np.random.default_rng(seed)
    maxima = np.empty(mc_samples, dtype=np.float64)
    groups_per_chunk = max(1, _MC_GROUP_CHUNK // n)
    done = 0
    while done < mc_samples:
        count = min(groups_per_chunk, mc_samples - done)
        maxima[done : done + count] = rng.standard_normal((count, n)).max(axis=1)
        done += count
    return float(np.median(maxima))


@dataclass
class EMAConfig:
    """Aggregation kind, expected point count, and the resolved offset.

    The offset is fixed at construction ("resolve"), not re-estimated per
    batch; plain and avg kinds always carry delta = 0.
    """

    kind: str
    n: int
    delta: float = 0.0
    mc_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AGGREGATION_KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("point count must be >= 1")
        if self.kind != "ema-max" and self.delta != 0.0:
            raise ValueError(f"{self.kind} aggregation requires delta == 0")
        if self.kind == "ema-max" and self.delta < 0.0:
            raise ValueError("ema-max offset must be non-negative")

    @classmethod
    def resolve(cls, kind: str, n: int, solver: str = "cf",
                mc_samples: int = 100_000, seed: int = 0) -> "EMAConfig":
        """Build a config with the offset solved for the given point count.

        The closed form is the default; ``solver="mc"`` runs the sampling
        estimate instead.
        """
        if kind == "ema-max":
            if solver == "cf":
                delta = solve_delta_max_cf(n)
            elif solver == "mc":
                delta = solve_delta_max_mc(n, mc_samples=mc_samples, seed=seed)
            else:
                raise ValueError(f"unknown solver {solver!r}")
        else:
            delta = 0.0
        return cls(kind=kind, n=n, delta=delta, mc_samples=mc_samples, seed=seed)

    @property
    def pool_kind(self) -> str:
        return "max" if self.kind in ("max", "ema-max") else "avg"


def ema_forward(x: Tensor, cfg: EMAConfig) -> Tensor:
    """Shift by -delta then pool all rows to 1 x c (gradient as in pooling)."""
    return ema_segment_forward(x, cfg, x.data.shape[0])


def ema_segment_forward(x: Tensor, cfg: EMAConfig, segment_size: int) -> Tensor:
    """Batched variant: pool each consecutive block of ``segment_size`` rows."""
    if segment_size != cfg.n:
        logger.warning(
            "aggregating %d points with offset solved for n=%d; "
            "ema-avg is the point-count-independent alternative",
            segment_size, cfg.n,
        )
    shifted = shift(x, -cfg.delta) if cfg.delta != 0.0 else x
    return segment_pool(shifted, segment_size, cfg.pool_kind)
