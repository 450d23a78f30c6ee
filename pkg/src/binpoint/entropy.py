"""Numerical laboratory for the information-theoretic behaviour of binarized
features: entropy of sign-quantized channels, the entropy collapse induced by
max pooling over many points, and the training diagnostics built on them.

All entropies are in bits.  ``p_neg`` always denotes P(X < 0) of the
pre-pooling variable; the complementary sum over x >= 0 that appears in some
derivations is the same quantity written from the other side.
"""

from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numpy as np

from .binary import BitMatrix, unpack


class SampleError(ValueError):
    """Too few samples for an empirical estimate."""


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli(p) variable, with 0 * log 0 = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    if p == 0.0 or p == 1.0:
        return 0.0
    return float(-p * np.log2(p) - (1.0 - p) * np.log2(1.0 - p))


def maxpool_entropy(n: int, p_neg: float) -> float:
    """Entropy in bits of sign(max of n iid draws) given p_neg = P(X < 0).

    The pooled output is negative only when all n inputs are, so the
    negative-side mass is p_neg ** n.  Underflows to 0.0 for very large n,
    which is the limit the collapse theorem states.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p_neg <= 1.0:
        raise ValueError(f"probability {p_neg} outside [0, 1]")
    return binary_entropy(p_neg ** n)


def _maxpool_entropy_mp(n: int, p_neg) -> mpmath.mpf:
    """Arbitrary-precision twin of maxpool_entropy, for monotonicity checks
    far past float64 underflow."""
    p = mpmath.mpf(p_neg) ** n
    if p == 0 or p == 1:
        return mpmath.mpf(0)
    q = 1 - p
    return -(p * mpmath.log(p, 2) + q * mpmath.log(q, 2))


def verify_theorem1(p_neg: float, n_list: list[int]) -> tuple[int, bool]:
    """Locate where the pooled-sign entropy starts its strict decay.

    Returns ``(c, ok)``: ``c`` is the smallest count in ``n_list`` from which
    the entropy sequence is strictly decreasing, and ``ok`` confirms the tail
    really is strictly decreasing.  For p_neg >= 0.5 the decay starts at the
    first entry.  Computed at 80-digit precision so the comparison survives
    the deep underflow region (entropies below 1e-308).
    """
    if not 0.0 < p_neg < 1.0:
        raise ValueError("p_neg must lie strictly inside (0, 1)")
    if sorted(n_list) != list(n_list):
        raise ValueError("n_list must be ascending")
    with mpmath.workdps(80):
        values = [_maxpool_entropy_mp(n, p_neg) for n in n_list]
        peak = max(range(len(values)), key=lambda i: values[i])
        tail_ok = all(values[i] > values[i + 1] for i in range(peak, len(values) - 1))
    return n_list[peak], tail_ok


@dataclass
class EntropyReport:
    """Per-channel sign statistics of a set of binary feature vectors."""

    p_pos: np.ndarray          # per-channel empirical P(+1)
    entropy_bits: np.ndarray   # per-channel entropy
    mean_entropy: float
    sample_count: int
    context: str = ""


def measure_feature_entropy(features: BitMatrix, context: str = "",
                            clamp: bool = False) -> EntropyReport:
    """Empirical per-channel entropy of s binary feature vectors (s x c).

    ``clamp`` limits p to [1/(2s), 1 - 1/(2s)] for smoother reporting curves;
    leave it off when asserting on exactly degenerate channels.
    """
    s = features.rows
    if s < 2:
        raise SampleError(f"need at least 2 samples, got {s}")
    signs = unpack(features)
    p = (signs > 0).mean(axis=0)
    if clamp:
        p = np.clip(p, 1.0 / (2 * s), 1.0 - 1.0 / (2 * s))
    ent = np.array([binary_entropy(v) for v in p])
    return EntropyReport(
        p_pos=p,
        entropy_bits=ent,
        mean_entropy=float(ent.mean()),
        sample_count=s,
        context=context,
    )


def homogenization_score(pooled: np.ndarray) -> float:
    """Mean pairwise sign-agreement rate of the rows, in [0, 1].

    1.0 means every sample collapsed to the same sign pattern; independent
    fair-coin rows score about 0.5.  Only signs are compared because only
    signs survive the downstream binarizer.
    """
    pooled = np.asarray(pooled)
    s = pooled.shape[0]
    if s < 2:
        raise SampleError(f"need at least 2 rows, got {s}")
    signs = np.where(pooled >= 0.0, 1.0, -1.0)
    c = signs.shape[1]
    gram = signs @ signs.T
    agree = (gram + c) / (2.0 * c)
    upper = agree[np.triu_indices(s, k=1)]
    return float(upper.mean())


def ste_saturation_ratio(pre_activations: np.ndarray) -> float:
    """Fraction of elements with |x| >= 1, i.e. zero straight-through gradient."""
    x = np.asarray(pre_activations)
    if x.size == 0:
        return 0.0
    return float((np.abs(x) >= 1.0).mean())
