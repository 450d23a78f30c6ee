"""Deployment transformations: batch-norm folding, recovery-scale merging,
hardtanh elision, post-hoc quantization of the boundary layers, and the
storage accounting for the resulting artifacts.

Variants:
  a  float model, every BN folded into its adjacent linear layer
  b  middle layers bit-packed, BN kept with the recovery scale merged in,
     hardtanh dropped wherever the consumer re-binarizes anyway
  c  (b) plus a post-hoc binarized classifier output
  d  (b) plus a post-hoc binarized input layer
  e  both boundary layers binarized
  f  deployment of a BN-free training graph; recovery scales are dropped
     wherever only the sign of the output survives downstream

A hardtanh is removable exactly when the next consumer is a sign (the clamp
cannot change the sign); a recovery scale is removable exactly when the path
to the next sign is scale-equivariant and offset-free, which rules out the
stage feeding a shifted max aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binary import BitMatrix, InitializationError, hard_sign, pack, xnor_gemm_packed
from .models import BNLayer, FPLinear, Model, ModelSpec, Stage

DEPLOY_VARIANTS = ("a", "b", "c", "d", "e", "f")
HEADER_BYTES = 64  # fixed per-file overhead assumed by the storage accounting


class ConfigurationError(ValueError):
    """Variant incompatible with how the model was trained."""


# ---------------------------------------------------------------------------
# deploy-graph ops
# ---------------------------------------------------------------------------

@dataclass
class DLinear:
    weight: np.ndarray
    bias: np.ndarray | None

    def __call__(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


@dataclass
class DBinLinear:
    packed_wt: BitMatrix  # k x m, transposed so both operands stream row-wise
    in_features: int
    alpha: float | None  # None when folded into the following BN

    def __call__(self, x):
        ints = xnor_gemm_packed(pack(hard_sign(x)), self.packed_wt, self.in_features)
        return ints * self.alpha if self.alpha is not None else ints.astype(np.float64)


@dataclass
class DBatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float

    def __call__(self, x):
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return x * scale + (self.beta - self.running_mean * scale)


@dataclass
class DActivation:
    kind: str  # "relu" | "hardtanh"

    def __call__(self, x):
        return np.maximum(x, 0.0) if self.kind == "relu" else np.clip(x, -1.0, 1.0)


@dataclass
class DAggregate:
    kind: str  # "max" | "avg"
    delta: float
    n: int

    def __call__(self, x):
        blocks = (x - self.delta).reshape(-1, self.n, x.shape[1])
        return blocks.max(axis=1) if self.kind == "max" else blocks.mean(axis=1)


class DeployModel:
    """Flat op list over plain ndarrays; immutable and thread-safe."""

    def __init__(self, spec: ModelSpec, variant: str, ops: list):
        self.spec = spec
        self.variant = variant
        self.ops = ops

    def forward(self, clouds: np.ndarray) -> np.ndarray:
        clouds = np.asarray(clouds, dtype=np.float64)
        x = clouds.reshape(-1, 3)
        for op in self.ops:
            x = op(x)
        return x

    def predict(self, clouds: np.ndarray) -> np.ndarray:
        return self.forward(clouds).argmax(axis=1)


# ---------------------------------------------------------------------------
# folding helpers
# ---------------------------------------------------------------------------

def fold_bn_into_linear(weight: np.ndarray, bias: np.ndarray | None, bn: BNLayer,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Absorb y = BN(x @ W + b) into a single affine layer, exactly."""
    scale = bn.gamma.data / np.sqrt(bn.state.running_var + bn.state.eps)
    b = bias if bias is not None else np.zeros(weight.shape[1])
    return weight * scale[None, :], (b - bn.state.running_mean) * scale + bn.beta.data


def _bn_with_alpha(bn: BNLayer, alpha: float) -> DBatchNorm:
    """BN(alpha * z) as a BN over z: the scale merges into gamma and the mean."""
    return DBatchNorm(
        gamma=bn.gamma.data * alpha,
        beta=bn.beta.data.copy(),
        running_mean=bn.state.running_mean / alpha,
        running_var=bn.state.running_var.copy(),
        eps=bn.state.eps,
    )


def _binarize_fp_layer(weight: np.ndarray) -> tuple[BitMatrix, float]:
    """Post-hoc quantization of a float layer: packed signs plus one scale."""
    signs = hard_sign(weight)
    denom = signs.std()
    if denom == 0.0:
        raise InitializationError("cannot binarize a constant-sign weight matrix")
    return pack(signs.T), float(weight.std() / denom)


def _round_f32(model: DeployModel) -> DeployModel:
    """Quantize every float payload to exactly f32-representable values, so a
    checkpoint round trip reproduces identical outputs."""
    def r(a):
        return a.astype(np.float32).astype(np.float64) if a is not None else None

    for op in model.ops:
        if isinstance(op, DLinear):
            op.weight, op.bias = r(op.weight), r(op.bias)
        elif isinstance(op, DBatchNorm):
            op.gamma, op.beta = r(op.gamma), r(op.beta)
            op.running_mean, op.running_var = r(op.running_mean), r(op.running_var)
        elif isinstance(op, DBinLinear) and op.alpha is not None:
            op.alpha = float(np.float32(op.alpha))
        elif isinstance(op, DAggregate):
            op.delta = float(np.float32(op.delta))
    return model


# ---------------------------------------------------------------------------
# the transformation itself
# ---------------------------------------------------------------------------

def apply_deployment(model: Model, variant: str, float32: bool = True) -> DeployModel:
    """Turn a trained model into its deployment graph for the given variant.

    ``float32`` rounds all float payloads to f32 (the checkpoint precision);
    disable it to verify the folding algebra at full f64 precision.
    """
    spec = model.spec
    if variant not in DEPLOY_VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    if variant == "a":
        if spec.middle_binarized:
            raise ConfigurationError("variant (a) is the float deployment; model is binarized")
        if spec.bn_mode != "kept":
            raise ConfigurationError("variant (a) folds BN; model trained without it")
    else:
        if not spec.middle_binarized:
            raise ConfigurationError(f"variant ({variant}) deploys a binarized model")
        needs_bn = variant in ("b", "c", "d", "e")
        if needs_bn and spec.bn_mode != "kept":
            raise ConfigurationError(f"variant ({variant}) requires batch norm, "
                                     "but the model was trained without it")
        if variant == "f" and spec.bn_mode != "dropped":
            raise ConfigurationError("variant (f) deploys a BN-free training graph")
    if spec.use_tnet:
        raise ConfigurationError("deployment variants cover the plain classifier only")

    binarize_first = variant in ("d", "e")
    binarize_last = variant in ("c", "e")

    stages = list(model.trunk) + ["AGG"] + list(model.head)
    ops: list = []
    for idx, stage in enumerate(stages):
        if stage == "AGG":
            ops.append(DAggregate(kind=model.aggregation.pool_kind,
                                  delta=model.aggregation.delta,
                                  n=spec.n_points))
            continue

        nxt = stages[idx + 1] if idx + 1 < len(stages) else None
        # a following bi-linear layer re-binarizes; so does a plain (delta=0)
        # max/avg aggregation followed by one
        consumer_is_sign = (isinstance(nxt, Stage) and nxt.binarized) or (
            nxt == "AGG"
            and model.aggregation.delta == 0.0
            and isinstance(stages[idx + 2], Stage)
            and stages[idx + 2].binarized
        )
        feeds_shifted_agg = nxt == "AGG" and model.aggregation.delta != 0.0

        is_first, is_last = idx == 0, idx == len(stages) - 1

        if isinstance(stage.layer, FPLinear) and not (
            (is_first and binarize_first) or (is_last and binarize_last)
        ):
            weight = stage.layer.weight.data
            bias = stage.layer.bias.data if stage.layer.bias is not None else None
            if variant == "a" and stage.bn is not None:
                weight, bias = fold_bn_into_linear(weight, bias, stage.bn)
                ops.append(DLinear(weight=weight.copy(), bias=bias.copy()))
            else:
                ops.append(DLinear(weight=weight.copy(),
                                   bias=None if bias is None else bias.copy()))
                if stage.bn is not None:
                    ops.append(_bn_with_alpha(stage.bn, 1.0))
        else:
            if isinstance(stage.layer, FPLinear):  # post-hoc boundary quantization
                packed_wt, alpha = _binarize_fp_layer(stage.layer.weight.data)
                in_features = stage.layer.weight.data.shape[0]
            else:
                layer = stage.layer
                packed_wt = pack(hard_sign(layer.latent_w.data).T)
                alpha = float(layer.alpha.data)
                in_features = layer.in_features
            next_is_sign_only = consumer_is_sign and not feeds_shifted_agg
            if variant == "f" and next_is_sign_only:
                # sign-invariant: drop the recovery scale entirely
                ops.append(DBinLinear(packed_wt, in_features, alpha=None))
            elif stage.bn is not None:
                ops.append(DBinLinear(packed_wt, in_features, alpha=None))
                ops.append(_bn_with_alpha(stage.bn, alpha))
            else:
                ops.append(DBinLinear(packed_wt, in_features, alpha=alpha))

        if stage.act is not None:
            if stage.act == "hardtanh" and consumer_is_sign:
                pass  # cannot change the sign seen by the next layer
            else:
                ops.append(DActivation(stage.act))

    deploy = DeployModel(spec=spec, variant=variant, ops=ops)
    return _round_f32(deploy) if float32 else deploy


# ---------------------------------------------------------------------------
# storage accounting
# ---------------------------------------------------------------------------

def _packed_bytes(m: int, k: int) -> int:
    # transposed layout: k rows of ceil(m/64) words
    return k * ((m + 63) // 64) * 8


def storage_report(spec: ModelSpec, variant: str) -> dict:
    """Bytes per component for a deployment variant, plus the ratio vs (a).

    Counting rule: 1 bit per binarized weight (padded to 64-bit words in the
    transposed layout), 32 bits per float weight, bias term, BN parameter
    (gamma, beta, running mean, running var), or surviving recovery scale,
    plus a fixed header.
    """
    if variant not in DEPLOY_VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    head = (spec.point_widths[-1],) + spec.head_widths + (spec.num_classes,)
    all_dims = [(spec.point_widths[i], spec.point_widths[i + 1])
                for i in range(len(spec.point_widths) - 1)]
    all_dims += [(head[i], head[i + 1]) for i in range(len(head) - 1)]
    n_layers = len(all_dims)

    fp_bytes = bin_bytes = bn_bytes = alpha_bytes = bias_bytes = 0
    for i, (m, k) in enumerate(all_dims):
        is_first, is_last = i == 0, i == n_layers - 1
        has_bn_slot = not is_last  # every layer but the classifier output
        if variant == "a":
            fp_bytes += 4 * m * k
            bias_bytes += 4 * k  # folding always leaves a bias behind
            continue
        fp_boundary = (is_first and variant not in ("d", "e")) or (
            is_last and variant not in ("c", "e"))
        if fp_boundary:
            fp_bytes += 4 * m * k
            if is_last or variant == "f":
                bias_bytes += 4 * k  # no BN to absorb it
        else:
            bin_bytes += _packed_bytes(m, k)
            trunk_last = i == len(spec.point_widths) - 2
            keeps_alpha = (
                (is_last and variant in ("c", "e"))  # classifier output, no BN after
                or (variant == "f" and i == n_layers - 2)  # feeds hardtanh -> fp output
                or (variant == "f" and trunk_last and spec.aggregation == "ema-max")
            )
            if keeps_alpha:
                alpha_bytes += 4
        if has_bn_slot and variant != "f":
            bn_bytes += 4 * 4 * k

    total = HEADER_BYTES + fp_bytes + bin_bytes + bn_bytes + alpha_bytes + bias_bytes
    report = {
        "variant": variant,
        "header_bytes": HEADER_BYTES,
        "fp_weight_bytes": fp_bytes,
        "binarized_weight_bytes": bin_bytes,
        "bn_bytes": bn_bytes,
        "alpha_bytes": alpha_bytes,
        "bias_bytes": bias_bytes,
        "total_bytes": total,
        "total_mib": total / 2**20,
    }
    if variant == "a":
        report["ratio_vs_a"] = 1.0
    else:
        report["ratio_vs_a"] = storage_report(spec, "a")["total_bytes"] / total
    return report
