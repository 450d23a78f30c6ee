"""Model zoo: full-precision and binarized point-cloud classifiers built from
shared point-wise stages, a pooling aggregation, and a classifier head.

Block ordering is uniform: linear -> batch norm -> activation, with the
binarizing sign applied inside each bi-linear layer to whatever feeds it
(so the effective order around a binarized layer is BN -> hardtanh -> sign
-> bi-linear).  The aggregation sits directly after the last point-wise
stage's batch norm, with no activation in between.  Binarized configs use
hardtanh activations; the float baseline uses relu.

Linear layers directly followed by batch norm carry no bias (the BN shift
makes one redundant); only layers without a following BN (the classifier
output and the alignment-net regression output) have one.  That keeps the
latent parameter count of a binarized config equal to its float twin plus
exactly one scale factor per bi-linear layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .aggregation import EMAConfig, ema_segment_forward
from .autodiff import BatchNormState, Tensor
from .binary import BiLinearLayer, hard_sign, lsr_init


class SpecError(ValueError):
    """Inconsistent model specification."""


@dataclass(frozen=True)
class ModelSpec:
    """Widths, precision flags, and aggregation for one classifier."""

    point_widths: tuple = (3, 64, 64, 64, 128, 1024)
    head_widths: tuple = (512, 256)
    num_classes: int = 40
    n_points: int = 1024
    aggregation: str = "max"
    middle_binarized: bool = False
    lsr: bool = False
    first_layer_fp: bool = True
    last_layer_fp: bool = True
    bn_mode: str = "kept"
    use_tnet: bool = False
    tnet_point_widths: tuple = (3, 16, 32)
    tnet_head_width: int = 16
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        if len(self.point_widths) < 2 or self.point_widths[0] != 3:
            raise SpecError("point-wise widths must start at 3 input coordinates")
        if len(self.head_widths) < 1:
            raise SpecError("classifier head needs at least one hidden width")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        if self.bn_mode not in ("kept", "dropped"):
            raise SpecError(f"unknown bn_mode {self.bn_mode!r}")
        if self.lsr and not self.middle_binarized:
            raise SpecError("scale recovery only applies to binarized configs")
        if self.tnet_point_widths[0] != 3:
            raise SpecError("alignment net consumes raw 3-d points")

    @property
    def activation(self) -> str:
        return "hardtanh" if self.middle_binarized else "relu"


def full_precision_spec(**overrides) -> ModelSpec:
    spec = ModelSpec(middle_binarized=False, lsr=False, **overrides)
    spec.validate()
    return spec


def bipointnet_spec(**overrides) -> ModelSpec:
    overrides.setdefault("aggregation", "ema-max")
    spec = ModelSpec(middle_binarized=True, lsr=True, **overrides)
    spec.validate()
    return spec


def bnn_spec(**overrides) -> ModelSpec:
    overrides.setdefault("aggregation", "max")
    spec = ModelSpec(middle_binarized=True, lsr=False, **overrides)
    spec.validate()
    return spec


TOY_WIDTHS = dict(point_widths=(3, 16, 32, 64), head_widths=(32,), num_classes=4)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class FPLinear:
    """Plain float linear layer; bias optional (omitted when BN follows)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            bound = np.sqrt(6.0 / in_features)
            w = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        return ad.add(out, self.bias) if self.bias is not None else out

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BNLayer:
    def __init__(self, channels: int, eps: float, momentum: float):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState.create(channels, eps=eps, momentum=momentum)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.state, mode)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


@dataclass
class Stage:
    """linear -> optional BN -> optional activation."""

    name: str
    layer: object  # FPLinear | BiLinearLayer
    bn: BNLayer | None
    act: str | None  # "relu" | "hardtanh" | None

    @property
    def binarized(self) -> bool:
        return isinstance(self.layer, BiLinearLayer)

    def forward(self, x: Tensor, mode: str, trace: "ModelTrace | None" = None,
                calibrating: bool = False) -> Tensor:
        if self.binarized:
            if calibrating:
                lsr_init(self.layer, x)
            if trace is not None:
                trace.sign_inputs.append(x.data)
        h = self.layer.forward(x)
        if self.bn is not None:
            h = self.bn.forward(h, mode)
        if self.act == "relu":
            h = ad.relu(h)
        elif self.act == "hardtanh":
            h = ad.hardtanh(h)
        return h

    def parameters(self) -> list[Tensor]:
        params = self.layer.parameters()
        if self.bn is not None:
            params = params + self.bn.parameters()
        return params


def _make_stages(prefix: str, widths: tuple, spec: ModelSpec, rng: np.random.Generator,
                 first_fp: bool, output_layer: bool, last_act: bool) -> list[Stage]:
    """Stage chain over consecutive widths.

    ``output_layer`` makes the final stage a bare output layer with no
    BN/activation (float with bias, or binarized per the spec flags);
    ``last_act`` controls whether the final BN stage also gets an activation
    (the stage feeding the aggregation does not).
    """
    stages = []
    count = len(widths) - 1
    for i in range(count):
        m, k = widths[i], widths[i + 1]
        name = f"{prefix}{i}"
        is_first, is_last = i == 0, i == count - 1
        if is_last and output_layer:
            if spec.last_layer_fp or not spec.middle_binarized:
                layer: object = FPLinear(m, k, rng, bias=True)
            else:
                layer = BiLinearLayer(m, k, rng, learnable_alpha=spec.lsr)
            stages.append(Stage(name, layer, None, None))
            continue
        use_fp = (is_first and first_fp) or not spec.middle_binarized
        layer = (FPLinear(m, k, rng, bias=spec.bn_mode == "dropped")
                 if use_fp else BiLinearLayer(m, k, rng, learnable_alpha=spec.lsr))
        bn = (BNLayer(k, spec.bn_eps, spec.bn_momentum) if spec.bn_mode == "kept" else None)
        act = spec.activation if (not is_last or last_act) else None
        stages.append(Stage(name, layer, bn, act))
    return stages


class TNet:
    """Small alignment net predicting a 3x3 input transform.

    Mirrors the host model's precision: float configs use a zero-initialized
    float regression output (so the transform starts at the identity), while
    binarized configs binarize the regression output too, with or without a
    recovery scale.  Its regularizer penalizes departure from orthogonality.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        widths = spec.tnet_point_widths
        self.trunk = _make_stages("tnet_trunk", widths, spec, rng,
                                  first_fp=spec.first_layer_fp,
                                  output_layer=False, last_act=False)
        self.aggregation = EMAConfig.resolve(spec.aggregation, spec.n_points)
        head_widths = (widths[-1], spec.tnet_head_width)
        self.head = _make_stages("tnet_head", head_widths, spec, rng,
                                 first_fp=False, output_layer=False, last_act=True)
        if spec.middle_binarized:
            self.regress: object = BiLinearLayer(spec.tnet_head_width, 9, rng,
                                                 learnable_alpha=spec.lsr)
        else:
            self.regress = FPLinear(spec.tnet_head_width, 9, rng, bias=True, zero_init=True)
        self._identity = Tensor(np.eye(3).reshape(9))

    def forward(self, x: Tensor, n_points: int, mode: str,
                trace: "ModelTrace | None" = None, calibrating: bool = False) -> Tensor:
        h = x
        for stage in self.trunk:
            h = stage.forward(h, mode, trace, calibrating)
        h = ema_segment_forward(h, self.aggregation, n_points)
        for stage in self.head:
            h = stage.forward(h, mode, trace, calibrating)
        if isinstance(self.regress, BiLinearLayer):
            if calibrating:
                lsr_init(self.regress, h)
            if trace is not None:
                trace.sign_inputs.append(h.data)
        t = self.regress.forward(h)
        return ad.add(t, self._identity)

    def stages(self) -> list[Stage]:
        return self.trunk + self.head

    def parameters(self) -> list[Tensor]:
        params = []
        for stage in self.stages():
            params.extend(stage.parameters())
        params.extend(self.regress.parameters())
        return params


def tnet_regularizer(z) -> Tensor:
    """||I - Z Z^T||_F^2 for a single 3x3 matrix (Tensor or ndarray)."""
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=np.float64))
    if z.data.shape != (3, 3):
        raise SpecError(f"expected a 3x3 matrix, got {z.data.shape}")
    # orthogonality_penalty consumes row-major B x 9
    zs = ad._make(z.data.reshape(1, 9), (z,), lambda g: (g.reshape(3, 3),))
    return ad.orthogonality_penalty(zs)


@dataclass
class ModelTrace:
    """Per-forward diagnostics: pooled features and pre-sign activations."""

    pooled: np.ndarray | None = None
    sign_inputs: list = field(default_factory=list)
    transforms: np.ndarray | None = None
    penalty: Tensor | None = None


class Model:
    """Point-cloud classifier assembled from a ModelSpec."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
        self.tnet = TNet(spec, rng) if spec.use_tnet else None
        self.trunk = _make_stages("trunk", spec.point_widths, spec, rng,
                                  first_fp=spec.first_layer_fp,
                                  output_layer=False, last_act=False)
        self.aggregation = EMAConfig.resolve(spec.aggregation, spec.n_points)
        head_widths = (spec.point_widths[-1],) + spec.head_widths + (spec.num_classes,)
        self.head = _make_stages("head", head_widths, spec, rng,
                                 first_fp=False, output_layer=True, last_act=True)

    # -- structure ---------------------------------------------------------

    def stages(self) -> list[Stage]:
        base = list(self.trunk) + list(self.head)
        if self.tnet is not None:
            base = self.tnet.stages() + base
        return base

    def bilinear_layers(self) -> list[BiLinearLayer]:
        layers = [s.layer for s in self.stages() if s.binarized]
        if self.tnet is not None and isinstance(self.tnet.regress, BiLinearLayer):
            layers.append(self.tnet.regress)
        return layers

    def parameters(self) -> list[Tensor]:
        params = []
        if self.tnet is not None:
            params.extend(self.tnet.parameters())
        for stage in self.trunk + self.head:
            params.extend(stage.parameters())
        return params

    def clip_latents(self):
        for layer in self.bilinear_layers():
            layer.clip_latent()

    # -- execution ----------------------------------------------------------

    def forward(self, clouds: np.ndarray, mode: str = "train",
                want_trace: bool = False, calibrating: bool = False,
                ) -> tuple[Tensor, ModelTrace]:
        """Logits for a (batch, n_points, 3) array of clouds."""
        clouds = np.asarray(clouds, dtype=np.float64)
        if clouds.ndim != 3 or clouds.shape[2] != 3:
            raise SpecError(f"expected (batch, n, 3) clouds, got {clouds.shape}")
        batch, n = clouds.shape[0], clouds.shape[1]
        trace = ModelTrace() if (want_trace or self.tnet is not None) else None
        x = Tensor(clouds.reshape(batch * n, 3))
        if self.tnet is not None:
            zs = self.tnet.forward(x, n, mode, trace, calibrating)
            x = ad.input_transform(x, zs, n)
            trace.transforms = zs.data
            trace.penalty = ad.orthogonality_penalty(zs)
        h = x
        for stage in self.trunk:
            h = stage.forward(h, mode, trace, calibrating)
        h = ema_segment_forward(h, self.aggregation, n)
        if trace is not None:
            trace.pooled = h.data
        for stage in self.head:
            h = stage.forward(h, mode, trace, calibrating)
        return h, (trace if trace is not None else ModelTrace())

    def predict(self, clouds: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(clouds, mode="eval")
        return logits.data.argmax(axis=1)


def lsr_calibrate(model: Model, clouds: np.ndarray):
    """One forward pass that initializes every recovery scale in stage order,
    so each layer calibrates against post-recovery upstream activations."""
    model.forward(clouds, mode="train", calibrating=True)


def count_parameters(model: Model) -> int:
    return sum(p.data.size for p in model.parameters())
