"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "BPNT" | format version u16 | kind u8 (0 train / 1 deploy) | variant u8
    spec block: widths, flags, aggregation config including the resolved
                offset and point count, BN constants
    u16 record count, then per-layer records:
        u8 record type | u16 name length | name utf-8 | type-specific payload

Float payloads are 32-bit little-endian; packed weights are the BitMatrix
row-major 64-bit little-endian words with zero padding.  Loading keeps the
f32-rounded values, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from io import BytesIO

import numpy as np

from .aggregation import AGGREGATION_KINDS, EMAConfig
from .binary import BiLinearLayer, BitMatrix
from .deploy import (
    DActivation,
    DAggregate,
    DBatchNorm,
    DBinLinear,
    DLinear,
    DeployModel,
)
from .models import FPLinear, Model, ModelSpec, Stage

MAGIC = b"BPNT"
FORMAT_VERSION = 1

_KIND_TRAIN = 0
_KIND_DEPLOY = 1

_REC_FP_LINEAR = 0
_REC_BILINEAR = 1
_REC_BATCHNORM = 2
_REC_ACTIVATION = 3
_REC_AGGREGATE = 4

_ACT_CODES = {"relu": 0, "hardtanh": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}
_POOL_CODES = {"max": 0, "avg": 1}
_POOL_NAMES = {v: k for k, v in _POOL_CODES.items()}


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


# ---------------------------------------------------------------------------
# low-level helpers
# ---------------------------------------------------------------------------

def _w(buf, fmt, *vals):
    buf.write(struct.pack("<" + fmt, *vals))


def _r(buf, fmt):
    size = struct.calcsize("<" + fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    vals = struct.unpack("<" + fmt, raw)
    return vals[0] if len(vals) == 1 else vals


def _w_f32(buf, arr):
    data = np.asarray(arr, dtype="<f4").tobytes()
    _w(buf, "I", len(data))
    buf.write(data)


def _r_f32(buf, shape=None):
    nbytes = _r(buf, "I")
    raw = buf.read(nbytes)
    if len(raw) != nbytes:
        raise CheckpointError("truncated float payload")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return arr.reshape(shape) if shape is not None else arr

def _w_name(buf, name: str):
    raw = name.encode()
    _w(buf, "H", len(raw))
    buf.write(raw)


def _r_name(buf) -> str:
    n = _r(buf, "H")
    return buf.read(n).decode()


def _w_widths(buf, widths):
    _w(buf, "B", len(widths))
    for w in widths:
        _w(buf, "I", w)


def _r_widths(buf):
    return tuple(_r(buf, "I") for _ in range(_r(buf, "B")))


# ---------------------------------------------------------------------------
# spec block
# ---------------------------------------------------------------------------

def _write_spec(buf, spec: ModelSpec, agg: EMAConfig):
    _w_widths(buf, spec.point_widths)
    _w_widths(buf, spec.head_widths)
    _w(buf, "II", spec.num_classes, spec.n_points)
    flags = (
        spec.middle_binarized
        | spec.lsr << 1
        | spec.first_layer_fp << 2
        | spec.last_layer_fp << 3
        | (spec.bn_mode == "dropped") << 4
        | spec.use_tnet << 5
    )
    _w(buf, "B", flags)
    _w_widths(buf, spec.tnet_point_widths)
    _w(buf, "I", spec.tnet_head_width)
    _w(buf, "dd", spec.bn_eps, spec.bn_momentum)
    _w(buf, "B", AGGREGATION_KINDS.index(agg.kind))
    _w(buf, "IdII", agg.n, agg.delta, agg.mc_samples, agg.seed)


def _read_spec(buf) -> tuple[ModelSpec, EMAConfig]:
    point_widths = _r_widths(buf)
    head_widths = _r_widths(buf)
    num_classes, n_points = _r(buf, "II")
    flags = _r(buf, "B")
    tnet_widths = _r_widths(buf)
    tnet_head = _r(buf, "I")
    bn_eps, bn_momentum = _r(buf, "dd")
    kind_idx = _r(buf, "B")
    agg_n, delta, mc_samples, agg_seed = _r(buf, "IdII")
    if kind_idx >= len(AGGREGATION_KINDS):
        raise CheckpointError(f"unknown aggregation code {kind_idx}")
    spec = ModelSpec(
        point_widths=point_widths,
        head_widths=head_widths,
        num_classes=num_classes,
        n_points=n_points,
        aggregation=AGGREGATION_KINDS[kind_idx],
        middle_binarized=bool(flags & 1),
        lsr=bool(flags >> 1 & 1),
        first_layer_fp=bool(flags >> 2 & 1),
        last_layer_fp=bool(flags >> 3 & 1),
        bn_mode="dropped" if flags >> 4 & 1 else "kept",
        use_tnet=bool(flags >> 5 & 1),
        tnet_point_widths=tnet_widths,
        tnet_head_width=tnet_head,
        bn_eps=bn_eps,
        bn_momentum=bn_momentum,
    )
    agg = EMAConfig(kind=AGGREGATION_KINDS[kind_idx], n=agg_n, delta=delta,
                    mc_samples=mc_samples, seed=agg_seed)
    return spec, agg


# ---------------------------------------------------------------------------
# training-graph checkpoints
# ---------------------------------------------------------------------------

def _train_records(model: Model):
    records = []
    for stage in model.stages():
        records.append((stage.name, stage.layer))
        if stage.bn is not None:
            records.append((stage.name + "_bn", stage.bn))
    if model.tnet is not None:
        records.append(("tnet_regress", model.tnet.regress))
    return records


def _write_train_record(buf, name, obj):
    if isinstance(obj, FPLinear):
        _w(buf, "B", _REC_FP_LINEAR)
        _w_name(buf, name)
        m, k = obj.weight.data.shape
        _w(buf, "IIB", m, k, obj.bias is not None)
        _w_f32(buf, obj.weight.data)
        if obj.bias is not None:
            _w_f32(buf, obj.bias.data)
    elif isinstance(obj, BiLinearLayer):
        _w(buf, "B", _REC_BILINEAR)
        _w_name(buf, name)
        _w(buf, "IIB", obj.in_features, obj.out_features, obj.learnable_alpha)
        _w_f32(buf, obj.latent_w.data)
        _w(buf, "f", float(obj.alpha.data))
    else:  # BNLayer
        _w(buf, "B", _REC_BATCHNORM)
        _w_name(buf, name)
        _w(buf, "I", obj.gamma.data.size)
        for arr in (obj.gamma.data, obj.beta.data, obj.state.running_mean, obj.state.running_var):
            _w_f32(buf, arr)


def _load_train_record(buf, name, obj):
    rtype = _r(buf, "B")
    rname = _r_name(buf)
    if rname != name:
        raise CheckpointError(f"record order mismatch: expected {name}, found {rname}")
    if rtype == _REC_FP_LINEAR:
        if not isinstance(obj, FPLinear):
            raise CheckpointError(f"{name}: float layer record for a binarized layer")
        m, k, has_bias = _r(buf, "IIB")
        obj.weight.data = _r_f32(buf, (m, k))
        if has_bias:
            obj.bias.data = _r_f32(buf, (k,))
    elif rtype == _REC_BILINEAR:
        if not isinstance(obj, BiLinearLayer):
            raise CheckpointError(f"{name}: binarized record for a float layer")
        m, k, learnable = _r(buf, "IIB")
        obj.latent_w.data = _r_f32(buf, (m, k))
        obj.alpha.data = np.asarray(float(_r(buf, "f")))
        obj.learnable_alpha = bool(learnable)
    elif rtype == _REC_BATCHNORM:
        c = _r(buf, "I")
        obj.gamma.data = _r_f32(buf, (c,))
        obj.beta.data = _r_f32(buf, (c,))
        obj.state.running_mean = _r_f32(buf, (c,))
        obj.state.running_var = _r_f32(buf, (c,))
    else:
        raise CheckpointError(f"unknown record type {rtype}")


# ---------------------------------------------------------------------------
# deploy-graph checkpoints
# ---------------------------------------------------------------------------

def _write_deploy_op(buf, op):
    if isinstance(op, DLinear):
        _w(buf, "B", _REC_FP_LINEAR)
        m, k = op.weight.shape
        _w(buf, "IIB", m, k, op.bias is not None)
        _w_f32(buf, op.weight)
        if op.bias is not None:
            _w_f32(buf, op.bias)
    elif isinstance(op, DBinLinear):
        _w(buf, "B", _REC_BILINEAR)
        _w(buf, "IIB", op.in_features, op.packed_wt.rows, op.alpha is not None)
        if op.alpha is not None:
            _w(buf, "f", op.alpha)
        raw = op.packed_wt.tobytes()
        _w(buf, "I", len(raw))
        buf.write(raw)
    elif isinstance(op, DBatchNorm):
        _w(buf, "B", _REC_BATCHNORM)
        _w(buf, "I", op.gamma.size)
        _w(buf, "d", op.eps)
        for arr in (op.gamma, op.beta, op.running_mean, op.running_var):
            _w_f32(buf, arr)
    elif isinstance(op, DActivation):
        _w(buf, "B", _REC_ACTIVATION)
        _w(buf, "B", _ACT_CODES[op.kind])
    elif isinstance(op, DAggregate):
        _w(buf, "B", _REC_AGGREGATE)
        _w(buf, "B", _POOL_CODES[op.kind])
        _w(buf, "dI", op.delta, op.n)
    else:
        raise CheckpointError(f"unknown deploy op {type(op).__name__}")


def _read_deploy_op(buf):
    rtype = _r(buf, "B")
    if rtype == _REC_FP_LINEAR:
        m, k, has_bias = _r(buf, "IIB")
        weight = _r_f32(buf, (m, k))
        bias = _r_f32(buf, (k,)) if has_bias else None
        return DLinear(weight=weight, bias=bias)
    if rtype == _REC_BILINEAR:
        in_features, rows, has_alpha = _r(buf, "IIB")
        alpha = float(_r(buf, "f")) if has_alpha else None
        nbytes = _r(buf, "I")
        packed = BitMatrix.frombytes(buf.read(nbytes), rows, in_features)
        return DBinLinear(packed_wt=packed, in_features=in_features, alpha=alpha)
    if rtype == _REC_BATCHNORM:
        c = _r(buf, "I")
        eps = _r(buf, "d")
        gamma, beta = _r_f32(buf, (c,)), _r_f32(buf, (c,))
        mean, var = _r_f32(buf, (c,)), _r_f32(buf, (c,))
        return DBatchNorm(gamma=gamma, beta=beta, running_mean=mean, running_var=var, eps=eps)
    if rtype == _REC_ACTIVATION:
        return DActivation(kind=_ACT_NAMES[_r(buf, "B")])
    if rtype == _REC_AGGREGATE:
        kind = _POOL_NAMES[_r(buf, "B")]
        delta, n = _r(buf, "dI")
        return DAggregate(kind=kind, delta=delta, n=n)
    raise CheckpointError(f"unknown deploy record type {rtype}")


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def save_checkpoint(path, model) -> None:
    """Serialize a training-graph Model or a DeployModel."""
    buf = BytesIO()
    buf.write(MAGIC)
    if isinstance(model, Model):
        _w(buf, "HBB", FORMAT_VERSION, _KIND_TRAIN, 0)
        _write_spec(buf, model.spec, model.aggregation)
        records = _train_records(model)
        _w(buf, "H", len(records))
        for name, obj in records:
            _write_train_record(buf, name, obj)
    elif isinstance(model, DeployModel):
        _w(buf, "HBB", FORMAT_VERSION, _KIND_DEPLOY, ord(model.variant))
        agg = EMAConfig.resolve(model.spec.aggregation, model.spec.n_points)
        _write_spec(buf, model.spec, agg)
        _w(buf, "H", len(model.ops))
        for op in model.ops:
            _write_deploy_op(buf, op)
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Load either checkpoint kind; returns a Model or a DeployModel."""
    with open(path, "rb") as fh:
        buf = BytesIO(fh.read())
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, kind, variant = _r(buf, "HBB")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    spec, agg = _read_spec(buf)
    if kind == _KIND_TRAIN:
        model = Model(spec, seed=0)
        model.aggregation = agg
        if model.tnet is not None:
            model.tnet.aggregation = agg
        count = _r(buf, "H")
        records = _train_records(model)
        if count != len(records):
            raise CheckpointError(f"expected {len(records)} records, file has {count}")
        for name, obj in records:
            _load_train_record(buf, name, obj)
        return model
    if kind == _KIND_DEPLOY:
        count = _r(buf, "H")
        ops = [_read_deploy_op(buf) for _ in range(count)]
        return DeployModel(spec=spec, variant=chr(variant), ops=ops)
    raise CheckpointError(f"unknown checkpoint kind {kind}")
