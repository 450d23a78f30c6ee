"""Training loop, evaluation, and the ablation runner.

A run is fully determined by its RunConfig: the dataset is seeded, model
init is seeded, batch order is seeded, and every logged metric is computed
on fixed probe data, so two runs from the same config produce identical
metric files.
"""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binary import hard_sign, pack
from .checkpoint import save_checkpoint
from .data import DEFAULT_CLASSES, PointCloud, make_dataset
from .entropy import measure_feature_entropy, ste_saturation_ratio
from .models import Model, ModelSpec, lsr_calibrate
from .optim import AdamState, adam_step, cosine_lr

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc",
                  "pooled_entropy_bits", "ste_saturation", "l_reg")

ENTROPY_FLOOR = 0.05   # bits; EMA configs collapsing below this are mis-wired
ENTROPY_PATIENCE = 5   # consecutive epochs below the floor before aborting


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or a collapsed aggregation."""


@dataclass
class RunConfig:
    """Everything needed to reproduce one training run."""

    # model
    point_widths: tuple = (3, 16, 32, 64)
    head_widths: tuple = (32,)
    aggregation: str = "ema-max"
    middle_binarized: bool = True
    lsr: bool = True
    bn_mode: str = "kept"
    use_tnet: bool = False
    tnet_point_widths: tuple = (3, 16, 32)
    tnet_head_width: int = 16
    # data
    classes: tuple = DEFAULT_CLASSES
    per_class: int = 100
    n_points: int = 1024
    noise_sigma: float = 0.02
    data_seed: int = 0
    # training
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 0.001
    reg_weight: float = 0.001
    seed: int = 0
    out_dir: str = "runs/default"
    report_every: int = 1

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            point_widths=tuple(self.point_widths),
            head_widths=tuple(self.head_widths),
            num_classes=len(self.classes),
            n_points=self.n_points,
            aggregation=self.aggregation,
            middle_binarized=self.middle_binarized,
            lsr=self.lsr,
            bn_mode=self.bn_mode,
            use_tnet=self.use_tnet,
            tnet_point_widths=tuple(self.tnet_point_widths),
            tnet_head_width=self.tnet_head_width,
        )

    # -- config-file round trip (line-based key=value with sections) --------

    _SECTIONS = {
        "model": ("point_widths", "head_widths", "aggregation", "middle_binarized",
                  "lsr", "bn_mode", "use_tnet", "tnet_point_widths", "tnet_head_width"),
        "data": ("classes", "per_class", "n_points", "noise_sigma", "data_seed"),
        "train": ("epochs", "batch_size", "base_lr", "reg_weight", "seed",
                  "out_dir", "report_every"),
    }

    def to_ini(self, path):
        parser = configparser.ConfigParser()
        for section, keys in self._SECTIONS.items():
            parser[section] = {}
            for key in keys:
                value = getattr(self, key)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                parser[section][key] = str(value)
        with open(path, "w") as fh:
            parser.write(fh)

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"config file {path} not found or empty")
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for section, keys in cls._SECTIONS.items():
            for key in keys:
                if not parser.has_option(section, key):
                    continue
                raw = parser.get(section, key)
                ftype = types[key]
                if ftype == "tuple":
                    parts = [p for p in raw.split(",") if p]
                    kwargs[key] = tuple(
                        int(p) if p.lstrip("-").isdigit() else p for p in parts
                    )
                elif ftype == "bool":
                    kwargs[key] = raw.lower() in ("true", "1", "yes")
                elif ftype == "int":
                    kwargs[key] = int(raw)
                elif ftype == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def _stack(clouds: list[PointCloud]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([c.points for c in clouds]),
            np.array([c.label for c in clouds], dtype=np.int64))


def load_run_data(cfg: RunConfig):
    train, test = make_dataset(classes=cfg.classes, per_class=cfg.per_class,
                               n_points=cfg.n_points, seed=cfg.data_seed,
                               noise_sigma=cfg.noise_sigma)
    return _stack(train), _stack(test)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, clouds: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> tuple[float, dict[int, float]]:
    """Deterministic eval-mode pass: overall and per-class accuracy."""
    if len(clouds) == 0:
        raise ValueError("empty evaluation set")
    preds = np.concatenate([
        model.predict(clouds[i : i + batch_size])
        for i in range(0, len(clouds), batch_size)
    ])
    correct = preds == labels
    per_class = {int(k): float(correct[labels == k].mean()) for k in np.unique(labels)}
    return float(correct.mean()), per_class


# ---------------------------------------------------------------------------
# probe instrumentation
# ---------------------------------------------------------------------------

def _probe_metrics(model: Model, probe: np.ndarray) -> dict:
    """Pooled-feature entropy, STE saturation, and the orthogonality loss on a
    fixed probe batch.  Runs in train mode (batch statistics are the
    standardization the offset calculation assumes) with running stats
    snapshotted and restored, so probing never perturbs the run."""
    snapshots = [(s.bn.state.running_mean.copy(), s.bn.state.running_var.copy())
                 for s in model.stages() if s.bn is not None]
    logits, trace = model.forward(probe, mode="train", want_trace=True)
    for (mean, var), stage in zip(snapshots, [s for s in model.stages() if s.bn is not None]):
        stage.bn.state.running_mean = mean
        stage.bn.state.running_var = var
    report = measure_feature_entropy(pack(hard_sign(trace.pooled)))
    if trace.sign_inputs:
        saturation = ste_saturation_ratio(np.concatenate([a.ravel() for a in trace.sign_inputs]))
    else:
        saturation = 0.0
    l_reg = float(trace.penalty.data) if trace.penalty is not None else float("nan")
    return {"pooled_entropy_bits": report.mean_entropy,
            "ste_saturation": saturation,
            "l_reg": l_reg}


def _scale_dump(model: Model) -> str:
    lines = []
    for stage in model.stages():
        if stage.binarized:
            layer = stage.layer
            lines.append(f"{stage.name}: alpha={float(layer.alpha.data):.6g} "
                         f"latent_std={layer.latent_w.data.std():.6g}")
    return "; ".join(lines) or "no binarized layers"


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    checkpoint_path: Path | None
    metrics_path: Path | None
    test_oa: float


def train(cfg: RunConfig, write_outputs: bool = True) -> TrainResult:
    """Full run: calibrate, optimize with Adam + cosine decay, log per-epoch
    metrics, write the metrics CSV and final checkpoint."""
    (train_x, train_y), (test_x, test_y) = load_run_data(cfg)
    model = Model(cfg.model_spec(), seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(11,)))

    calib = train_x[: min(64, len(train_x))]
    lsr_calibrate(model, calib)

    probe = train_x[: min(32, len(train_x))]
    params = model.parameters()
    state = AdamState(params)
    ema_config = cfg.aggregation in ("ema-max", "ema-avg")
    low_entropy_run = 0
    rows: list[dict] = []

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        order = rng.permutation(len(train_x))
        losses, correct = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # train-mode BN needs at least two rows
            logits, trace = model.forward(train_x[idx], mode="train")
            loss = ad.softmax_cross_entropy(logits, train_y[idx])
            if trace.penalty is not None:
                loss = ad.add(loss, ad.scale(trace.penalty, cfg.reg_weight))
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}; scales: {_scale_dump(model)}")
            for p in params:
                p.zero_grad()
            ad.backward(loss)
            adam_step(params, state, lr)
            model.clip_latents()
            losses.append(float(loss.data))
            correct += int((logits.data.argmax(axis=1) == train_y[idx]).sum())

        test_oa, _ = evaluate(model, test_x, test_y)
        row = {"epoch": epoch, "lr": lr,
               "train_loss": float(np.mean(losses)),
               "train_acc": correct / len(train_x),
               "test_acc": test_oa}
        if epoch % cfg.report_every == 0 or epoch == cfg.epochs - 1:
            row.update(_probe_metrics(model, probe))
        else:
            row.update({"pooled_entropy_bits": float("nan"),
                        "ste_saturation": float("nan"), "l_reg": float("nan")})
        rows.append(row)
        logger.info("epoch %d lr %.5f loss %.4f train %.3f test %.3f",
                    epoch, lr, row["train_loss"], row["train_acc"], row["test_acc"])

        if ema_config and not np.isnan(row["pooled_entropy_bits"]):
            low_entropy_run = low_entropy_run + 1 if row["pooled_entropy_bits"] < ENTROPY_FLOOR else 0
            if low_entropy_run >= ENTROPY_PATIENCE:
                raise DivergenceError(
                    f"pooled entropy below {ENTROPY_FLOOR} bits for "
                    f"{ENTROPY_PATIENCE} epochs under an EMA config; "
                    f"scales: {_scale_dump(model)}")

    checkpoint_path = metrics_path = None
    if write_outputs:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        write_metrics_csv(metrics_path, rows)
        checkpoint_path = out / "model.bpnt"
        save_checkpoint(checkpoint_path, model)
        cfg.to_ini(out / "config.ini")
    return TrainResult(model=model, metrics=rows, checkpoint_path=checkpoint_path,
                       metrics_path=metrics_path, test_oa=rows[-1]["test_acc"])


def write_metrics_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in METRIC_COLUMNS])


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_GRID = (
    # method, bit-width, aggregation, binarized, lsr
    ("Full Prec.", "32/32", "max", False, False),
    ("BNN", "1/1", "max", True, False),
    ("BNN-LSR", "1/1", "max", True, True),
    ("BNN-EMA", "1/1", "ema-avg", True, False),
    ("BNN-EMA", "1/1", "ema-max", True, False),
    ("Ours", "1/1", "ema-avg", True, True),
    ("Ours", "1/1", "ema-max", True, True),
)


def ablate(base_cfg: RunConfig, seeds=(0, 1, 2), write_outputs: bool = True) -> list[dict]:
    """Run the method grid on shared seeds and emit one row per method."""
    rows = []
    for method, bits, agg, binarized, lsr in ABLATION_GRID:
        oas = []
        for seed in seeds:
            cfg = replace(base_cfg, aggregation=agg, middle_binarized=binarized,
                          lsr=lsr, seed=seed,
                          out_dir=str(Path(base_cfg.out_dir) /
                                      f"{method.replace(' ', '_').replace('.', '')}_{agg}_s{seed}"))
            result = train(cfg, write_outputs=write_outputs)
            oas.append(result.test_oa)
        row = {"method": method, "bit_width": bits, "aggregation": agg,
               **{f"oa_seed{s}": oa for s, oa in zip(seeds, oas)},
               "oa_mean": float(np.mean(oas))}
        rows.append(row)
        logger.info("ablation %s/%s: OA %.3f", method, agg, row["oa_mean"])
    if write_outputs:
        out = Path(base_cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows
