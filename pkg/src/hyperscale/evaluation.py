"""Dice scoring, factor sweeps and multi-seed aggregation.

Sweep CSV columns: ``phi,seed,mean_dice,flops,peak_mem,dice_label_1..dice_label_{C-1}``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .cost import flops as cost_flops
from .data import Dataset
from .tensor import Tensor
from .training import varres_logits
from .unet import RescalePolicy, UNetConfig, WeightSet, forward


def dice(y: np.ndarray, y_hat: np.ndarray, label: int) -> float:
    """2|y ∩ ŷ| / (|y| + |ŷ|) for one label; both masks empty counts as a perfect score."""
    a = np.asarray(y) == label
    b = np.asarray(y_hat) == label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def per_label_dice(y: np.ndarray, y_hat: np.ndarray, num_classes: int) -> np.ndarray:
    """Dice of every foreground label 1..num_classes-1."""
    y = np.asarray(y).reshape(-1).astype(np.int64)
    y_hat = np.asarray(y_hat).reshape(-1).astype(np.int64)
    true_count = np.bincount(y, minlength=num_classes)
    pred_count = np.bincount(y_hat, minlength=num_classes)
    inter = np.bincount(y[y == y_hat], minlength=num_classes)
    total = true_count + pred_count
    out = np.ones(num_classes, dtype=np.float64)
    nz = total > 0
    out[nz] = 2.0 * inter[nz] / total[nz]
    return out[1:]


def mean_foreground_dice(y: np.ndarray, y_hat: np.ndarray, num_classes: int) -> float:
    """Unweighted mean Dice over foreground labels; the background label 0 is ignored."""
    return float(per_label_dice(y, y_hat, num_classes).mean())


def predict_labels(logits: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the lower class index
    return np.argmax(logits, axis=1)


@dataclass
class EvalResult:
    mean_dice: float
    per_label: np.ndarray


def _batches(dataset: Dataset, batch_size: int) -> Iterable[list[int]]:
    # consecutive items of equal size share a batch
    group: list[int] = []
    for i, img in enumerate(dataset.images):
        if group and (len(group) == batch_size or dataset.images[group[0]].shape != img.shape):
            yield group
            group = []
        group.append(i)
    if group:
        yield group


def evaluate(
    weights: WeightSet,
    policy: RescalePolicy,
    dataset: Dataset,
    cfg: UNetConfig,
    batch_size: int = 16,
    input_scale: Optional[float] = None,
) -> EvalResult:
    """Per-item mean foreground Dice, averaged over items in dataset order.

    ``input_scale`` evaluates the variable-resolution way: the input is
    resized by that factor and the logits resized back.
    """
    if weights.flat.requires_grad:
        weights = WeightSet(Tensor(weights.flat.data), weights.manifest)
    scores, labels = [], []
    for idx in _batches(dataset, batch_size):
        x, y = dataset.batch(idx)
        x = x.astype(weights.flat.dtype, copy=False)
        if input_scale is None:
            logits = forward(Tensor(x), weights, policy, cfg)
        else:
            logits = varres_logits(x, weights, cfg, input_scale, policy.factors[0])
        pred = predict_labels(logits.data)
        for k in range(len(idx)):
            pl = per_label_dice(y[k], pred[k], cfg.num_classes)
            labels.append(pl)
            scores.append(pl.mean())
    return EvalResult(float(np.mean(scores)), np.mean(labels, axis=0))


# ---------------------------------------------------------------------------
# sweeps


def factor_grid(step: float, include_zero: bool = False) -> list[float]:
    """``step, 2*step, ... <= 1`` (optionally starting at 0), rounded to kill float drift."""
    if not step > 0:
        raise ValueError(f"grid step must be > 0, got {step}")
    n = int(math.floor(1.0 / step + 1e-9))
    start = 0 if include_zero else 1
    return [round(i * step, 10) for i in range(start, n + 1)]


@dataclass
class SweepRecord:
    phi: float
    seed: Optional[int]
    mean_dice: float
    flops: int
    peak_mem: int
    per_label: tuple[float, ...] = ()


@dataclass
class SweepCurve:
    records: list[SweepRecord]
    step: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = [(r.seed, r.phi) for r in self.records]
        if len(set(keys)) != len(keys):
            raise ValueError("sweep curve has duplicate (phi, seed) records")

    @property
    def phis(self) -> list[float]:
        return [r.phi for r in self.records]

    def to_csv(self) -> str:
        n_labels = max((len(r.per_label) for r in self.records), default=0)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["phi", "seed", "mean_dice", "flops", "peak_mem"] + [f"dice_label_{i}" for i in range(1, n_labels + 1)])
        for r in self.records:
            writer.writerow(
                [f"{r.phi:.10g}", "" if r.seed is None else r.seed, repr(float(r.mean_dice)), r.flops, r.peak_mem]
                + [repr(float(d)) for d in r.per_label]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "SweepCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("sweep CSV has no records")
        missing = {"phi", "mean_dice", "flops"} - set(rows[0])
        if missing:
            raise ValueError(f"sweep CSV lacks columns {sorted(missing)}")
        label_cols = sorted((k for k in rows[0] if k.startswith("dice_label_")), key=lambda k: int(k.rsplit("_", 1)[1]))
        records = [
            SweepRecord(
                phi=float(row["phi"]),
                seed=int(row["seed"]) if row.get("seed") not in (None, "") else None,
                mean_dice=float(row["mean_dice"]),
                flops=int(float(row["flops"])),
                peak_mem=int(float(row.get("peak_mem") or 0)),
                per_label=tuple(float(row[k]) for k in label_cols),
            )
            for row in rows
        ]
        return cls(records)

    @classmethod
    def read_csv(cls, path) -> "SweepCurve":
        with open(path) as fh:
            return cls.from_csv(fh.read())


def sweep(checkpoint, dataset: Dataset, step: float = 0.01, phis: Optional[Sequence[float]] = None, batch_size: int = 16) -> SweepCurve:
    """Evaluate a checkpoint over a grid of factors.

    For a hypernetwork each grid point costs one weight prediction; the
    network then runs without the hypernetwork. A fixed checkpoint can only
    be "swept" at its own factor. A variable-resolution checkpoint is swept
    over input scales instead.
    """
    grid = list(phis) if phis is not None else factor_grid(step)
    if sorted(set(grid)) != grid:
        raise ValueError("sweep grid must be strictly increasing")
    cfg = checkpoint.net_config
    if checkpoint.mode == "fixed" and any(not math.isclose(p, checkpoint.phi) for p in grid):
        raise ValueError(f"fixed checkpoint was trained at phi={checkpoint.phi}; cannot sweep {grid[:3]}...")
    if checkpoint.mode == "hyper" and checkpoint.num_factors != 1:
        raise ValueError("sweep needs a single-factor hypernetwork; use the separate-factor study instead")
    h, w = dataset.image_size
    records = []
    for phi in grid:
        if checkpoint.mode == "varres":
            policy = RescalePolicy.single(checkpoint.phi)
            result = evaluate(checkpoint.weights(), policy, dataset, cfg, batch_size, input_scale=phi)
            cost = cost_flops(cfg, policy, h, w, input_scale=phi)
        else:
            policy = RescalePolicy.single(phi)
            result = evaluate(checkpoint.weights(policy), policy, dataset, cfg, batch_size)
            cost = cost_flops(cfg, policy, h, w)
        records.append(
            SweepRecord(phi, checkpoint.seed, result.mean_dice, cost.total, cost.peak_memory, tuple(float(d) for d in result.per_label))
        )
    return SweepCurve(records, step if phis is None else None, {"mode": checkpoint.mode})


@dataclass
class SeedStats:
    phi: float
    mean: float
    std: float
    n: int


def multi_seed(curves: Sequence[SweepCurve], column: str = "mean_dice") -> list[SeedStats]:
    """Per-factor sample mean and (n-1) standard deviation across runs sharing a grid."""
    if len(curves) < 2:
        raise ValueError("need at least two runs")
    grid = curves[0].phis
    for c in curves[1:]:
        if c.phis != grid:
            raise ValueError("runs were evaluated on different grids")
    out = []
    for i, phi in enumerate(grid):
        values = np.array([getattr(c.records[i], column) for c in curves], dtype=np.float64)
        out.append(SeedStats(phi, float(values.mean()), float(values.std(ddof=1)), len(values)))
    return out
