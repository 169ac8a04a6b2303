"""Analytic inference cost, Pareto frontiers and constrained factor selection.

FLOP convention: 2 FLOPs per multiply-accumulate; biases and activations are
free; every resize layer costs 8 FLOPs per output element, including one whose
output extent equals its input (numerically a no-op, but counting it keeps
the cost non-decreasing in every factor). Peak memory counts activation elements
(not bytes) live at any point of the execution order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .unet import RescalePolicy, UNetConfig, down_extent, feature_sizes


@dataclass
class CostReport:
    total: int
    per_layer: list[tuple[str, int]]
    peak_memory: int
    input_size: tuple[int, int]

    @property
    def gflops(self) -> float:
        return self.total / 1e9


class _Liveness:
    """Tracks live activation buffers in execution order."""

    def __init__(self):
        self.live: dict[str, int] = {}
        self.peak = 0

    def produce(self, name: str, elements: int) -> None:
        self.live[name] = elements
        self.peak = max(self.peak, sum(self.live.values()))

    def free(self, *names: str) -> None:
        for n in names:
            self.live.pop(n, None)


def flops(cfg: UNetConfig, policy: RescalePolicy, height: int, width: int, input_scale: Optional[float] = None) -> CostReport:
    """Cost of one inference pass on a single (height x width) image.

    ``input_scale`` adds the variable-resolution wrapper: input resized by the
    scale before the network and logits resized back afterwards.
    """
    layers: list[tuple[str, int]] = []
    mem = _Liveness()
    k2 = cfg.kernel * cfg.kernel
    mem.produce("input", cfg.in_channels * height * width)
    cur, c = "input", cfg.in_channels
    h, w = height, width
    if input_scale is not None:
        h, w = down_extent(height, input_scale), down_extent(width, input_scale)
        layers.append(("input_resize", 8 * c * h * w))
        if (h, w) != (height, width):
            mem.produce("input_small", c * h * w)
            mem.free("input")
            cur = "input_small"

    def conv(name: str, cin: int, cout: int, kk: int, hh: int, ww: int, src: str, keep_src: bool) -> str:
        layers.append((name, 2 * kk * cin * cout * hh * ww))
        mem.produce(name, cout * hh * ww)
        if not keep_src:
            mem.free(src)
        return name

    sizes = feature_sizes(cfg, policy, h, w)
    skips: list[tuple[str, int, int, int]] = []
    retained: set[str] = set()  # skip tensors stay live until their decoder concat
    for i, ch in enumerate(cfg.encoder_channels):
        hh, ww = sizes[i]
        for j in range(cfg.convs_per_stage):
            cur = conv(f"enc{i}.conv{j + 1}", c if j == 0 else ch, ch, k2, hh, ww, cur, cur in retained)
        c = ch
        if i < cfg.num_steps:
            skips.append((cur, ch, hh, ww))
            retained.add(cur)
            nh, nw = sizes[i + 1]
            layers.append((f"enc{i}.down", 8 * ch * nh * nw))
            if (nh, nw) != (hh, ww):
                mem.produce(f"enc{i}.down", ch * nh * nw)
                cur = f"enc{i}.down"
    for i in range(cfg.num_steps):
        skip, cs, sh, sw = skips[-1 - i]
        hh, ww = sizes[cfg.num_steps - i]
        up = cur
        layers.append((f"dec{i}.up", 8 * c * sh * sw))
        if (hh, ww) != (sh, sw):
            mem.produce(f"dec{i}.up", c * sh * sw)
            if cur not in retained:
                mem.free(cur)
            up = f"dec{i}.up"
        mem.produce(f"dec{i}.cat", (c + cs) * sh * sw)
        mem.free(up, skip)
        cur = f"dec{i}.cat"
        cin = c + cs
        ch = cfg.decoder_channels[i]
        for j in range(cfg.convs_per_stage):
            cur = conv(f"dec{i}.conv{j + 1}", cin if j == 0 else ch, ch, k2, sh, sw, cur, False)
        c = ch
    cur = conv("final", c, cfg.num_classes, 1, h, w, cur, False)
    if input_scale is not None:
        layers.append(("output_resize", 8 * cfg.num_classes * height * width))
        if (h, w) != (height, width):
            mem.produce("output", cfg.num_classes * height * width)
            mem.free(cur)
    total = sum(f for _, f in layers)
    return CostReport(total, layers, mem.peak, (height, width))


# ---------------------------------------------------------------------------
# Pareto frontier


def pareto_mask(accuracy: Sequence[float], cost: Sequence[float]) -> np.ndarray:
    """True for points no other point dominates (higher-or-equal accuracy at strictly lower
    cost, or strictly higher accuracy at lower-or-equal cost). O(n log n)."""
    acc = np.asarray(accuracy, dtype=np.float64)
    cst = np.asarray(cost, dtype=np.float64)
    n = len(acc)
    keep = np.zeros(n, dtype=bool)
    order = np.lexsort((-acc, cst))
    best_cheaper = -np.inf
    i = 0
    while i < n:
        j = i
        while j < n and cst[order[j]] == cst[order[i]]:
            j += 1
        group = order[i:j]
        group_max = acc[group].max()
        if group_max > best_cheaper:
            keep[group[acc[group] == group_max]] = True
        best_cheaper = max(best_cheaper, group_max)
        i = j
    return keep


def pareto_front(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated (accuracy, cost) pairs in their input order."""
    if len(points) == 0:
        raise ValueError("pareto_front needs at least one point")
    acc, cst = zip(*points)
    mask = pareto_mask(acc, cst)
    return [p for p, m in zip(points, mask) if m]


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SelectionConstraint:
    alpha: float
    metric: str = "mean_dice"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


class InfeasibleSelection(Exception):
    """No evaluated factor reaches the accuracy floor."""

    def __init__(self, alpha: float, max_accuracy: float):
        super().__init__(f"no factor reaches accuracy {alpha:g}; best achievable is {max_accuracy:.4f}")
        self.alpha = alpha
        self.max_accuracy = max_accuracy


def _accuracy(record, metric: str) -> float:
    if metric.startswith("dice_label_"):
        return record.per_label[int(metric.rsplit("_", 1)[1]) - 1]
    return getattr(record, metric)


def select_factor(curve, constraint: SelectionConstraint):
    """Cheapest grid record whose accuracy is at least ``alpha``.

    Cost ties go to the more accurate record, then to the smaller factor, so
    the choice always lies on the Pareto frontier. Returns the record; its
    ``phi`` is the selected factor.
    """
    records = list(curve.records)
    if not records:
        raise ValueError("empty curve")
    feasible = [r for r in records if _accuracy(r, constraint.metric) >= constraint.alpha]
    if not feasible:
        raise InfeasibleSelection(constraint.alpha, max(_accuracy(r, constraint.metric) for r in records))
    return min(feasible, key=lambda r: (r.flops, -_accuracy(r, constraint.metric), r.phi))


def random_search_select(checkpoint, dataset, constraint: SelectionConstraint, budget: int, rng: np.random.Generator, step: float = 0.01):
    """Evaluate ``budget`` factors drawn without replacement from the grid and select among them.

    Each draw costs one weight prediction plus one pass over ``dataset``; no
    training is involved. Returns the selected record.
    """
    from .evaluation import factor_grid, sweep

    if budget < 1:
        raise ValueError("budget must be >= 1")
    grid = factor_grid(step)
    picks = rng.choice(len(grid), size=min(budget, len(grid)), replace=False)
    phis = sorted(grid[i] for i in picks)
    return select_factor(sweep(checkpoint, dataset, phis=phis), constraint)


def frontier_report(curve, selected_phi: Optional[float] = None, metric: str = "mean_dice") -> str:
    """CSV ``phi,accuracy,flops,on_frontier,selected`` over the curve's records."""
    records = list(curve.records)
    acc = [_accuracy(r, metric) for r in records]
    mask = pareto_mask(acc, [r.flops for r in records])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["phi", "accuracy", "flops", "on_frontier", "selected"])
    for r, a, m in zip(records, acc, mask):
        writer.writerow([f"{r.phi:.10g}", repr(float(a)), r.flops, int(m), int(selected_phi is not None and r.phi == selected_phi)])
    return buf.getvalue()
