"""Desk-scale analysis studies built on trained checkpoints.

Every study returns an :class:`ExperimentReport` whose CSV starts with a
``# study: <id>`` comment line. Rows come out in canonical grid order, and
floats are written with ``repr`` so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cost import flops as cost_flops
from .cost import pareto_mask
from .data import Dataset
from .evaluation import evaluate, factor_grid
from .training import PriorSpec, TrainConfig, fit
from .unet import RescalePolicy, UNetConfig

logger = logging.getLogger(__name__)


@dataclass
class ExperimentReport:
    study: str
    columns: list[str]
    rows: list[dict]
    grid: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    path: Optional[Path] = None

    def column(self, name: str, **where) -> list:
        return [r[name] for r in self.rows if all(r[k] == v for k, v in where.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# study: {self.study}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        self.path = path
        return path


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else repr(float(value))
    return str(value)


def read_report(path) -> ExperimentReport:
    """Parse a study CSV back; numeric cells come back as floats."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# study:"):
        raise ValueError(f"{path}: missing '# study:' header line")
    study = lines[0].split(":", 1)[1].strip()
    reader = csv.reader(lines[1:])
    columns = next(reader)
    rows = []
    for raw in reader:
        row = {}
        for c, v in zip(columns, raw):
            try:
                row[c] = float(v) if v != "" else None
            except ValueError:
                row[c] = v
        rows.append(row)
    return ExperimentReport(study, columns, rows, path=Path(path))


# ---------------------------------------------------------------------------
# prior width


def prior_width_study(
    net_cfg: UNetConfig,
    base: TrainConfig,
    train: Dataset,
    val: Dataset,
    radii: Sequence[float],
    seeds: Sequence[int],
    test: Optional[Dataset] = None,
    eval_phi: float = 0.5,
    progress: Optional[Callable[[str], None]] = None,
) -> ExperimentReport:
    """Train one hypernetwork per (radius, seed) on U(0.5 - r, 0.5 + r), plus a fixed baseline per seed.

    Every model is scored at ``eval_phi`` on ``test`` (``val`` if omitted).
    """
    for r in radii:
        if not 0.0 <= r <= 0.5:
            raise ValueError(f"prior radius must lie in [0, 0.5], got {r}")
    test = test if test is not None else val
    policy = RescalePolicy.single(eval_phi)
    rows = []

    def run(kind, r, cfg):
        if progress:
            progress(f"{kind} r={r} seed={cfg.seed}")
        ck = fit(net_cfg, cfg, train, val)
        result = evaluate(ck.weights(policy), policy, test, net_cfg)
        rows.append(
            {
                "model": kind,
                "r": r,
                "seed": cfg.seed,
                "eval_phi": eval_phi,
                "mean_dice": result.mean_dice,
                "best_val_loss": ck.meta.get("best_val"),
                "best_step": ck.step,
            }
        )

    for r in radii:
        for seed in seeds:
            run("hyper", r, replace(base, mode="hyper", num_factors=1, prior=PriorSpec.centered(0.5, r), seed=seed))
    for seed in seeds:
        run("fixed", None, replace(base, mode="fixed", num_factors=1, phi=eval_phi, seed=seed))
    cols = ["model", "r", "seed", "eval_phi", "mean_dice", "best_val_loss", "best_step"]
    return ExperimentReport("prior_width", cols, rows, {"r": list(radii), "eval_phi": eval_phi}, list(seeds))


def prior_width_means(report: ExperimentReport) -> dict:
    """Seed-averaged Dice per radius; the fixed baseline is keyed ``None``."""
    out: dict = {}
    for row in report.rows:
        key = None if row["model"] == "fixed" else row["r"]
        out.setdefault(key, []).append(row["mean_dice"])
    return {k: float(np.mean(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# transfer


def transfer_study(hyper_ckpt, fixed_ckpt, dataset: Dataset, phis: Sequence[float], source_phi: float = 0.5) -> ExperimentReport:
    """Run frozen weights at factors they were not produced for.

    The hypernetwork is queried exactly once, at ``source_phi``; both weight
    vectors then stay fixed while the network's factor moves along ``phis``.
    """
    if hyper_ckpt.mode != "hyper" or hyper_ckpt.num_factors != 1:
        raise ValueError("transfer_study needs a single-factor hypernetwork checkpoint")
    if fixed_ckpt.mode != "fixed":
        raise ValueError("transfer_study needs a fixed-factor baseline checkpoint")
    if hyper_ckpt.net_config != fixed_ckpt.net_config:
        raise ValueError("the two checkpoints use different network configurations")
    cfg = hyper_ckpt.net_config
    frozen = {
        "hyper": hyper_ckpt.weights(RescalePolicy.single(source_phi)),
        "fixed": fixed_ckpt.weights(),
    }
    source = {"hyper": source_phi, "fixed": fixed_ckpt.phi}
    h, w = dataset.image_size
    rows = []
    for model in ("hyper", "fixed"):
        for phi in phis:
            policy = RescalePolicy.single(phi)
            result = evaluate(frozen[model], policy, dataset, cfg)
            rows.append(
                {
                    "model": model,
                    "source_phi": source[model],
                    "phi": phi,
                    "mean_dice": result.mean_dice,
                    "flops": cost_flops(cfg, policy, h, w).total,
                }
            )
    cols = ["model", "source_phi", "phi", "mean_dice", "flops"]
    return ExperimentReport("transfer", cols, rows, {"phi": list(phis), "source_phi": source_phi}, [hyper_ckpt.seed, fixed_ckpt.seed])


def transfer_drop(report: ExperimentReport, model: str, phi: float) -> float:
    """Dice lost when moving ``model``'s frozen weights from their source factor to ``phi``."""
    by_phi = {r["phi"]: r["mean_dice"] for r in report.rows if r["model"] == model}
    src = next(r["source_phi"] for r in report.rows if r["model"] == model)
    return by_phi[src] - by_phi[phi]


# ---------------------------------------------------------------------------
# separate factors


def separate_factor_study(ckpt, dataset: Dataset, step: float = 0.1, include_zero: bool = True) -> ExperimentReport:
    """Evaluate a K-factor hypernetwork on the full Cartesian grid of per-step factors.

    With ``step=0.1`` and zero included each axis has 11 values, so K=3 gives
    1331 cells. Each cell gets its Dice, FLOPs and frontier membership.
    """
    if ckpt.mode != "hyper":
        raise ValueError("separate_factor_study needs a hypernetwork checkpoint")
    cfg = ckpt.net_config
    k = ckpt.num_factors
    if k != cfg.num_steps:
        raise ValueError(f"checkpoint hypernetwork takes {k} factor(s); the network has {cfg.num_steps} rescaling steps")
    axis = factor_grid(step, include_zero=include_zero)
    h, w = dataset.image_size
    net = ckpt.hypernet()
    rows = []
    for cell in itertools.product(axis, repeat=k):
        policy = RescalePolicy.separate(list(cell))
        result = evaluate(net.predict(policy), policy, dataset, cfg)
        row = {f"phi_{i + 1}": f for i, f in enumerate(cell)}
        row.update(mean_dice=result.mean_dice, flops=cost_flops(cfg, policy, h, w).total)
        rows.append(row)
    mask = pareto_mask([r["mean_dice"] for r in rows], [r["flops"] for r in rows])
    for row, m in zip(rows, mask):
        row["on_frontier"] = bool(m)
    cols = [f"phi_{i + 1}" for i in range(k)] + ["mean_dice", "flops", "on_frontier"]
    return ExperimentReport("separate", cols, rows, {"axis": axis, "k": k}, [ckpt.seed])


# ---------------------------------------------------------------------------
# coefficient of variation


def weight_cv(ckpt, phis: Sequence[float]) -> np.ndarray:
    """Per-parameter population std / |mean| of predicted weights across ``phis``; NaN where the mean is 0."""
    if ckpt.mode != "hyper":
        raise ValueError("weight CV needs a hypernetwork checkpoint")
    if len(phis) < 2:
        raise ValueError("need at least two factors")
    net = ckpt.hypernet()
    k = ckpt.num_factors

    def policy(phi):
        return RescalePolicy.single(phi) if k == 1 else RescalePolicy.separate([phi] * k)

    stack = np.stack([net.predict(policy(p)).numpy().astype(np.float64) for p in phis])
    return coefficient_of_variation(stack)


def coefficient_of_variation(values: np.ndarray) -> np.ndarray:
    """CV along axis 0 with the population convention; zero mean yields NaN."""
    values = np.asarray(values, dtype=np.float64)
    mu = values.mean(axis=0)
    sd = values.std(axis=0)
    out = np.full(mu.shape, np.nan)
    nz = mu != 0
    out[nz] = sd[nz] / np.abs(mu[nz])
    return out


def weight_cv_analysis(ckpt, phis: Optional[Sequence[float]] = None) -> ExperimentReport:
    """Summarize per-parameter CV for each manifest slot (NaN entries are counted but excluded)."""
    phis = list(phis) if phis is not None else factor_grid(0.1, include_zero=True)
    cv = weight_cv(ckpt, phis)
    rows = []
    for slot in ckpt.manifest:
        block = cv[slot.offset : slot.stop]
        ok = block[~np.isnan(block)]
        stats = (
            {"mean_cv": float(ok.mean()), "median_cv": float(np.median(ok)), "p90_cv": float(np.quantile(ok, 0.9)), "max_cv": float(ok.max())}
            if ok.size
            else dict.fromkeys(("mean_cv", "median_cv", "p90_cv", "max_cv"), math.nan)
        )
        rows.append({"slot": slot.name, "count": slot.size, "undefined": int(block.size - ok.size), **stats})
    cols = ["slot", "count", "undefined", "mean_cv", "median_cv", "p90_cv", "max_cv"]
    return ExperimentReport("cv", cols, rows, {"phi": phis}, [ckpt.seed])
