"""Figures rendered next to the CSV outputs. CSV stays the contract; plots are a convenience.

Figures are built on ``matplotlib.figure.Figure`` directly so no GUI backend
or global pyplot state is involved.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "hyperscale",  # stable element ids across reruns
}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    with matplotlib.rc_context(STYLE):
        fig.savefig(path, metadata=meta, bbox_inches="tight")
    return path


def _figure(ncols: int = 1, width: float = 3.4) -> tuple[Figure, list]:
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(width * ncols, 2.6))
        axes = [fig.add_subplot(1, ncols, i + 1) for i in range(ncols)]
    return fig, axes


def sweep_figure(curves: dict, path, baselines: Optional[dict] = None) -> Path:
    """Dice vs factor and Dice vs GFLOPs side by side.

    ``curves`` maps a legend label to a SweepCurve; ``baselines`` maps a label
    to a single (phi, dice, flops) point drawn as a marker.
    """
    with matplotlib.rc_context(STYLE):
        fig, (ax_phi, ax_cost) = _figure(2)
        for label, curve in curves.items():
            phis = [r.phi for r in curve.records]
            dice = [r.mean_dice for r in curve.records]
            gflops = [r.flops / 1e9 for r in curve.records]
            ax_phi.plot(phis, dice, lw=1.2, label=label)
            ax_cost.plot(gflops, dice, lw=1.2, label=label)
        for label, (phi, dice, flops) in (baselines or {}).items():
            ax_phi.plot([phi], [dice], "o", ms=4, label=label)
            ax_cost.plot([flops / 1e9], [dice], "o", ms=4, label=label)
        ax_phi.set_xlabel("rescaling factor φ")
        ax_cost.set_xlabel("inference GFLOPs")
        for ax in (ax_phi, ax_cost):
            ax.set_ylabel("mean foreground Dice")
        ax_phi.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, path)


def frontier_figure(accuracy: Sequence[float], cost: Sequence[float], mask: Sequence[bool], path, selected: Optional[int] = None) -> Path:
    """Scatter of (GFLOPs, accuracy) with the non-dominated points joined."""
    with matplotlib.rc_context(STYLE):
        fig, (ax,) = _figure(1, width=4.0)
        g = [c / 1e9 for c in cost]
        ax.scatter(g, accuracy, s=5, c="0.7", lw=0, label="evaluated")
        front = sorted((gi, ai) for gi, ai, m in zip(g, accuracy, mask) if m)
        if front:
            fx, fy = zip(*front)
            ax.plot(fx, fy, "-o", ms=3, lw=1, color="C3", label="frontier")
        if selected is not None:
            ax.plot([g[selected]], [accuracy[selected]], "*", ms=10, color="C0", label="selected")
        ax.set_xlabel("inference GFLOPs")
        ax.set_ylabel("mean foreground Dice")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
    return _save(fig, path)


def prior_width_figure(report, path) -> Path:
    """Dice at the evaluation factor against prior radius; one dot per seed and the seed mean."""
    from .experiments import prior_width_means

    means = prior_width_means(report)
    with matplotlib.rc_context(STYLE):
        fig, (ax,) = _figure(1)
        hyper = [r for r in report.rows if r["model"] == "hyper"]
        ax.scatter([r["r"] for r in hyper], [r["mean_dice"] for r in hyper], s=8, c="0.6", lw=0)
        radii = sorted(k for k in means if k is not None)
        ax.plot(radii, [means[r] for r in radii], "-o", ms=3, label="hypernetwork")
        if None in means:
            ax.axhline(means[None], ls="--", lw=1, color="0.3", label="fixed baseline")
        ax.set_xlabel("prior radius r")
        ax.set_ylabel("Dice")
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, path)


def transfer_figure(report, path) -> Path:
    with matplotlib.rc_context(STYLE):
        fig, (ax,) = _figure(1)
        for model, label in (("hyper", "hypernetwork weights"), ("fixed", "baseline weights")):
            rows = [r for r in report.rows if r["model"] == model]
            ax.plot([r["phi"] for r in rows], [r["mean_dice"] for r in rows], "-o", ms=2.5, label=label)
        ax.set_xlabel("inference factor φ")
        ax.set_ylabel("Dice")
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, path)


def cv_figure(report, path) -> Path:
    """Median and 90th percentile CV per layer slot (weights only)."""
    rows = [r for r in report.rows if str(r["slot"]).endswith("weight")]
    with matplotlib.rc_context(STYLE):
        fig, (ax,) = _figure(1, width=max(3.4, 0.22 * len(rows)))
        x = range(len(rows))
        ax.bar(x, [r["p90_cv"] for r in rows], color="0.8", label="90th pct")
        ax.bar(x, [r["median_cv"] for r in rows], color="C0", label="median")
        ax.set_xticks(list(x))
        ax.set_xticklabels([str(r["slot"]).rsplit(".", 1)[0] for r in rows], rotation=90, fontsize=6)
        ax.set_yscale("log")
        ax.set_ylabel("CV across φ")
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, path)
