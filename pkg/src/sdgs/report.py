"""Figures for finished runs: training curves, ablation bars and where the
anchors ended up."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synth import inside_ellipsoids, scene_gaussians  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def training_curves(records: list[dict], path) -> Path:
    steps = [r for r in records if "loss" in r]
    if not steps:
        raise ValueError("log has no step records")
    x = np.array([r["step"] for r in steps])
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_psnr, ax_n) = plt.subplots(1, 3, figsize=(10, 3.2))
        ax_loss.semilogy(x, [r["loss"] for r in steps], lw=1)
        ax_loss.set(xlabel="step", ylabel="loss")
        ax_psnr.plot(x, [r["psnr"] for r in steps], lw=1, color="C1")
        ax_psnr.set(xlabel="step", ylabel="PSNR (dB)")
        ax_n.plot(x, [r["anchors"] for r in steps], lw=1, color="C2")
        ax_n.set(xlabel="step", ylabel="anchors")
        fine = [r["step"] for r in steps if r["stage"] == "fine"]
        if fine:
            for ax in (ax_loss, ax_psnr, ax_n):
                ax.axvline(min(fine), color="0.5", ls=":", lw=0.8)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def ablation_chart(rows: list[dict], path) -> Path:
    """Bars of held-out PSNR per variant, anchor counts written on top."""
    if not rows:
        raise ValueError("no ablation rows")
    names = [r["name"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(names, [r["psnr_heldout"] for r in rows], color="0.6")
        bars[0].set_color("C0")
        for b, r in zip(bars, rows):
            ax.annotate(f"{r['anchors']}", (b.get_x() + b.get_width() / 2, b.get_height()),
                        ha="center", va="bottom", fontsize=7)
        lo = min(r["psnr_heldout"] for r in rows)
        ax.set_ylim(max(lo - 3, 0), None)
        ax.set_ylabel("held-out PSNR (dB)")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def anchor_distribution(scene, dataset, path, t: float = 0.0) -> Path:
    """Top-down scatter of deformed anchor positions at ``t``, coloured by the
    scripted region they fall in."""
    pos = scene.deform(float(t)).positions
    dyn = inside_ellipsoids(pos, scene_gaussians(dataset.script, float(t), "dynamic"))
    sta = inside_ellipsoids(pos, scene_gaussians(dataset.script, float(t), "static")) & ~dyn
    rest = ~(dyn | sta)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.2))
        for mask, label, color in ((rest, "elsewhere", "0.75"), (sta, "static", "C0"), (dyn, "dynamic", "C3")):
            ax.scatter(pos[mask, 0], pos[mask, 2], s=6, color=color, label=f"{label} ({int(mask.sum())})")
        ax.set(xlabel="x", ylabel="z", aspect="equal", title=f"anchors at t={t:g}")
        ax.legend(loc="upper right", fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
