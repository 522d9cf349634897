"""Training and evaluation reports: CSV tables plus rendered figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .retarget import jitter_metric


def _ensure_dir(d) -> Path:
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_loss_csv(losses, path, wall_ms=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "wall_ms"])
        for i, v in enumerate(losses):
            ms = wall_ms[i] if wall_ms is not None and i < len(wall_ms) else ""
            w.writerow([i, repr(float(v)), f"{ms:.3f}" if ms != "" else ""])


def plot_loss_curve(losses, path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(np.arange(len(losses)), losses, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean per-sample loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def training_report(losses, out_dir, prefix: str = "train", wall_ms=None) -> dict:
    """Loss curve as CSV and PNG; returns the written paths."""
    d = _ensure_dir(out_dir)
    csv_path = d / f"{prefix}_loss.csv"
    fig_path = d / f"{prefix}_loss.png"
    write_loss_csv(losses, csv_path, wall_ms=wall_ms)
    plot_loss_curve(losses, fig_path)
    return {"csv": str(csv_path), "figure": str(fig_path)}


def _stack_values(frames) -> np.ndarray:
    return np.stack([f.values for f in frames])


def evaluate_streams(pred, truth) -> dict:
    """RMSE (overall and per dimension) plus jitter delta between streams."""
    pred = list(pred)
    truth = list(truth)
    if len(pred) != len(truth):
        raise ValidationError(f"stream lengths differ: {len(pred)} vs {len(truth)}")
    if len(pred) == 0:
        raise ValidationError("streams are empty")
    P = _stack_values(pred)
    T = _stack_values(truth)
    if P.shape != T.shape:
        raise ValidationError(f"stream widths differ: {P.shape} vs {T.shape}")
    err = P - T
    per_dim = np.sqrt(np.mean(err * err, axis=0))
    overall = float(np.sqrt(np.mean(err * err)))
    jp = jitter_metric(pred) if len(pred) >= 2 else 0.0
    jt = jitter_metric(truth) if len(truth) >= 2 else 0.0
    return {
        "frames": len(pred),
        "rmse": overall,
        "rmse_per_dim": per_dim,
        "rmse_max_dim": float(np.max(per_dim)),
        "jitter_pred": jp,
        "jitter_truth": jt,
        "jitter_delta": float(jp - jt),
    }


def write_eval_csv(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim", "rmse"])
        for i, v in enumerate(summary["rmse_per_dim"]):
            w.writerow([i, repr(float(v))])


def plot_eval_figures(pred, truth, summary: dict, out_dir, prefix: str = "eval") -> dict:
    d = _ensure_dir(out_dir)
    P = _stack_values(pred)
    T = _stack_values(truth)

    overlay = d / f"{prefix}_overlay.png"
    n_show = min(4, P.shape[1])
    fig, axes = plt.subplots(n_show, 1, figsize=(7.0, 1.8 * n_show), sharex=True)
    axes = np.atleast_1d(axes)
    span = min(len(pred), 240)
    for k, ax in enumerate(axes):
        ax.plot(T[:span, k], lw=1.0, label="truth")
        ax.plot(P[:span, k], lw=1.0, ls="--", label="pred")
        ax.set_ylabel(f"c{k}")
        ax.grid(True, alpha=0.3)
    axes[0].legend(loc="upper right", fontsize=8)
    axes[-1].set_xlabel("frame")
    fig.suptitle("controller overlay (first dims)")
    fig.tight_layout()
    fig.savefig(overlay, dpi=110)
    plt.close(fig)

    hist = d / f"{prefix}_rmse_hist.png"
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    vals = np.asarray(summary["rmse_per_dim"], dtype=float)
    # near-identical values make 30 bin edges collapse to equal floats
    spread = float(np.ptp(vals))
    bins = 30 if spread > 1e-9 * max(1.0, float(np.max(vals))) else 1
    ax.hist(vals, bins=bins, alpha=0.85)
    ax.set_xlabel("per-dimension RMSE")
    ax.set_ylabel("count")
    ax.set_title(f"RMSE {summary['rmse']:.4g}, jitter delta {summary['jitter_delta']:+.4g}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(hist, dpi=110)
    plt.close(fig)

    return {"overlay": str(overlay), "hist": str(hist)}


def eval_report(pred, truth, out_dir, prefix: str = "eval") -> dict:
    """Full evaluation: summary dict plus CSV and figure paths."""
    summary = evaluate_streams(pred, truth)
    d = _ensure_dir(out_dir)
    csv_path = d / f"{prefix}_rmse.csv"
    write_eval_csv(summary, csv_path)
    figures = plot_eval_figures(pred, truth, summary, d, prefix)
    summary["csv"] = str(csv_path)
    summary.update(figures)
    return summary
