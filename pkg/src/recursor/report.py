"""Figure rendering for run artifacts.

Every function writes one PNG next to the delimited outputs and returns
the path.  The Agg backend keeps this headless-safe.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .threshold import GRID_STEP, ThresholdFit, log_beta_pdf, posterior_safe


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_loss_curves(history: list, path):
    """Total loss plus any component series present in the step metrics."""
    steps = [m["step"] for m in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [m["loss"] for m in history], label="loss", lw=2)
    for key in sorted({k for m in history for k in m}):
        if key in ("loss", "step", "grad_norm", "lr", "depth_counts", "max_violation"):
            continue
        series = [m.get(key) for m in history]
        if all(isinstance(v, (int, float)) for v in series):
            ax.plot(steps, series, label=key, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _finish(fig, path)


def save_router_histogram(selected, unselected, path, bins: int = 40):
    fig, ax = plt.subplots(figsize=(6, 4))
    edges = np.linspace(0, 1, bins + 1)
    ax.hist(np.asarray(selected).reshape(-1), bins=edges, alpha=0.6,
            label="selected", density=True)
    ax.hist(np.asarray(unselected).reshape(-1), bins=edges, alpha=0.6,
            label="unselected", density=True)
    ax.set_xlabel("router score")
    ax.set_ylabel("density")
    ax.legend()
    return _finish(fig, path)


def save_depth_histogram(depths, n_recursions: int, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    counts = np.bincount(np.asarray(depths, dtype=np.int64) - 1,
                         minlength=n_recursions)
    ax.bar(np.arange(1, n_recursions + 1), counts)
    ax.set_xlabel("exit depth")
    ax.set_ylabel("tokens")
    ax.set_xticks(np.arange(1, n_recursions + 1))
    return _finish(fig, path)


def save_timeline_figure(timeline, path):
    """Width of each batched stage application over simulated time."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for e in timeline.events:
        color = "tab:orange" if e["kind"] == "head" else "tab:blue"
        ax.broken_barh([(e["t0"], e["t1"] - e["t0"])], (0, e["width"]),
                       facecolors=color, alpha=0.5, edgecolors="black", lw=0.3)
    ax.axhline(timeline.max_batch, ls="--", color="gray", lw=1)
    ax.set_xlabel("tick")
    ax.set_ylabel("batch width")
    ax.set_title(f"{timeline.mode}: finish {timeline.finish:g}")
    return _finish(fig, path)


def save_posterior_figure(fit: ThresholdFit, path):
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    lam = np.arange(GRID_STEP, 1.0, GRID_STEP)
    if fit.pos and fit.neg:
        ax0.plot(lam, [np.exp(log_beta_pdf(x, fit.pos.a, fit.pos.b)) for x in lam],
                 label="safe exits")
        ax0.plot(lam, [np.exp(log_beta_pdf(x, fit.neg.a, fit.neg.b)) for x in lam],
                 label="unsafe exits")
        ax1.plot(lam, [posterior_safe(x, fit.pos, fit.neg) for x in lam])
    ax0.set_ylabel("density")
    ax0.legend()
    ax1.axvline(fit.threshold, color="red", ls="--",
                label=f"threshold {fit.threshold:.4f}")
    ax1.set_xlabel("confidence")
    ax1.set_ylabel("P(safe)")
    ax1.legend()
    return _finish(fig, path)


def save_exit_confidence_figure(traces, path):
    """Per-depth confidence trajectories from decode traces."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for t in traces:
        ax.plot(range(1, len(t.confidences) + 1), t.confidences,
                alpha=0.3, color="tab:blue")
    ax.set_xlabel("recursion depth")
    ax.set_ylabel("top-token confidence")
    ax.set_ylim(0, 1.05)
    return _finish(fig, path)
