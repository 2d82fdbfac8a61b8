"""Figure rendering for tuning reports.

Written to files next to the delimited output; uses the non-interactive Agg
backend so report generation works headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_rmse_curve(history, path):
    """Tracking RMSE against trial number."""
    trials = [rec.trial + 1 for rec in history]
    rmse = [rec.rmse for rec in history]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(trials, rmse, marker="o", ms=3.5, lw=1.2)
    ax.set_xlabel("trial")
    ax.set_ylabel("RMSE [m]")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_tracking_figure(log_first, log_last, path, position_indices=(0,)):
    """Reference versus closed-loop position, before and after learning."""
    idx = list(position_indices)
    fig, axes = plt.subplots(len(idx), 2, figsize=(7.5, 2.2 * len(idx)),
                             squeeze=False, sharex=True)
    for row, i in enumerate(idx):
        for col, (log, title) in enumerate(((log_first, "first trial"),
                                            (log_last, "last trial"))):
            ax = axes[row][col]
            k = np.arange(log.states.shape[0])
            ax.plot(k, log.references[:, i], "k--", lw=1.0, label="reference")
            ax.plot(k, log.states[:, i], lw=1.2, label="closed loop")
            if row == 0:
                ax.set_title(title)
            if row == len(idx) - 1:
                ax.set_xlabel("step")
            ax.set_ylabel(f"state[{i}]")
            ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_control_figure(logs, path, u_bd=None):
    """Control traces across trials; dashed lines mark the control bounds."""
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    n_logs = max(len(logs), 1)
    for pos, (trial, log) in enumerate(logs):
        shade = 0.25 + 0.7 * pos / max(n_logs - 1, 1)
        k = np.arange(log.controls.shape[0])
        for j in range(log.controls.shape[1]):
            ax.plot(k, log.controls[:, j], color=(0.1, 0.25, 0.7, shade),
                    lw=1.0, label=f"trial {trial + 1}" if j == 0 else None)
    if u_bd is not None:
        ax.axhline(u_bd, color="gray", ls="--", lw=1.0)
        ax.axhline(-u_bd, color="gray", ls="--", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("control")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
