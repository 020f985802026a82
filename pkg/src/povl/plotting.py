"""PNG renderings of the report CSVs (headless Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_rmse_horizon(rows, path):
    """rows: dicts with horizon_s and one column per predictor."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [k for k in rows[0] if k != "horizon_s"]
    h = [float(r["horizon_s"]) for r in rows]
    for name in names:
        ax.plot(h, [float(r[name]) for r in rows], marker="o", label=name)
    ax.set_xlabel("prediction horizon (s)")
    ax.set_ylabel("RMSE (m)")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_rmse_obslength(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [k for k in rows[0] if k not in ("t_obs", "seconds")]
    x = [float(r["seconds"]) for r in rows]
    for name in names:
        ax.plot(x, [float(r[name]) for r in rows], marker=".", label=name)
    ax.set_xlabel("observation length (s)")
    ax.set_ylabel("RMSE over 5 s (m)")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_planning(table: dict, path):
    """table: {predictor: {bucket: {"ittc", "jerk", "force"}}} as grouped bars."""
    preds = list(table)
    buckets = list(next(iter(table.values())))
    metrics = [("ittc", "iTTC x100 (1/s)"), ("jerk", "jerk (m/s^3)"), ("force", "force (kN)")]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    x = np.arange(len(buckets))
    w = 0.8 / max(len(preds), 1)
    for ax, (key, label) in zip(axes, metrics):
        for i, p in enumerate(preds):
            vals = [table[p][b][key] for b in buckets]
            ax.bar(x + (i - (len(preds) - 1) / 2) * w, vals, w, label=p)
        ax.set_xticks(x)
        ax.set_xticklabels([f"<{b:g}" for b in buckets])
        ax.set_xlabel("distance to other vehicles (m)")
        ax.set_title(label)
    axes[0].legend()
    _save(fig, path)


def plot_field(X, Y, U, path, clip: float = 20.0):
    fig, ax = plt.subplots(figsize=(10, 3))
    m = ax.pcolormesh(X, Y, np.minimum(U, clip), shading="auto", cmap="viridis")
    fig.colorbar(m, ax=ax, label=f"U_env (clipped at {clip:g})")
    ax.set_xlabel("X (m)")
    ax.set_ylabel("Y (m)")
    ax.set_aspect("auto")
    _save(fig, path)


def plot_plan(rows, path):
    """Signals of one plan: lateral position, speed and both controls over time."""
    t = [float(r["t"]) for r in rows]
    panels = [("Y", "Y (m)"), ("u", "u (m/s)"), ("F_u", "F_u (N)"), ("delta_f", "delta_f (rad)")]
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 7), sharex=True)
    for ax, (key, label) in zip(axes, panels):
        vals = [float(r[key]) if r[key] != "" else np.nan for r in rows]
        ax.plot(t, vals)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("t (s)")
    _save(fig, path)
