"""Report figures rendered to files (non-interactive backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_error_cdfs(curves: dict, path, title: str = "Localization error") -> None:
    """Empirical CDFs, one line per ``label -> errors``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, errors in curves.items():
        e = np.sort(np.asarray(errors, dtype=float))
        if not len(e):
            continue
        ax.step(e, np.arange(1, len(e) + 1) / len(e), where="post", label=f"{label} (median {np.median(e):.3f} m)")
    ax.set_xlabel("position error (m)")
    ax.set_ylabel("fraction of samples")
    ax.set_ylim(0, 1.02)
    ax.set_xlim(left=0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title(title)
    _save(fig, path)


def plot_track_counts(frame_ids, counts: dict, min_inliers: int, path, title: str = "Tracked points") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, c in counts.items():
        ax.plot(frame_ids[:len(c)], c, label=label, lw=1)
    ax.axhline(min_inliers, color="k", ls="--", lw=0.8, label=f"min inliers ({min_inliers})")
    ax.set_xlabel("frame")
    ax.set_ylabel("points in tracking set")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title(title)
    _save(fig, path)


def plot_trajectories(truth_xyz, estimates: dict, path, title: str = "Trajectory (top view)") -> None:
    """Top view: corridor axis (z) horizontal, lateral (x) vertical."""
    fig, ax = plt.subplots(figsize=(8, 3))
    if truth_xyz is not None:
        t = np.asarray(truth_xyz, dtype=float)
        ax.plot(t[:, 2], t[:, 0], "k-", lw=1.2, label="truth")
    for label, xyz in estimates.items():
        e = np.asarray(xyz, dtype=float).reshape(-1, 3)
        ax.plot(e[:, 2], e[:, 0], ".", ms=1.5, label=label)
    ax.set_xlabel("z (m)")
    ax.set_ylabel("x (m)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, markerscale=5)
    ax.set_title(title)
    _save(fig, path)


def plot_stage_times(stage_seconds: dict, frames: int, path, title: str = "Time per frame by stage") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(stage_seconds)
    ms = [1000.0 * stage_seconds[k] / max(frames, 1) for k in names]
    ax.bar(names, ms, color="tab:blue")
    ax.set_ylabel("ms per frame")
    ax.grid(axis="y", alpha=0.3)
    ax.set_title(title)
    _save(fig, path)
