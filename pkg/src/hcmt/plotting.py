"""Stress-field images of a saved rollout."""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["plot_rollout"]


def plot_rollout(rollout: dict, out_dir: str | Path, every: int = 1, dpi: int = 80) -> list[Path]:
    """One PNG per step with predicted (top) and ground-truth (bottom) stress."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.tri import Triangulation

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = rollout["cells"]
    pred_x, pred_s = rollout["positions"], rollout["stress"]
    true_x, true_s = rollout["truth_positions"], rollout["truth_stress"]
    vmax = float(max(np.abs(true_s).max(), 1e-12))
    lo = np.minimum(pred_x.min(axis=(0, 1)), true_x.min(axis=(0, 1)))
    hi = np.maximum(pred_x.max(axis=(0, 1)), true_x.max(axis=(0, 1)))
    pad = 0.05 * (hi - lo).max()
    written = []
    for t in range(0, pred_x.shape[0], every):
        fig, axes = plt.subplots(2, 1, figsize=(6, 5))
        for ax, x, s, title in ((axes[0], pred_x[t], pred_s[t], "predicted"), (axes[1], true_x[t], true_s[t], "ground truth")):
            tri = Triangulation(x[:, 0], x[:, 1], cells)
            ax.tripcolor(tri, s, shading="gouraud", cmap="viridis", vmin=0.0, vmax=vmax)
            ax.triplot(tri, lw=0.2, color="k")
            ax.set_xlim(lo[0] - pad, hi[0] + pad)
            ax.set_ylim(lo[1] - pad, hi[1] + pad)
            ax.set_aspect("equal")
            ax.set_title(f"{title}, step {t}", fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        path = out / f"stress_{t:04d}.png"
        fig.savefig(path, dpi=dpi, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
