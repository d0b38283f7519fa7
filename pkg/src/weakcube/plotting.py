"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import project_points  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "figure.dpi": 120,
    "lines.linewidth": 1.4,
}

# edges between corners differing in exactly one sign bit
CUBE_EDGES = [(a, a | (1 << bit)) for a in range(8) for bit in range(3) if not a & (1 << bit)]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_ap_vs_tau(result, path, title="AP3D vs IoU threshold"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for cls, rec in sorted(result.per_class.items()):
            taus = sorted(rec["ap_per_tau"])
            ax.plot(taus, [rec["ap_per_tau"][t] for t in taus], marker="o", ms=3, label=cls)
        taus = sorted(result.mean_ap_per_tau)
        ax.plot(taus, [result.mean_ap_per_tau[t] for t in taus], "k--", label="mean")
        ax.set_xlabel("IoU3D threshold")
        ax.set_ylabel("AP")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.legend(frameon=False, ncol=2)
        _save(fig, path)


def plot_pr_curves(result, tau, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        for (cls, t), (rec, prec) in sorted(result.curves.items()):
            if t != tau or len(rec) == 0:
                continue
            ax.step(np.concatenate([[0], rec]), np.concatenate([[1], prec]), where="post", label=cls)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_title(f"PR at IoU3D {tau:g}")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(frameon=False)
        _save(fig, path)


def plot_loss_curves(histories: dict[str, list[float]], path):
    """Per-scene loss traces, each normalized by its initial value."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for name in sorted(histories):
            h = np.asarray(histories[name], dtype=float)
            if len(h) == 0:
                continue
            scale = abs(h[0]) if h[0] != 0 else 1.0
            ax.plot(np.arange(len(h)), h / scale, color="C0", alpha=0.35, lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss / initial |loss|")
        ax.set_title(f"fitting loss ({len(histories)} scenes)")
        _save(fig, path)


def plot_scene_overlay(depth, cam, gt_corners, fit_corners, path, boxes2d=None):
    """Depth map with projected ground-truth (green) and fitted (red) cube wireframes."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.6))
        ax.imshow(depth, cmap="magma_r")
        for corners, color in [(c, "tab:green") for c in gt_corners] + \
                              [(c, "tab:red") for c in fit_corners]:
            px, _ = project_points(corners, cam, clamp=True)
            for a, b in CUBE_EDGES:
                ax.plot(px[[a, b], 0], px[[a, b], 1], color=color, lw=0.9)
        for b in boxes2d or []:
            ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height, fill=False,
                                       ec="white", ls=":", lw=0.8))
        ax.set_xlim(-0.5, cam.width - 0.5)
        ax.set_ylim(cam.height - 0.5, -0.5)
        ax.set_axis_off()
        _save(fig, path)
