"""Report rendering: delimited output plus matplotlib figures.

Every report path writes machine-readable CSV next to the JSON and a
couple of PNG figures (per-case metric bars, loss curves, tonemapped
image previews) so a run can be inspected without extra tooling.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport
from .metrics import tonemap


def _stem(json_path: str) -> str:
    root, ext = os.path.splitext(json_path)
    return root


def write_report(report: EvalReport, json_path: str) -> list[str]:
    """Write report JSON, a CSV of the per-case metrics, and a metrics
    figure. Returns the list of written paths."""
    import json as _json

    stem = _stem(json_path)
    written = [json_path]
    with open(json_path, "w") as f:
        _json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")

    csv_path = stem + ".csv"
    with open(csv_path, "w") as f:
        f.write("group,cam,light,psnr,ssim\n")
        for c in report.cases:
            f.write(f"{c.group},{c.cam_idx},{c.light_idx},{c.psnr:.4f},{c.ssim:.6f}\n")
    written.append(csv_path)

    fig_path = stem + "_metrics.png"
    labels = [f"c{c.cam_idx}/l{c.light_idx}" for c in report.cases]
    x = np.arange(len(labels))
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 0.5 * len(labels)), 6), sharex=True)
    axes[0].bar(x, [c.psnr for c in report.cases], color="#3b6ea5")
    axes[0].axhline(report.psnr_avg, color="k", lw=0.8, ls="--",
                    label=f"avg {report.psnr_avg:.2f} dB")
    axes[0].set_ylabel("PSNR (dB)")
    axes[0].legend(frameon=False)
    axes[1].bar(x, [c.ssim for c in report.cases], color="#a5703b")
    axes[1].axhline(report.ssim_avg, color="k", lw=0.8, ls="--",
                    label=f"avg {report.ssim_avg:.4f}")
    axes[1].set_ylabel("SSIM")
    axes[1].set_xticks(x)
    axes[1].set_xticklabels(labels, rotation=60, fontsize=7)
    axes[1].legend(frameon=False)
    fig.suptitle(f"{report.scene} [{report.split}] — {len(report.cases)} cases")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    written.append(fig_path)
    return written


def plot_loss_history(history, path: str) -> None:
    """Loss curves (total / color / mask) on a log scale."""
    steps = [r.step for r in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.total for r in history], label="total", lw=1.0)
    ax.plot(steps, [r.color for r in history], label="color", lw=0.8, alpha=0.8)
    ax.plot(steps, [r.mask for r in history], label="mask", lw=0.8, alpha=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_preview_png(hdr: np.ndarray, path: str) -> None:
    """Tonemapped PNG preview of an HDR render."""
    img = tonemap(np.asarray(hdr, dtype=np.float64))
    if img.ndim == 2:
        plt.imsave(path, img, cmap="gray", vmin=0.0, vmax=1.0)
    else:
        plt.imsave(path, np.clip(img, 0.0, 1.0))


def save_comparison_grid(pairs: list[tuple[np.ndarray, np.ndarray, str]], path: str) -> None:
    """Rows of (prediction, ground truth) tonemapped previews."""
    n = len(pairs)
    fig, axes = plt.subplots(n, 2, figsize=(5, 2.4 * n), squeeze=False)
    for i, (pred, gt, label) in enumerate(pairs):
        axes[i][0].imshow(tonemap(pred))
        axes[i][0].set_title(f"pred {label}", fontsize=8)
        axes[i][1].imshow(tonemap(gt))
        axes[i][1].set_title(f"gt {label}", fontsize=8)
        for ax in axes[i]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
