"""Static report figures: ROC curve, contour overlays and training curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DISC_COLOR = "lime"
CUP_COLOR = "blue"

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _fig(width=3.4, height=3.2, **kw):
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height), **kw)


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def roc_figure(curves, path):
    """``curves``: list of (label, RocCurve, auc)."""
    fig, ax = _fig()
    for label, curve, auc in curves:
        ax.plot(curve.fpr, curve.tpr, lw=1.5, label=f"{label} (AUC = {auc:.3f})")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right", frameon=False)
    return save(fig, path)


def draw_contours(ax, masks, lw=1.0, ls="-"):
    if masks.disc.any():
        ax.contour(masks.disc.astype(float), levels=[0.5], colors=DISC_COLOR, linewidths=lw, linestyles=ls)
    if masks.cup.any():
        ax.contour(masks.cup.astype(float), levels=[0.5], colors=CUP_COLOR, linewidths=lw, linestyles=ls)


def overlay_figure(items, path, ncols=4):
    """Grid of images with predicted (solid) and ground-truth (dashed) contours.

    ``items``: list of (title, pixels, predicted LabelMasks, ground-truth
    LabelMasks or None).
    """
    n = len(items)
    ncols = max(1, min(ncols, n))
    nrows = int(np.ceil(n / ncols))
    fig, axes = _fig(2.2 * ncols, 2.3 * nrows, nrows=nrows, ncols=ncols, squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (title, pixels, pred, gt) in zip(axes.ravel(), items):
        ax.imshow(pixels)
        if gt is not None:
            draw_contours(ax, gt, lw=0.8, ls="--")
        draw_contours(ax, pred, lw=1.2)
        ax.set_title(title)
    return save(fig, path)


def training_curves(records, path, keys=("loss", "seg_loss", "adv_loss", "L_D", "val_loss")):
    fig, ax = _fig(4.5, 3.0)
    for k in keys:
        pts = [(r["step"], r[k]) for r in records if k in r]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, lw=1.2, label=k)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return save(fig, path)


def delta_histogram(records, path):
    fig, ax = _fig(3.4, 2.6)
    ax.hist([r.delta for r in records], bins=20, color="0.4")
    ax.set_xlabel("|CDR_p - CDR_g|")
    ax.set_ylabel("images")
    return save(fig, path)
