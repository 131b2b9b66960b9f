"""Segmentation and adversarial objectives.

Two parallel implementations live here:

* float64 numpy functions (``dice_loss``, ``smoothness_loss`` ...) with
  hand-derived gradients, used by the gradient-check suite and anywhere a
  single exact value is needed;
* batched torch functions (suffix ``_t``) used by the training loops, where
  autograd supplies gradients.

The two are cross-checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonBinaryGroundTruth, ShapeMismatch

EPS_LOG = 1e-7
DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.4  # disc dice
    lambda2: float = 0.6  # cup dice
    lambda3: float = 1.0  # smoothness, both channels

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3)


def _check(p, y, binary=True):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {y.shape}")
    if binary and not np.isin(y, (0.0, 1.0)).all():
        raise NonBinaryGroundTruth("ground truth must be binary")
    return p, y


# ---------------------------------------------------------------- dice


def dice_loss(p, y, eps=DICE_EPS):
    """``1 - (2*sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps)``.

    With ``eps=0`` and an all-zero prediction and target the loss is 0.
    """
    p, y = _check(p, y)
    num = 2.0 * np.sum(p * y) + eps
    den = np.sum(p * p) + np.sum(y * y) + eps
    if den == 0:
        return 0.0
    return float(1.0 - num / den)


def dice_loss_grad(p, y, eps=DICE_EPS):
    p, y = _check(p, y)
    num = 2.0 * np.sum(p * y) + eps
    den = np.sum(p * p) + np.sum(y * y) + eps
    if den == 0:
        return np.zeros_like(p)
    # quotient rule on -num/den
    return -(2.0 * y * den - num * 2.0 * p) / den**2


# ---------------------------------------------------------------- smoothness


def _same_label_pairs(y):
    """Masks of horizontal and vertical neighbour pairs with both labels 1."""
    h = (y[:, :-1] == 1) & (y[:, 1:] == 1)
    v = (y[:-1, :] == 1) & (y[1:, :] == 1)
    return h, v


def smoothness_loss(p, y):
    """Directed four-neighbour sum of ``B_ij * y_i * |p_i - p_j|``.

    ``B_ij * y_i`` is non-zero only when both labels are 1, and then the
    ordered pairs (i, j) and (j, i) contribute equally, so each qualifying
    undirected edge counts twice.  Summation is exact (``math.fsum``).
    """
    p, y = _check(p, y)
    h, v = _same_label_pairs(y)
    dh = np.abs(p[:, :-1] - p[:, 1:])[h]
    dv = np.abs(p[:-1, :] - p[1:, :])[v]
    return math.fsum(np.concatenate([2.0 * dh, 2.0 * dv]).tolist())


def smoothness_loss_grad(p, y):
    """Subgradient with ``sign(0) = 0``."""
    p, y = _check(p, y)
    h, v = _same_label_pairs(y)
    g = np.zeros_like(p)
    sh = 2.0 * np.sign(p[:, :-1] - p[:, 1:]) * h
    sv = 2.0 * np.sign(p[:-1, :] - p[1:, :]) * v
    g[:, :-1] += sh
    g[:, 1:] -= sh
    g[:-1, :] += sv
    g[1:, :] -= sv
    return g


# ---------------------------------------------------------------- joint


def seg_loss_terms(pred, labels, eps=DICE_EPS):
    """The three weighted components (disc dice, cup dice, smoothness sum)."""
    yd = labels.disc.astype(np.float64)
    yc = labels.cup.astype(np.float64)
    return (
        dice_loss(pred.disc, yd, eps),
        dice_loss(pred.cup, yc, eps),
        smoothness_loss(pred.disc, yd) + smoothness_loss(pred.cup, yc),
    )


def seg_loss(pred, labels, w=LossWeights(), eps=DICE_EPS):
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs labels {labels.shape}")
    t1, t2, t3 = seg_loss_terms(pred, labels, eps)
    return w.lambda1 * t1 + w.lambda2 * t2 + w.lambda3 * t3


def seg_loss_grad(pred, labels, w=LossWeights(), eps=DICE_EPS):
    """Gradient w.r.t. (disc, cup) probability maps, returned as (H, W, 2)."""
    yd = labels.disc.astype(np.float64)
    yc = labels.cup.astype(np.float64)
    gd = w.lambda1 * dice_loss_grad(pred.disc, yd, eps) + w.lambda3 * smoothness_loss_grad(pred.disc, yd)
    gc = w.lambda2 * dice_loss_grad(pred.cup, yc, eps) + w.lambda3 * smoothness_loss_grad(pred.cup, yc)
    return np.stack([gd, gc], axis=-1)


# ---------------------------------------------------------------- adversarial


def _scores(s):
    return np.clip(np.asarray(s, dtype=np.float64), EPS_LOG, 1.0 - EPS_LOG)


def discriminator_loss(src_scores=None, tgt_scores=None):
    """``-sum log D(src) - sum log(1 - D(tgt))`` over the patch grid.

    Either batch may be omitted so the source and target halves can be fed
    on alternate calls.
    """
    if src_scores is None and tgt_scores is None:
        raise ValueError("need source scores, target scores or both")
    if src_scores is not None and tgt_scores is not None and np.shape(src_scores) != np.shape(tgt_scores):
        raise ShapeMismatch(f"score grids differ: {np.shape(src_scores)} vs {np.shape(tgt_scores)}")
    total = 0.0
    if src_scores is not None:
        total -= float(np.sum(np.log(_scores(src_scores))))
    if tgt_scores is not None:
        total -= float(np.sum(np.log(1.0 - _scores(tgt_scores))))
    return total


def _inside(s):
    s = np.asarray(s, dtype=np.float64)
    return (s > EPS_LOG) & (s < 1.0 - EPS_LOG)


def discriminator_loss_grad(src_scores=None, tgt_scores=None):
    """Gradients w.r.t. the source and target score grids (zero where clamped)."""
    gs = gt = None
    if src_scores is not None:
        gs = np.where(_inside(src_scores), -1.0 / _scores(src_scores), 0.0)
    if tgt_scores is not None:
        gt = np.where(_inside(tgt_scores), 1.0 / (1.0 - _scores(tgt_scores)), 0.0)
    return gs, gt


def adversarial_loss(tgt_scores):
    return -float(np.sum(np.log(_scores(tgt_scores))))


def adversarial_loss_grad(tgt_scores):
    return np.where(_inside(tgt_scores), -1.0 / _scores(tgt_scores), 0.0)


# ---------------------------------------------------------------- torch (training)
#
# Shapes: probability maps and labels are (B, H, W); score grids are
# (B, 1, m, n).  Every function returns one value per batch element.


def dice_loss_t(p, y, eps=DICE_EPS):
    dims = tuple(range(1, p.dim()))
    num = 2.0 * (p * y).sum(dims) + eps
    den = (p * p).sum(dims) + (y * y).sum(dims) + eps
    if eps == 0:
        safe = torch.where(den == 0, torch.ones_like(den), den)
        return torch.where(den == 0, torch.zeros_like(den), 1.0 - num / safe)
    return 1.0 - num / den


def smoothness_loss_t(p, y):
    h = (y[:, :, :-1] * y[:, :, 1:]) * (p[:, :, :-1] - p[:, :, 1:]).abs()
    v = (y[:, :-1, :] * y[:, 1:, :]) * (p[:, :-1, :] - p[:, 1:, :]).abs()
    return 2.0 * (h.sum((1, 2)) + v.sum((1, 2)))


def seg_loss_t(pred, target, w=LossWeights(), eps=DICE_EPS):
    """Joint loss for (B, 2, H, W) predictions and targets (disc, cup)."""
    pd, pc = pred[:, 0], pred[:, 1]
    yd, yc = target[:, 0], target[:, 1]
    out = w.lambda1 * dice_loss_t(pd, yd, eps) + w.lambda2 * dice_loss_t(pc, yc, eps)
    if w.lambda3:
        out = out + w.lambda3 * (smoothness_loss_t(pd, yd) + smoothness_loss_t(pc, yc))
    return out


def bce_loss_t(pred, target):
    """Per-sample mean binary cross-entropy over both channels (baseline only)."""
    p = pred.clamp(EPS_LOG, 1 - EPS_LOG)
    ll = target * torch.log(p) + (1 - target) * torch.log(1 - p)
    return -ll.mean(dim=tuple(range(1, pred.dim())))


def discriminator_loss_t(src_scores=None, tgt_scores=None):
    total = 0.0
    if src_scores is not None:
        s = src_scores.clamp(EPS_LOG, 1 - EPS_LOG)
        total = total - torch.log(s).flatten(1).sum(1)
    if tgt_scores is not None:
        t = tgt_scores.clamp(EPS_LOG, 1 - EPS_LOG)
        total = total - torch.log(1 - t).flatten(1).sum(1)
    return total


def adversarial_loss_t(tgt_scores):
    t = tgt_scores.clamp(EPS_LOG, 1 - EPS_LOG)
    return -torch.log(t).flatten(1).sum(1)


# Logit-space forms used for training.  They equal the clamped losses above
# whenever the score lies inside [EPS_LOG, 1 - EPS_LOG]; outside that band
# the clamp would zero the gradient and a saturated discriminator could
# never recover, while softplus keeps a unit slope.


def discriminator_loss_logits_t(src_logits=None, tgt_logits=None):
    total = 0.0
    if src_logits is not None:
        total = total + F.softplus(-src_logits).flatten(1).sum(1)
    if tgt_logits is not None:
        total = total + F.softplus(tgt_logits).flatten(1).sum(1)
    return total


def adversarial_loss_logits_t(tgt_logits):
    return F.softplus(-tgt_logits).flatten(1).sum(1)
