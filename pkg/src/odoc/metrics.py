"""Evaluation: hole filling, dice, vertical cup-to-disc ratio, glaucoma
screening ROC and the challenge rank score."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata
from sklearn import metrics as sk_metrics

from .core import LabelMasks
from .errors import DegenerateLabels, EmptyDisc, IdMismatch, ShapeMismatch

log = logging.getLogger(__name__)


# challenge weights for the cup-dice, disc-dice and CDR-error ranks
RANK_WEIGHTS = (0.35, 0.25, 0.4)


def postprocess(masks):
    """Fill holes in disc and cup independently, then clip the cup to the disc."""
    disc = ndimage.binary_fill_holes(masks.disc)
    cup = ndimage.binary_fill_holes(masks.cup) & disc
    return LabelMasks(disc, cup)


def dice_coefficient(pred, gt):
    """``2TP / (2TP + FP + FN)``; two empty masks score 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def vertical_diameter(mask):
    """Tight vertical extent in pixels (inclusive); 0 for an empty mask."""
    rows = np.flatnonzero(np.asarray(mask, dtype=bool).any(axis=1))
    if rows.size == 0:
        return 0
    return int(rows[-1] - rows[0] + 1)


def vertical_cdr(masks):
    vd_disc = vertical_diameter(masks.disc)
    if vd_disc == 0:
        raise EmptyDisc("disc mask is empty")
    return vertical_diameter(masks.cup) / vd_disc


@dataclass(frozen=True)
class EvalRecord:
    id: str
    DI_cup: float
    DI_disc: float
    CDR_p: float
    CDR_g: float
    delta: float


def evaluate_one(sid, pred, gt):
    cdr_g = vertical_cdr(gt)
    try:
        cdr_p = vertical_cdr(pred)
    except EmptyDisc:
        # nothing predicted: treat the ratio as 0 rather than abort the run
        log.warning("%s: empty predicted disc, CDR_p set to 0", sid)
        cdr_p = 0.0
    return EvalRecord(sid, dice_coefficient(pred.cup, gt.cup), dice_coefficient(pred.disc, gt.disc),
                      cdr_p, cdr_g, abs(cdr_p - cdr_g))


def evaluate_dataset(preds, gts):
    """Per-image records and the unweighted means of (DI_cup, DI_disc, delta).

    ``preds`` and ``gts`` map image id to :class:`LabelMasks` in the same
    (original) coordinates.
    """
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        raise IdMismatch(f"{len(missing)} ids present in only one of predictions / ground truth", missing)
    if not gts:
        raise IdMismatch("nothing to evaluate")
    records = [evaluate_one(k, preds[k], gts[k]) for k in sorted(gts)]
    means = summarize(records)
    return records, means


def summarize(records):
    return (
        float(np.mean([r.DI_cup for r in records])),
        float(np.mean([r.DI_disc for r in records])),
        float(np.mean([r.delta for r in records])),
    )


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(EvalRecord.__dataclass_fields__))
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def read_records(path):
    with open(path, newline="") as fh:
        return [
            EvalRecord(row["id"], *(float(row[k]) for k in ("DI_cup", "DI_disc", "CDR_p", "CDR_g", "delta")))
            for row in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------- screening


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def normalize_scores(p):
    p = np.asarray(p, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.zeros_like(p)
    return (p - lo) / (hi - lo)


def roc_curve(scores, labels):
    """ROC points for thresholds at every distinct score (descending)."""
    fpr, tpr, thr = sk_metrics.roc_curve(np.asarray(labels).astype(bool), np.asarray(scores, dtype=np.float64),
                                         drop_intermediate=False)
    return RocCurve(fpr, tpr, thr)


def screening_auc(cdr_values, glaucoma_labels):
    """ROC curve and trapezoidal AUC of min-max normalised CDR scores."""
    cdr = np.asarray(cdr_values, dtype=np.float64)
    labels = np.asarray(glaucoma_labels).astype(bool)
    if cdr.shape != labels.shape:
        raise ShapeMismatch("one label per CDR value required")
    if labels.all() or not labels.any():
        raise DegenerateLabels("need at least one positive and one negative label")
    if cdr.max() == cdr.min():
        log.warning("constant CDR scores; AUC set to 0.5")
        return RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([np.inf, cdr[0]])), 0.5
    curve = roc_curve(normalize_scores(cdr), labels)
    return curve, float(sk_metrics.auc(curve.fpr, curve.tpr))


# ---------------------------------------------------------------- challenge ranking


@dataclass(frozen=True)
class RankEntry:
    team: str
    R_cup: int
    R_disc: int
    R_delta: int
    S_f: float


def rank_score(r_cup, r_disc, r_delta):
    a, b, c = RANK_WEIGHTS
    # round away representation noise so published two-decimal values compare exactly
    return round(a * r_cup + b * r_disc + c * r_delta, 10)


def challenge_score(table):
    """Rank teams from ``{team: (DI_cup, DI_disc, delta)}``.

    Higher dice and lower delta rank first; ties share the smallest rank.
    The result is sorted by ascending ``S_f`` (team name breaks ties).
    """
    if not table:
        raise ValueError("need at least one team")
    teams = list(table)
    vals = np.array([table[t] for t in teams], dtype=np.float64)
    r_cup = rankdata(-vals[:, 0], method="min").astype(int)
    r_disc = rankdata(-vals[:, 1], method="min").astype(int)
    r_delta = rankdata(vals[:, 2], method="min").astype(int)
    entries = [
        RankEntry(t, int(a), int(b), int(c), rank_score(a, b, c))
        for t, a, b, c in zip(teams, r_cup, r_disc, r_delta)
    ]
    return sorted(entries, key=lambda e: (e.S_f, e.team))


def read_team_table(path):
    """CSV with columns team, DI_cup, DI_disc, delta."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["team"]] = (float(row["DI_cup"]), float(row["DI_disc"]), float(row["delta"]))
    return out


def write_leaderboard(path, entries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "team", "R_cup", "R_disc", "R_delta", "S_f"])
        for i, e in enumerate(entries, 1):
            w.writerow([i, e.team, e.R_cup, e.R_disc, e.R_delta, f"{e.S_f:.2f}"])


__all__ = [
    "postprocess", "dice_coefficient", "vertical_diameter", "vertical_cdr", "EvalRecord", "evaluate_dataset",
    "summarize", "screening_auc", "roc_curve", "normalize_scores", "challenge_score", "RankEntry",
]
