"""Training engines: supervised pretraining of the segmenter and the
alternating adversarial loop that couples segmenter and patch discriminator.

One adversarial iteration runs three updates in this order:

1. source batch: joint segmentation loss, update the segmenter;
2. target batch: adversarial loss through a frozen discriminator, update
   the segmenter only;
3. discriminator on the detached predictions of both batches (source
   label 1, target label 0), segmenter untouched.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from scipy import ndimage

from .core import ImageSample, LabelMasks
from .errors import ConfigError, EmptyDataset, MissingLabels
from .losses import (
    DICE_EPS,
    LossWeights,
    adversarial_loss_logits_t,
    adversarial_loss_t,
    bce_loss_t,
    dice_loss_t,
    discriminator_loss_logits_t,
    discriminator_loss_t,
    seg_loss_t,
)
from .models import ModelState, state_from_module

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class AugmentConfig:
    scale: bool = False
    scale_range: tuple = (0.9, 1.1)
    rotate: bool = False
    max_degrees: float = 15.0
    flip: bool = False
    elastic: bool = False
    elastic_grid: int = 8
    elastic_sigma: float = 4.0  # px, std of control-point displacement
    contrast: bool = False
    contrast_range: tuple = (0.8, 1.2)
    noise: bool = False
    noise_std: float = 0.02
    erase: bool = False
    erase_area: tuple = (0.02, 0.1)
    p: float = 0.5  # probability of applying each enabled transform

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ConfigError("augmentation probability must lie in [0, 1]")
        for name in ("scale_range", "contrast_range", "erase_area"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ConfigError(f"{name} must be an increasing positive range, got {(lo, hi)}")
        if self.max_degrees <= 0 or self.elastic_sigma <= 0 or self.noise_std <= 0 or self.elastic_grid < 2:
            raise ConfigError("augmentation magnitudes must be positive")

    @property
    def enabled(self):
        return any((self.scale, self.rotate, self.flip, self.elastic, self.contrast, self.noise, self.erase))

    @classmethod
    def geometric(cls):
        return cls(scale=True, rotate=True, flip=True, elastic=True)

    @classmethod
    def full(cls):
        return cls(scale=True, rotate=True, flip=True, elastic=True, contrast=True, noise=True, erase=True)


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"  # "pretrain" | "adversarial" | "extractor"
    epochs: int = 40
    batch_size: int = 8
    lr_S: float = 1e-3
    lr_D: float = 1e-5
    lr_schedule: str = "step"  # "step" | "poly" | "constant"
    power: float = 0.9
    step_every: int = 100  # epochs, step schedule
    step_factor: float = 0.2
    optimizer_S: str = "adam"
    optimizer_D: str = "sgd"
    momentum_D: float = 0.9
    loss_weights: LossWeights = field(default_factory=LossWeights)
    loss: str = "morphology"  # "morphology" | "dice" | "bce"
    dice_eps: float = DICE_EPS
    adv_weight: float = 1.0
    d_update: str = "alternating"  # "alternating" | "joint"
    freeze_bn: bool = False  # keep segmenter BN statistics fixed while adapting
    logit_losses: bool = True  # adversarial losses from discriminator logits (no dead zone)
    seed: int = 0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.phase not in ("pretrain", "adversarial", "extractor"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_S <= 0 or self.lr_D <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_schedule not in ("step", "poly", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.optimizer_S != "adam" or self.optimizer_D != "sgd":
            raise ConfigError("only adam (segmenter) and sgd (discriminator) are supported")
        if self.loss not in ("morphology", "dice", "bce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.d_update not in ("alternating", "joint"):
            raise ConfigError(f"unknown d_update {self.d_update!r}")
        if self.adv_weight < 0:
            raise ConfigError("adv_weight must be non-negative")
        if isinstance(self.loss_weights, (list, tuple)):
            object.__setattr__(self, "loss_weights", LossWeights(*self.loss_weights))
        elif isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if isinstance(self.augmentation, dict):
            aug = {k: tuple(v) if isinstance(v, list) else v for k, v in self.augmentation.items()}
            object.__setattr__(self, "augmentation", AugmentConfig(**aug))

    @property
    def weights(self):
        if self.loss == "dice":
            return replace(self.loss_weights, lambda3=0.0)
        return self.loss_weights

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        fields = cls.__dataclass_fields__
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


# Published protocol.
PAPER_PRETRAIN = TrainConfig("pretrain", epochs=200, batch_size=16, lr_S=1e-3, lr_schedule="step",
                             step_every=100, augmentation=AugmentConfig.full())
PAPER_ADVERSARIAL = TrainConfig("adversarial", epochs=100, batch_size=16, lr_S=2.5e-5, lr_D=1e-5,
                                lr_schedule="poly", augmentation=AugmentConfig.full())
# CPU-sized runs on 128x128 synthetic ROIs. The smoothness term is a raw pair
# sum, so at this size its weight has to drop to 1e-4 to stay comparable to dice.
_DESK_WEIGHTS = LossWeights(0.4, 0.6, 1e-4)
DESK_PRETRAIN = TrainConfig("pretrain", epochs=12, batch_size=8, lr_S=1e-3, lr_schedule="step",
                            step_every=8, loss_weights=_DESK_WEIGHTS, augmentation=AugmentConfig(flip=True))
# BN statistics stay frozen here: letting target batches move them is a domain
# shift correction of its own and would hide what the discriminator contributes.
DESK_ADVERSARIAL = TrainConfig("adversarial", epochs=5, batch_size=8, lr_S=1e-4, lr_D=1e-3,
                               lr_schedule="poly", loss_weights=_DESK_WEIGHTS, adv_weight=0.01,
                               d_update="joint", freeze_bn=True, augmentation=AugmentConfig(flip=True))
DESK_EXTRACTOR = TrainConfig("extractor", epochs=15, batch_size=8, lr_S=1e-3, lr_schedule="constant",
                             augmentation=AugmentConfig(flip=True))
PAPER_EXTRACTOR = TrainConfig("extractor", epochs=100, batch_size=8, lr_S=1e-3, lr_schedule="constant",
                              augmentation=AugmentConfig.full())

PRESETS = {
    ("paper", "extractor"): PAPER_EXTRACTOR,
    ("paper", "pretrain"): PAPER_PRETRAIN,
    ("paper", "adversarial"): PAPER_ADVERSARIAL,
    ("desk", "extractor"): DESK_EXTRACTOR,
    ("desk", "pretrain"): DESK_PRETRAIN,
    ("desk", "adversarial"): DESK_ADVERSARIAL,
}


def lr_at(step, total_steps, lr0, schedule="poly", power=0.9, step_every=None, step_factor=0.2):
    """Learning rate at ``step``.

    ``poly``: ``lr0 * (1 - step/total)^power``; ``step``: multiply by
    ``step_factor`` every ``step_every`` steps; ``constant``: ``lr0``.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule == "poly":
        if total_steps == 0:
            return lr0
        return lr0 * (1.0 - step / total_steps) ** power
    if schedule == "step":
        if not step_every:
            return lr0
        return lr0 * step_factor ** (step // step_every)
    if schedule == "constant":
        return lr0
    raise ConfigError(f"unknown lr schedule {schedule!r}")


# ---------------------------------------------------------------- augmentation


def _elastic_field(rng, shape, grid, sigma):
    h, w = shape
    coarse = rng.normal(0, sigma, (2, grid, grid))
    return np.stack([ndimage.zoom(c, (h / grid, w / grid), order=3)[:h, :w] for c in coarse])


def augment_arrays(pixels, labels, cfg, rng):
    """Augment an (H, W, 3) image and optional (H, W, 2) label array.

    Geometric transforms share one sampling grid between image and labels
    (bilinear for the image, nearest for labels, which keeps labels binary
    and the cup inside the disc).  Photometric transforms touch the image
    only.
    """
    if not cfg.enabled:
        return pixels, labels
    h, w = pixels.shape[:2]
    ch, cw = (h - 1) / 2.0, (w - 1) / 2.0
    A = np.eye(2)
    if cfg.scale and rng.random() < cfg.p:
        A = A / rng.uniform(*cfg.scale_range)
    if cfg.rotate and rng.random() < cfg.p:
        t = np.deg2rad(rng.uniform(-cfg.max_degrees, cfg.max_degrees))
        A = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) @ A
    hflip = cfg.flip and rng.random() < cfg.p
    vflip = cfg.flip and rng.random() < cfg.p
    disp = None
    if cfg.elastic and rng.random() < cfg.p:
        disp = _elastic_field(rng, (h, w), cfg.elastic_grid, cfg.elastic_sigma)

    if not np.allclose(A, np.eye(2)) or disp is not None:
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        src = A @ np.stack([rr.ravel() - ch, cc.ravel() - cw])
        sr = src[0].reshape(h, w) + ch
        sc = src[1].reshape(h, w) + cw
        if disp is not None:
            sr = sr + disp[0]
            sc = sc + disp[1]
        pixels = np.stack(
            [ndimage.map_coordinates(pixels[..., k], [sr, sc], order=1, mode="reflect") for k in range(3)], -1
        )
        if labels is not None:
            labels = np.stack(
                [ndimage.map_coordinates(labels[..., k], [sr, sc], order=0, mode="constant", cval=0)
                 for k in range(labels.shape[-1])], -1
            )
    if hflip:
        pixels = pixels[:, ::-1]
        labels = None if labels is None else labels[:, ::-1]
    if vflip:
        pixels = pixels[::-1]
        labels = None if labels is None else labels[::-1]

    if cfg.contrast and rng.random() < cfg.p:
        m = pixels.mean(axis=(0, 1), keepdims=True)
        pixels = (pixels - m) * rng.uniform(*cfg.contrast_range) + m
    if cfg.noise and rng.random() < cfg.p:
        pixels = pixels + rng.normal(0, cfg.noise_std, pixels.shape)
    if cfg.erase and rng.random() < cfg.p:
        area = rng.uniform(*cfg.erase_area) * h * w
        ar = rng.uniform(0.5, 2.0)
        eh = int(min(h, max(1, round(np.sqrt(area * ar)))))
        ew = int(min(w, max(1, round(np.sqrt(area / ar)))))
        r0 = rng.integers(0, h - eh + 1)
        c0 = rng.integers(0, w - ew + 1)
        pixels = pixels.copy()
        pixels[r0:r0 + eh, c0:c0 + ew] = rng.uniform(0, 1, (eh, ew, 3))
    pixels = np.clip(pixels, 0, 1)
    return np.ascontiguousarray(pixels), None if labels is None else np.ascontiguousarray(labels)


def augment(sample, cfg, rng):
    labels = None if sample.labels is None else sample.labels.stack()
    px, lab = augment_arrays(sample.pixels, labels, cfg, rng)
    masks = None
    if lab is not None:
        masks = LabelMasks(lab[..., 0] > 0.5, (lab[..., 1] > 0.5) & (lab[..., 0] > 0.5))
    return ImageSample(sample.id, px, masks, sample.domain, sample.original_size)


# ---------------------------------------------------------------- batching


def to_arrays(samples, need_labels=True, channels=2):
    """Stack samples into float32 (N, H, W, 3) images and (N, H, W, c) labels."""
    if not samples:
        raise EmptyDataset("dataset is empty")
    x = np.stack([s.pixels for s in samples]).astype(np.float32)
    if not need_labels:
        return x, None
    missing = [s.id for s in samples if s.labels is None]
    if missing:
        raise MissingLabels(f"{len(missing)} samples lack labels, e.g. {missing[:3]}")
    y = np.stack([s.labels.stack() for s in samples]).astype(np.float32)
    return x, y[..., :channels]


class BatchStream:
    """Endless reshuffled mini-batches with per-sample augmentation."""

    def __init__(self, x, y, batch_size, aug, rng):
        self.x, self.y, self.bs, self.aug, self.rng = x, y, batch_size, aug, rng
        self.order = []

    def __len__(self):
        return max(1, math.ceil(len(self.x) / self.bs))

    def next(self):
        if len(self.order) == 0:
            self.order = list(self.rng.permutation(len(self.x)))
        idx, self.order = self.order[: self.bs], self.order[self.bs:]
        xs, ys = [], []
        for i in idx:
            xi = self.x[i].astype(np.float64)
            yi = None if self.y is None else self.y[i].astype(np.float64)
            xi, yi = augment_arrays(xi, yi, self.aug, self.rng)
            xs.append(xi)
            ys.append(yi)
        xb = torch.from_numpy(np.stack(xs).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
        yb = None
        if self.y is not None:
            yb = torch.from_numpy(np.stack(ys).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
        return xb, yb


def _nchw(x):
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def predict_arrays(net, x, batch_size=16):
    """Eval-mode predictions for an (N, H, W, C) array, returned as (N, H', W', C')."""
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(net(_nchw(x[i:i + batch_size])).permute(0, 2, 3, 1).numpy())
    return np.concatenate(out)


# ---------------------------------------------------------------- training


class TrainLog:
    """Append-only JSON-lines training log (optional file sink)."""

    def __init__(self, path=None):
        self.path = path
        self.records = []

    def write(self, **rec):
        rec = {k: (float(v) if isinstance(v, (np.floating, torch.Tensor)) else v) for k, v in rec.items()}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def _seed(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _schedule_lr(cfg, lr0, it, total, iters_per_epoch):
    return lr_at(it, total, lr0, cfg.lr_schedule, cfg.power,
                 step_every=cfg.step_every * iters_per_epoch, step_factor=cfg.step_factor)


def _supervised_loss(cfg, pred, target):
    if cfg.loss == "bce":
        return bce_loss_t(pred, target)
    if cfg.phase == "extractor":
        return dice_loss_t(pred[:, 0], target[:, 0], cfg.dice_eps)
    return seg_loss_t(pred, target, cfg.weights, cfg.dice_eps)


def validation_loss(net, x, y, cfg, batch_size=16):
    net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            pred = net(_nchw(x[i:i + batch_size]))
            total += float(_supervised_loss(cfg, pred, _nchw(y[i:i + batch_size])).sum())
    return total / len(x)


def train_supervised(state, samples, cfg, val=None, train_log=None, channels=2):
    """Supervised training shared by the extractor and segmenter pretraining.

    Returns the final state, or the best state on ``val`` when given.
    """
    x, y = to_arrays(samples, channels=channels)
    if cfg.epochs == 0:
        return state.copy()
    rng = _seed(cfg.seed)
    net = state.module()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_S)
    stream = BatchStream(x, y, cfg.batch_size, cfg.augmentation, rng)
    per_epoch = len(stream)
    total = cfg.epochs * per_epoch
    xv = yv = None
    if val:
        xv, yv = to_arrays(val, channels=channels)
    best, best_loss = None, math.inf
    step = state.training_step
    it = 0
    train_log = train_log or TrainLog()
    for epoch in range(cfg.epochs):
        net.train()
        losses = []
        t0 = time.time()
        for _ in range(per_epoch):
            lr = _schedule_lr(cfg, cfg.lr_S, it, total, per_epoch)
            _set_lr(opt, lr)
            xb, yb = stream.next()
            loss = _supervised_loss(cfg, net(xb), yb).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            it += 1
            step += 1
        rec = {"phase": cfg.phase, "epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": lr,
               "seconds": round(time.time() - t0, 3)}
        if xv is not None:
            rec["val_loss"] = validation_loss(net, xv, yv, cfg)
            if rec["val_loss"] < best_loss:
                best_loss = rec["val_loss"]
                best = state_from_module(state.spec, net, step)
        train_log.write(**rec)
        log.info("%s epoch %d loss %.4f", cfg.phase, epoch, rec["loss"])
    final = state_from_module(state.spec, net, step)
    return best if best is not None else final


def pretrain_segmenter(state, source, cfg=DESK_PRETRAIN, val=None, train_log=None):
    """Supervised segmenter training on labelled source ROIs."""
    if not source:
        raise EmptyDataset("no source samples")
    if cfg.phase != "pretrain":
        cfg = replace(cfg, phase="pretrain")
    return train_supervised(state, source, cfg, val=val, train_log=train_log)


def _bn_eval(net):
    for m in net.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.eval()


def _freeze(net, frozen):
    for p in net.parameters():
        p.requires_grad_(not frozen)


def _adv_term(disc, pred_t, cfg):
    """Target scores and the batch-mean adversarial loss."""
    if cfg.logit_losses:
        z = disc(pred_t, logits=True)
        return torch.sigmoid(z), adversarial_loss_logits_t(z).mean()
    scores = disc(pred_t)
    return scores, adversarial_loss_t(scores).mean()


def _d_term(disc, ps, pt, cfg):
    """Scores and batch-mean discriminator loss for one domain's predictions."""
    x = ps if ps is not None else pt
    if cfg.logit_losses:
        z = disc(x, logits=True)
        loss = discriminator_loss_logits_t(z, None) if ps is not None else discriminator_loss_logits_t(None, z)
        return torch.sigmoid(z), loss.mean()
    scores = disc(x)
    loss = discriminator_loss_t(scores, None) if ps is not None else discriminator_loss_t(None, scores)
    return scores, loss.mean()


def d_accuracy(ds, dt):
    """Share of patch cells the discriminator labels correctly."""
    return 0.5 * (float((ds > 0.5).float().mean()) + float((dt < 0.5).float().mean()))


@dataclass
class AdversarialResult:
    segmenter: ModelState
    discriminator: ModelState
    log: TrainLog


def adversarial_train(S, D, source, target, cfg=DESK_ADVERSARIAL, val=None, train_log=None, hooks=None):
    """Alternating segmenter/discriminator training.

    ``source`` must carry labels; target labels are never read.  ``val``
    (labelled source samples) selects the best segmenter checkpoint by
    segmentation loss.  ``hooks`` is an optional object whose methods
    ``on_source``, ``on_target`` and ``on_discriminator`` receive the
    captured tensors of each step; an optional ``on_modules`` receives
    the live segmenter and discriminator once before training.
    """
    if not source:
        raise EmptyDataset("no source samples")
    if not target:
        raise EmptyDataset("no target samples")
    if cfg.phase != "adversarial":
        cfg = replace(cfg, phase="adversarial")
    xs, ys = to_arrays(source)
    xt, _ = to_arrays(target, need_labels=False)
    train_log = train_log or TrainLog()
    if cfg.epochs == 0:
        return AdversarialResult(S.copy(), D.copy(), train_log)

    rng = _seed(cfg.seed)
    seg = S.module()
    disc = D.module()
    if hooks is not None and hasattr(hooks, "on_modules"):
        hooks.on_modules(seg, disc)
    opt_s = torch.optim.Adam(seg.parameters(), lr=cfg.lr_S)
    opt_d = torch.optim.SGD(disc.parameters(), lr=cfg.lr_D, momentum=cfg.momentum_D)
    src = BatchStream(xs, ys, cfg.batch_size, cfg.augmentation, rng)
    tgt = BatchStream(xt, None, cfg.batch_size, cfg.augmentation, rng)
    per_epoch = len(src)
    total = cfg.epochs * per_epoch
    xv = yv = None
    if val:
        xv, yv = to_arrays(val)
    best, best_loss = None, math.inf
    step = S.training_step
    d_step = D.training_step
    it = 0
    w = cfg.weights
    for epoch in range(cfg.epochs):
        seg_l, adv_l, d_l, acc = [], [], [], []
        t0 = time.time()
        for _ in range(per_epoch):
            lr_s = _schedule_lr(cfg, cfg.lr_S, it, total, per_epoch)
            lr_d = _schedule_lr(cfg, cfg.lr_D, it, total, per_epoch)
            _set_lr(opt_s, lr_s)
            _set_lr(opt_d, lr_d)
            seg.train()
            if cfg.freeze_bn:
                _bn_eval(seg)

            # (a) source batch -> segmentation loss
            xb, yb = src.next()
            pred_s = seg(xb)
            loss_seg = seg_loss_t(pred_s, yb, w, cfg.dice_eps).mean()
            opt_s.zero_grad(set_to_none=True)
            loss_seg.backward()
            opt_s.step()
            if hooks:
                hooks.on_source(pred_s.detach(), yb, loss_seg.detach())

            # (b) target batch -> adversarial loss, discriminator frozen
            xtb, _ = tgt.next()
            _freeze(disc, True)
            disc.eval()
            if cfg.adv_weight > 0:
                pred_t = seg(xtb)
                scores_t, loss_adv = _adv_term(disc, pred_t, cfg)
                loss_adv = cfg.adv_weight * loss_adv
                opt_s.zero_grad(set_to_none=True)
                loss_adv.backward()
                opt_s.step()
            else:
                with torch.no_grad():
                    pred_t = seg(xtb)
                    scores_t = disc(pred_t)
                loss_adv = torch.zeros(())
            _freeze(disc, False)
            if hooks:
                hooks.on_target(pred_t.detach(), scores_t.detach(), loss_adv.detach())

            # (c) discriminator on detached predictions
            disc.train()
            ps, pt = pred_s.detach(), pred_t.detach()
            if cfg.d_update == "alternating":
                ds, loss_ds = _d_term(disc, ps, None, cfg)
                opt_d.zero_grad(set_to_none=True)
                loss_ds.backward()
                opt_d.step()
                dt, loss_dt = _d_term(disc, None, pt, cfg)
                opt_d.zero_grad(set_to_none=True)
                loss_dt.backward()
                opt_d.step()
                loss_d = loss_ds.detach() + loss_dt.detach()
            else:
                ds, loss_s = _d_term(disc, ps, None, cfg)
                dt, loss_t = _d_term(disc, None, pt, cfg)
                loss_d = loss_s + loss_t
                opt_d.zero_grad(set_to_none=True)
                loss_d.backward()
                opt_d.step()
                loss_d = loss_d.detach()
            if hooks:
                hooks.on_discriminator(ds.detach(), dt.detach(), loss_d)

            seg_l.append(loss_seg.item())
            adv_l.append(loss_adv.item())
            d_l.append(loss_d.item())
            acc.append(d_accuracy(ds.detach(), dt.detach()))
            it += 1
            step += 1
            d_step += 1

        rec = {
            "phase": "adversarial", "epoch": epoch, "step": step,
            "seg_loss": float(np.mean(seg_l)), "adv_loss": float(np.mean(adv_l)),
            "L_S": float(np.mean(seg_l) + np.mean(adv_l)), "L_D": float(np.mean(d_l)),
            "d_accuracy": float(np.mean(acc)), "lr_S": lr_s, "lr_D": lr_d,
            "seconds": round(time.time() - t0, 3),
        }
        if xv is not None:
            rec["val_loss"] = validation_loss(seg, xv, yv, replace(cfg, phase="pretrain"))
            if rec["val_loss"] < best_loss:
                best_loss = rec["val_loss"]
                best = state_from_module(S.spec, seg, step)
        train_log.write(**rec)
        log.info("adversarial epoch %d L_S %.4f L_D %.4f acc %.3f", epoch, rec["L_S"], rec["L_D"], rec["d_accuracy"])

    S_out = best if best is not None else state_from_module(S.spec, seg, step)
    D_out = state_from_module(D.spec, disc, d_step)
    return AdversarialResult(S_out, D_out, train_log)
