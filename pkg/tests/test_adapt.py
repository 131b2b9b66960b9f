import numpy as np
import pytest
import torch
from dataclasses import replace
from hypothesis import given, settings
from scipy import ndimage
from hypothesis import strategies as st

from odoc.adapt import (
    DESK_ADVERSARIAL,
    DESK_PRETRAIN,
    PAPER_ADVERSARIAL,
    PRESETS,
    AugmentConfig,
    TrainConfig,
    TrainLog,
    adversarial_train,
    augment_arrays,
    lr_at,
    predict_arrays,
    pretrain_segmenter,
    to_arrays,
)
from odoc.core import LabelMasks, ProbabilityMaps, binarize
from odoc.data import SynthConfig, generate_synthetic, synth_sample
from odoc.errors import ConfigError, EmptyDataset, MissingLabels
from odoc.metrics import evaluate_dataset, postprocess
from odoc.losses import LossWeights, adversarial_loss, discriminator_loss, seg_loss
from odoc.models import build_discriminator, build_segmenter, init_state

CFG = SynthConfig(image_size=128)


@pytest.fixture(scope="module")
def tiny():
    src, tgt, _ = generate_synthetic(CFG, 4, 4)
    return src, [t.without_labels() for t in tgt], tgt


def _adv_cfg(**kw):
    base = replace(DESK_ADVERSARIAL, epochs=1, batch_size=2, lr_S=1e-3, lr_D=1e-2, seed=3,
                   loss_weights=LossWeights(0.4, 0.6, 1e-4))
    return replace(base, **kw)


def _params(net):
    return {k: v.detach().clone() for k, v in net.named_parameters()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- schedules


def test_poly_schedule_values():
    assert lr_at(0, 100, 2.5e-5) == 2.5e-5
    assert lr_at(50, 100, 2.5e-5) == pytest.approx(1.3397e-5, rel=1e-4)
    assert lr_at(100, 100, 2.5e-5) == 0.0


def test_step_and_constant_schedules():
    assert lr_at(99, 200, 1e-3, "step", step_every=100) == 1e-3
    assert lr_at(100, 200, 1e-3, "step", step_every=100) == pytest.approx(2e-4)
    assert lr_at(150, 200, 1e-3, "constant") == 1e-3
    with pytest.raises(ValueError):
        lr_at(101, 100, 1e-3)
    with pytest.raises(ConfigError):
        lr_at(1, 10, 1e-3, "cosine")


@given(st.integers(1, 500), st.data())
def test_poly_is_monotone(total, data):
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert lr_at(b, total, 1e-3) <= lr_at(a, total, 1e-3)


def test_presets_and_config_validation():
    assert PAPER_ADVERSARIAL.lr_S == 2.5e-5 and PAPER_ADVERSARIAL.lr_D == 1e-5
    assert PAPER_ADVERSARIAL.batch_size == 16 and PAPER_ADVERSARIAL.epochs == 100
    assert set(PRESETS) == {(s, p) for s in ("paper", "desk") for p in ("extractor", "pretrain", "adversarial")}
    assert TrainConfig.from_dict(DESK_PRETRAIN.to_dict()) == DESK_PRETRAIN
    for bad in ({"lr_S": 0}, {"lr_schedule": "cosine"}, {"optimizer_S": "sgd"}, {"epochs": -1},
                {"adv_weight": -1.0}, {"d_update": "both"}):
        with pytest.raises(ConfigError):
            replace(DESK_ADVERSARIAL, **bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})


# ---------------------------------------------------------------- augmentation


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_augmentation_keeps_labels_valid(seed):
    src, _, _ = generate_synthetic(SynthConfig(image_size=48), 1, 1, start=seed % 50)
    s = src[0]
    px, lab = augment_arrays(s.pixels, s.labels.stack(), AugmentConfig.full(), np.random.default_rng(seed))
    assert px.shape == s.pixels.shape and lab.shape == (48, 48, 2)
    assert px.min() >= 0 and px.max() <= 1
    assert set(np.unique(lab)) <= {0.0, 1.0}
    assert not ((lab[..., 1] > 0) & (lab[..., 0] == 0)).any()


@pytest.mark.parametrize("seed", range(6))
def test_geometric_augmentation_moves_image_and_labels_together(seed):
    n = 64
    rr, cc = np.mgrid[:n, :n]
    disc = ((rr - 30) ** 2 + (cc - 36) ** 2) <= 15**2
    labels = np.stack([disc, np.zeros_like(disc)], -1).astype(float)
    img = np.repeat(disc[..., None].astype(float), 3, -1)
    cfg = replace(AugmentConfig.geometric(), p=1.0)
    px, lab = augment_arrays(img, labels, cfg, np.random.default_rng(seed))
    agree = (px[..., 0] >= 0.5) == (lab[..., 0] > 0.5)
    assert agree.mean() > 0.98
    assert lab[..., 0].sum() > 0.5 * disc.sum()


def test_double_flip_restores_input(rng):
    x = rng.random((9, 7, 3))
    y = (rng.random((9, 7, 2)) > 0.5).astype(float)
    cfg = AugmentConfig(flip=True, p=1.0)
    px, lab = augment_arrays(*augment_arrays(x, y, cfg, rng), cfg, rng)
    assert np.array_equal(px, x) and np.array_equal(lab, y)


class _Angle:
    """Stands in for the generator so a rotation angle can be chosen."""

    def __init__(self, deg):
        self.deg = deg

    def random(self):
        return 0.0

    def uniform(self, lo, hi):
        return self.deg


@pytest.mark.parametrize("deg", [7.0, 15.0])
def test_rotation_round_trip(deg):
    n = 64
    rr, cc = np.mgrid[:n, :n]
    disc = ((rr - 32) ** 2 + (cc - 30) ** 2) <= 14**2
    cup = ((rr - 33) ** 2 + (cc - 31) ** 2) <= 6**2
    y = np.stack([disc, cup], -1).astype(float)
    x = np.repeat(disc[..., None].astype(float), 3, -1)
    cfg = AugmentConfig(rotate=True, max_degrees=15.0, p=1.0)
    _, once = augment_arrays(x, y, cfg, _Angle(deg))
    assert not np.array_equal(once, y)
    _, back = augment_arrays(x, once, cfg, _Angle(-deg))
    # every changed pixel sits on a mask boundary, at most one pixel off
    for k in range(2):
        ring = ndimage.binary_dilation(y[..., k] > 0) & ~ndimage.binary_erosion(y[..., k] > 0)
        assert not ((back[..., k] != y[..., k]) & ~ring).any()


def test_disabled_augmentation_is_identity(rng):
    x = rng.random((8, 8, 3))
    y = (rng.random((8, 8, 2)) > 0.5).astype(float)
    px, lab = augment_arrays(x, y, AugmentConfig(), rng)
    assert px is x and lab is y


# ---------------------------------------------------------------- pretraining


def test_pretrain_deterministic_and_counts_steps(tiny):
    src = tiny[0]
    cfg = replace(DESK_PRETRAIN, epochs=1, batch_size=2, loss_weights=LossWeights(0.4, 0.6, 1e-4))
    S0 = init_state(build_segmenter("desk"), 0)
    a = pretrain_segmenter(S0, src, cfg)
    b = pretrain_segmenter(S0, src, cfg)
    assert a.fingerprint() == b.fingerprint() != S0.fingerprint()
    assert a.training_step == 2
    with pytest.raises(MissingLabels):
        pretrain_segmenter(S0, tiny[1], cfg)
    with pytest.raises(EmptyDataset):
        pretrain_segmenter(S0, [], cfg)


# ---------------------------------------------------------------- adversarial loop


class Recorder:
    """Snapshots both networks at every hook and checks the loss wiring."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.events = []
        self.errors = []

    def on_modules(self, seg, disc):
        self.seg, self.disc = seg, disc
        self.events.append(("start", _params(seg), _params(disc)))

    def _snap(self, name):
        self.events.append((name, _params(self.seg), _params(self.disc)))

    def on_source(self, pred, y, loss):
        p = pred.double().numpy()
        yy = y.numpy() > 0.5
        ref = np.mean([seg_loss(ProbabilityMaps(p[b, 0], p[b, 1]), LabelMasks(yy[b, 0], yy[b, 1]),
                                self.cfg.weights, self.cfg.dice_eps) for b in range(len(p))])
        self.errors.append(abs(float(loss) - ref) / max(1.0, abs(ref)))
        self._snap("source")

    def on_target(self, pred, scores, loss):
        ref = self.cfg.adv_weight * np.mean([adversarial_loss(s) for s in scores.double().numpy()])
        self.errors.append(abs(float(loss) - ref) / max(1.0, ref))
        self._snap("target")

    def on_discriminator(self, ds, dt, loss):
        ref = np.mean([discriminator_loss(s, None) for s in ds.double().numpy()]) + np.mean(
            [discriminator_loss(None, t) for t in dt.double().numpy()])
        self.errors.append(abs(float(loss) - ref) / ref)
        self._snap("disc")


def _run(tiny, **kw):
    cfg = _adv_cfg(**kw)
    rec = Recorder(cfg)
    S = init_state(build_segmenter("desk"), 1)
    D = init_state(build_discriminator("desk"), 2)
    log = TrainLog()
    res = adversarial_train(S, D, tiny[0], tiny[1], cfg, train_log=log, hooks=rec)
    return res, rec, log


@pytest.mark.parametrize("d_update", ["alternating", "joint"])
def test_update_isolation_and_loss_wiring(tiny, d_update):
    res, rec, log = _run(tiny, d_update=d_update)
    names = [e[0] for e in rec.events]
    assert names == ["start"] + ["source", "target", "disc"] * 2
    for prev, cur in zip(rec.events, rec.events[1:]):
        _, s0, d0 = prev
        name, s1, d1 = cur
        if name in ("source", "target"):
            assert _same(d0, d1), f"discriminator moved during the {name} step"
            assert not _same(s0, s1)
        else:
            assert _same(s0, s1), "segmenter moved during the discriminator step"
            assert not _same(d0, d1)
    assert max(rec.errors) < 1e-4
    r = log.records[0]
    assert r["L_S"] == pytest.approx(r["seg_loss"] + r["adv_loss"])
    assert res.segmenter.training_step == 2 and res.discriminator.training_step == 2


def test_zero_adversarial_weight_skips_target_update(tiny):
    _, rec, log = _run(tiny, adv_weight=0.0)
    for i, (name, s, d) in enumerate(rec.events):
        if name == "target":
            assert _same(rec.events[i - 1][1], s)
    assert log.records[0]["adv_loss"] == 0.0
    # the discriminator still trains
    assert not _same(rec.events[0][2], rec.events[-1][2])


def test_frozen_bn_keeps_running_stats(tiny):
    cfg = _adv_cfg(freeze_bn=True)
    S = init_state(build_segmenter("desk"), 1)
    D = init_state(build_discriminator("desk"), 2)
    res = adversarial_train(S, D, tiny[0], tiny[1], cfg)
    stats = [k for k in S.parameters if k.endswith("running_mean") or k.endswith("running_var")]
    assert stats
    assert all(np.array_equal(S.parameters[k], res.segmenter.parameters[k]) for k in stats)
    moved = adversarial_train(S, D, tiny[0], tiny[1], _adv_cfg(freeze_bn=False))
    assert not all(np.array_equal(S.parameters[k], moved.segmenter.parameters[k]) for k in stats)


def test_target_labels_are_ignored_and_runs_repeat(tiny):
    S = init_state(build_segmenter("desk"), 1)
    D = init_state(build_discriminator("desk"), 2)
    cfg = _adv_cfg()
    a = adversarial_train(S, D, tiny[0], tiny[1], cfg)
    b = adversarial_train(S, D, tiny[0], tiny[2], cfg)
    assert a.segmenter.fingerprint() == b.segmenter.fingerprint()
    assert a.discriminator.fingerprint() == b.discriminator.fingerprint()


def test_resume_continues_step_counter(tiny):
    S = init_state(build_segmenter("desk"), 1)
    D = init_state(build_discriminator("desk"), 2)
    cfg = _adv_cfg()
    first = adversarial_train(S, D, tiny[0], tiny[1], cfg)
    second = adversarial_train(first.segmenter, first.discriminator, tiny[0], tiny[1], cfg)
    assert second.segmenter.training_step == 4 and second.discriminator.training_step == 4


def test_adversarial_input_errors(tiny):
    S = init_state(build_segmenter("desk"), 1)
    D = init_state(build_discriminator("desk"), 2)
    with pytest.raises(EmptyDataset):
        adversarial_train(S, D, tiny[0], [], _adv_cfg())
    with pytest.raises(MissingLabels):
        adversarial_train(S, D, tiny[1], tiny[1], _adv_cfg())
    res = adversarial_train(S, D, tiny[0], tiny[1], _adv_cfg(epochs=0))
    assert res.segmenter.fingerprint() == S.fingerprint()


# ---------------------------------------------------------------- desk run


@pytest.mark.slow
def test_desk_presets_train_and_keep_discriminator_busy():
    cfg = SynthConfig(seed=0)
    src, tgt, _ = generate_synthetic(cfg, 200, 100)
    held = [synth_sample(cfg, "source", 1000 + i)[0] for i in range(50)]
    log = TrainLog()
    S = pretrain_segmenter(init_state(build_segmenter("desk"), 0), src, DESK_PRETRAIN, train_log=log)
    losses = [r["loss"] for r in log.records][:10]
    avg = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert (np.diff(avg) <= 0).all(), losses

    x, _ = to_arrays(held, need_labels=False)
    p = predict_arrays(S.module(), x)
    preds = {s.id: postprocess(binarize(ProbabilityMaps.from_array(pi))) for s, pi in zip(held, p)}
    cup, disc, _ = evaluate_dataset(preds, {s.id: s.labels for s in held})[1]
    assert disc >= 0.90 and cup >= 0.85

    D = init_state(build_discriminator("desk"), 0)
    res = adversarial_train(S, D, src, [t.without_labels() for t in tgt], DESK_ADVERSARIAL)
    mid = res.log.records[len(res.log.records) // 2]["d_accuracy"]
    assert 0.45 < mid <= 1.0
