import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given
from hypothesis import strategies as st

from odoc.adapt import DESK_EXTRACTOR, TrainLog
from odoc.core import ROIBox
from odoc.data import FULL_IMAGE_CONFIG, generate_synthetic
from odoc.errors import EmptyDataset, MissingLabels
from odoc.models import build_extractor, init_state
from odoc.roi import (
    box_from_probability,
    disc_probability,
    read_roi_manifest,
    resize_sample,
    train_extractor,
    write_roi_manifest,
)


def _disc_map(n, r0, c0, rad):
    rr, cc = np.mgrid[:n, :n]
    return (((rr - r0) ** 2 + (cc - c0) ** 2) <= rad**2).astype(float)


def _center(b):
    return b.top + (b.side - 1) / 2.0, b.left + (b.side - 1) / 2.0


def test_empty_probability_falls_back_to_centre():
    b = box_from_probability(np.zeros((40, 40)), (160, 160), 64)
    assert b.warning
    assert (b.top, b.left, b.side) == (48, 48, 64)


def test_box_centred_on_largest_component():
    p = _disc_map(80, 30, 50, 8)
    p[5:7, 5:7] = 1.0  # small distractor
    b = box_from_probability(p, (80, 80), 32)
    assert not b.warning
    r, c = _center(b)
    assert abs(r - 30) <= 0.5 and abs(c - 50) <= 0.5


def test_box_rescales_from_extractor_resolution():
    # a disc at (20, 25) on a 40x40 map sits near (80, 100) in a 160x160 image
    p = _disc_map(40, 20, 25, 5)
    b = box_from_probability(p, (160, 160), 64, out_size=32)
    r, c = _center(b)
    assert abs(r - 81.5) <= 0.5 and abs(c - 101.5) <= 0.5
    assert b.out_size == 32


def test_box_clamped_inside_image():
    p = _disc_map(64, 2, 61, 3)
    b = box_from_probability(p, (64, 64), 32)
    assert b.top == 0 and b.left + b.side == 64


@given(st.integers(-20, 20), st.integers(-20, 20))
def test_box_translates_with_disc(dr, dc):
    n, side = 128, 32
    a = box_from_probability(_disc_map(n, 64, 64, 10), (n, n), side)
    b = box_from_probability(_disc_map(n, 64 + dr, 64 + dc, 10), (n, n), side)
    assert (b.top - a.top, b.left - a.left) == (dr, dc)


def test_roi_manifest_roundtrip(tmp_path):
    boxes = [ROIBox.around((40, 40), 32, (100, 100), 16), replace(ROIBox.around((50, 50), 32, (100, 100)), warning=True)]
    write_roi_manifest(tmp_path / "r.jsonl", ["a", "b"], boxes)
    back = read_roi_manifest(tmp_path / "r.jsonl")
    assert back == {"a": boxes[0], "b": boxes[1]}


def test_resize_sample_keeps_containment():
    src, _, _ = generate_synthetic(FULL_IMAGE_CONFIG, 1, 1)
    s = resize_sample(src[0], 37)
    assert s.shape == (37, 37) and s.original_size == (160, 160)
    assert not (s.labels.cup & ~s.labels.disc).any()


def test_train_extractor_requires_labels():
    state = init_state(build_extractor("desk"), 0)
    with pytest.raises(EmptyDataset):
        train_extractor(state, [])
    _, tgt, _ = generate_synthetic(FULL_IMAGE_CONFIG, 1, 1)
    with pytest.raises(MissingLabels):
        train_extractor(state, [tgt[0].without_labels()])


def test_zero_epochs_returns_unchanged_copy():
    state = init_state(build_extractor("desk"), 0)
    src, _, _ = generate_synthetic(FULL_IMAGE_CONFIG, 2, 1)
    out = train_extractor(state, src, replace(DESK_EXTRACTOR, epochs=0))
    assert out.fingerprint() == state.fingerprint()
    assert out is not state


def test_extractor_training_lowers_loss():
    src, _, _ = generate_synthetic(FULL_IMAGE_CONFIG, 16, 1)
    state = init_state(build_extractor("desk"), 0)
    log = TrainLog()
    out = train_extractor(state, src, replace(DESK_EXTRACTOR, epochs=4), train_log=log)
    losses = [r["loss"] for r in log.records]
    assert len(losses) == 4 and losses[-1] < losses[0]
    assert out.training_step == 8
    p = disc_probability(out, src[:2])
    assert p.shape == (2, 160, 160) and p.min() >= 0 and p.max() <= 1
