"""Stage one of the pipeline: coarse disc localisation and ROI cropping."""

from __future__ import annotations

import json
import logging
from dataclasses import replace

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .adapt import DESK_EXTRACTOR, predict_arrays, train_supervised
from .core import ImageSample, LabelMasks, ROIBox, crop
from .errors import EmptyDataset, MissingLabels

log = logging.getLogger(__name__)


def resize_sample(sample, size):
    """Resample a sample to ``size`` x ``size`` (labels nearest-neighbour)."""
    if sample.shape == (size, size):
        return sample
    px = np.clip(resize(sample.pixels, (size, size, 3), order=1, anti_aliasing=True, mode="edge"), 0, 1)
    labels = None
    if sample.labels is not None:
        disc = resize(sample.labels.disc.astype(float), (size, size), order=0, anti_aliasing=False) > 0.5
        cup = resize(sample.labels.cup.astype(float), (size, size), order=0, anti_aliasing=False) > 0.5
        labels = LabelMasks(disc, cup & disc)
    return ImageSample(sample.id, px, labels, sample.domain, sample.original_size)


def train_extractor(state, source, cfg=DESK_EXTRACTOR, val=None, train_log=None):
    """Train the extractor on resized source images with disc labels (dice loss)."""
    if not source:
        raise EmptyDataset("no source samples")
    missing = [s.id for s in source if s.labels is None]
    if missing:
        raise MissingLabels(f"extractor training needs disc labels; missing for {missing[:3]}")
    size = state.spec.input_shape[0]
    train = [resize_sample(s, size) for s in source]
    val = [resize_sample(s, size) for s in val] if val else None
    channels = state.spec.out_channels
    return train_supervised(state, train, replace(cfg, phase="extractor"), val=val,
                            train_log=train_log, channels=channels)


def _largest_component(mask):
    lab, n = ndimage.label(mask)
    if n == 0:
        return None
    sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
    return lab == (int(np.argmax(sizes)) + 1)


def disc_probability(state, images):
    """Extractor disc probability maps at the extractor's input resolution."""
    size = state.spec.input_shape[0]
    net = state.module()
    x = np.stack([resize_sample(s.without_labels(), size).pixels for s in images])
    return predict_arrays(net, x)[..., 0]


def box_from_probability(prob, image_shape, side, out_size=None, threshold=0.5):
    """ROI from a disc probability map: centroid of the largest component.

    An empty prediction falls back to the image centre with ``warning`` set.
    """
    h0, w0 = image_shape[:2]
    comp = _largest_component(prob >= threshold)
    if comp is None:
        center = ((h0 - 1) / 2.0, (w0 - 1) / 2.0)
        box = ROIBox.around(center, side, (h0, w0), out_size)
        return replace(box, warning=True)
    r, c = ndimage.center_of_mass(comp)
    sh, sw = h0 / prob.shape[0], w0 / prob.shape[1]
    center = ((r + 0.5) * sh - 0.5, (c + 0.5) * sw - 0.5)
    return ROIBox.around(center, side, (h0, w0), out_size)


def locate_discs(state, images, side, out_size=None, threshold=0.5):
    probs = disc_probability(state, images)
    return [box_from_probability(p, s.shape, side, out_size, threshold) for p, s in zip(probs, images)]


def locate_disc(state, image, side, out_size=None, threshold=0.5):
    return locate_discs(state, [image], side, out_size, threshold)[0]


def extract_roi(state, image, side, out_size=None):
    box = locate_disc(state, image, side, out_size)
    return crop(image, box), box


def extract_rois(state, images, side, out_size=None):
    boxes = locate_discs(state, images, side, out_size)
    return [crop(s, b) for s, b in zip(images, boxes)], boxes


def write_roi_manifest(path, ids, boxes):
    with open(path, "w") as fh:
        for sid, b in zip(ids, boxes):
            fh.write(json.dumps({"id": sid, **b.to_dict(), "warning": b.warning}) + "\n")


def read_roi_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["id"]] = replace(ROIBox.from_dict(d), warning=bool(d.get("warning", False)))
    return out
