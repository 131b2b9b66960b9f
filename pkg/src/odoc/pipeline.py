"""Two-stage inference and ROI preparation for training.

Training ROIs are cut around the ground-truth disc; unlabelled images
(adaptation targets, prediction inputs) are cut around the extractor's
disc estimate.  Images that already have the segmenter's input size can
skip the first stage.
"""

from __future__ import annotations

import logging
import os

import numpy as np
from PIL import Image
from scipy import ndimage

from .adapt import predict_arrays, to_arrays
from .core import MaskEncoding, ProbabilityMaps, ROIBox, binarize, crop, encode_mask, uncrop
from .errors import ConfigError, EmptyDisc
from .metrics import postprocess
from .roi import locate_discs

log = logging.getLogger(__name__)

# ROI side in original pixels, per scale
ROI_SIDE = {"paper": 512, "desk": 128}


def full_box(sample, out_size):
    """Box covering a square image as is (no cropping)."""
    h, w = sample.shape
    if h != w:
        raise ConfigError(f"{sample.id}: non-square image {sample.shape} needs an extractor checkpoint")
    return ROIBox.around(((h - 1) / 2.0, (w - 1) / 2.0), h, (h, w), out_size)


def label_box(sample, side, out_size):
    """Box centred on the ground-truth disc centroid."""
    if not sample.labels.disc.any():
        raise EmptyDisc(f"{sample.id}: empty disc label, cannot centre a ROI")
    center = ndimage.center_of_mass(sample.labels.disc)
    return ROIBox.around(center, side, sample.shape, out_size)


def roi_boxes(samples, out_size, side=None, extractor=None):
    """One box per sample.

    With ``extractor`` the disc is located by the network, otherwise from
    labels; samples already at ``out_size`` with no side given are used
    whole.
    """
    if extractor is not None:
        if side is None:
            raise ConfigError("ROI side required with an extractor")
        return locate_discs(extractor, samples, side, out_size)
    boxes = []
    for s in samples:
        if side is None or (s.shape == (out_size, out_size) and s.labels is None):
            boxes.append(full_box(s, out_size))
        elif s.labels is not None:
            boxes.append(label_box(s, side, out_size))
        else:
            raise ConfigError(f"{s.id}: unlabelled {s.shape} image needs an extractor checkpoint")
    return boxes


def prepare_rois(samples, out_size, side=None, extractor=None):
    boxes = roi_boxes(samples, out_size, side, extractor)
    return [crop(s, b) for s, b in zip(samples, boxes)], boxes


def segment(state, rois):
    """Segmenter probability maps for ROI samples."""
    x, _ = to_arrays(rois, need_labels=False)
    return [ProbabilityMaps.from_array(p.astype(np.float64)) for p in predict_arrays(state.module(), x)]


def predict(segmenter, samples, side=None, extractor=None, threshold=0.5):
    """Binary masks in original image coordinates, keyed by id, plus the boxes."""
    out_size = segmenter.spec.input_shape[0]
    rois, boxes = prepare_rois([s.without_labels() for s in samples], out_size, side, extractor)
    maps = segment(segmenter, rois)
    masks = {}
    for s, b, m in zip(samples, boxes, maps):
        if b.warning:
            log.warning("%s: disc not found, ROI falls back to the image centre", s.id)
        masks[s.id] = postprocess(binarize(uncrop(m, b, s.shape), threshold))
    return masks, boxes


def write_masks(folder, masks, encoding=MaskEncoding()):
    os.makedirs(folder, exist_ok=True)
    for sid, m in sorted(masks.items()):
        Image.fromarray(encode_mask(m, encoding)).save(os.path.join(folder, f"{sid}.png"))


def average_maps(maps_list):
    """Mean of several models' probability maps (ensemble plumbing)."""
    if not maps_list:
        raise ValueError("nothing to average")
    return ProbabilityMaps.from_array(np.mean([m.stack() for m in maps_list], axis=0))
