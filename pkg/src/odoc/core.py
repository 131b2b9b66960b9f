"""Domain types, mask encoding and the ROI crop/uncrop geometry.

Arrays are row-major, coordinates are ``(row, col)`` and "vertical" always
means the row axis.  Every value object freezes its arrays on construction
so instances can be shared freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from skimage.transform import resize

from .errors import (
    BoxOutOfBounds,
    ContainmentViolation,
    DataError,
    ShapeMismatch,
    UnknownPixelValue,
)


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class DomainTag(enum.Enum):
    SOURCE = "source"
    TARGET = "target"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DataError(f"unknown domain {value!r}; expected 'source' or 'target'") from None


@dataclass(frozen=True, eq=False)
class LabelMasks:
    """Binary disc and cup masks; the cup must lie inside the disc."""

    disc: np.ndarray
    cup: np.ndarray

    def __post_init__(self):
        disc = np.asarray(self.disc)
        cup = np.asarray(self.cup)
        if disc.ndim != 2 or disc.shape != cup.shape:
            raise ShapeMismatch(f"disc {disc.shape} and cup {cup.shape} must be equal 2-D shapes")
        for name, m in (("disc", disc), ("cup", cup)):
            if m.dtype != bool and not np.isin(m, (0, 1)).all():
                raise DataError(f"{name} mask is not binary")
        disc = disc.astype(bool)
        cup = cup.astype(bool)
        if (cup & ~disc).any():
            raise ContainmentViolation(f"{int((cup & ~disc).sum())} cup pixels lie outside the disc")
        object.__setattr__(self, "disc", _frozen(disc))
        object.__setattr__(self, "cup", _frozen(cup))

    @property
    def shape(self):
        return self.disc.shape

    def stack(self):
        """(H, W, 2) float array, disc first."""
        return np.stack([self.disc, self.cup], axis=-1).astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, LabelMasks):
            return NotImplemented
        return np.array_equal(self.disc, other.disc) and np.array_equal(self.cup, other.cup)


@dataclass(frozen=True, eq=False)
class ProbabilityMaps:
    """Independent sigmoid outputs for disc and cup (not softmax-coupled)."""

    disc: np.ndarray
    cup: np.ndarray

    def __post_init__(self):
        disc = np.asarray(self.disc, dtype=np.float64)
        cup = np.asarray(self.cup, dtype=np.float64)
        if disc.ndim != 2 or disc.shape != cup.shape:
            raise ShapeMismatch(f"disc {disc.shape} and cup {cup.shape} must be equal 2-D shapes")
        if not (np.isfinite(disc).all() and np.isfinite(cup).all()):
            raise DataError("probability maps contain non-finite values")
        if disc.min(initial=0) < 0 or disc.max(initial=0) > 1 or cup.min(initial=0) < 0 or cup.max(initial=0) > 1:
            raise DataError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "disc", _frozen(disc))
        object.__setattr__(self, "cup", _frozen(cup))

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a)
        if a.ndim != 3 or a.shape[-1] != 2:
            raise ShapeMismatch(f"expected (H, W, 2), got {a.shape}")
        return cls(a[..., 0], a[..., 1])

    @property
    def shape(self):
        return self.disc.shape

    def stack(self):
        return np.stack([self.disc, self.cup], axis=-1)


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: str
    pixels: np.ndarray
    labels: LabelMasks | None = None
    domain: DomainTag = DomainTag.SOURCE
    original_size: tuple[int, int] | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeMismatch(f"sample {self.id}: pixels must be (H, W, 3), got {px.shape}")
        if px.min() < 0 or px.max() > 1:
            raise DataError(f"sample {self.id}: intensities must lie in [0, 1]")
        if self.labels is not None and self.labels.shape != px.shape[:2]:
            raise ShapeMismatch(f"sample {self.id}: labels {self.labels.shape} vs image {px.shape[:2]}")
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "domain", DomainTag.parse(self.domain))
        if self.original_size is None:
            object.__setattr__(self, "original_size", tuple(px.shape[:2]))
        else:
            object.__setattr__(self, "original_size", tuple(int(v) for v in self.original_size))

    @property
    def shape(self):
        return self.pixels.shape[:2]

    def without_labels(self):
        return ImageSample(self.id, self.pixels, None, self.domain, self.original_size)


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class MaskEncoding:
    """Grey levels used by a dataset's mask files (REFUGE-style by default)."""

    background: int = 255
    disc: int = 128
    cup: int = 0

    def __post_init__(self):
        levels = (self.background, self.disc, self.cup)
        if len(set(levels)) != 3:
            raise DataError(f"mask levels must be distinct, got {levels}")

    @property
    def levels(self):
        return (self.background, self.disc, self.cup)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in (d or {}).items()})


def decode_mask(image, encoding=MaskEncoding()):
    """Decode a grey-level mask image into LabelMasks.

    The disc is the union of the ring level and the cup level, so the
    result satisfies containment by construction.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        if not (image == image[..., :1]).all():
            raise UnknownPixelValue("colour mask image: channels disagree")
        image = image[..., 0]
    bad = ~np.isin(image, encoding.levels)
    if bad.any():
        values = sorted(set(np.unique(image[bad]).tolist()))
        raise UnknownPixelValue(f"pixel values {values[:10]} not in encoding levels {encoding.levels}")
    cup = image == encoding.cup
    disc = cup | (image == encoding.disc)
    return LabelMasks(disc, cup)


def encode_mask(masks, encoding=MaskEncoding()):
    out = np.full(masks.shape, encoding.background, dtype=np.uint8)
    out[masks.disc] = encoding.disc
    out[masks.cup] = encoding.cup
    return out


def binarize(maps, threshold=0.5):
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    disc = maps.disc >= threshold
    cup = (maps.cup >= threshold) & disc
    return LabelMasks(disc, cup)


# ---------------------------------------------------------------- ROI geometry


@dataclass(frozen=True)
class ScaleMap:
    """Affine map from ROI coordinates to original-image coordinates.

    ``orig_row = row0 + scale * roi_row`` (same for columns).
    """

    row0: int
    col0: int
    scale: float = 1.0

    def to_original(self, r, c):
        return self.row0 + self.scale * r, self.col0 + self.scale * c


@dataclass(frozen=True)
class ROIBox:
    center: tuple[float, float]
    side: int
    scale_map: ScaleMap = field(default=None)
    warning: bool = False  # set when localisation failed and the box is a fallback

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("ROI side must be positive")
        if self.scale_map is None:
            top = int(round(self.center[0] - self.side / 2))
            left = int(round(self.center[1] - self.side / 2))
            object.__setattr__(self, "scale_map", ScaleMap(top, left, 1.0))

    @classmethod
    def around(cls, center, side, image_shape, out_size=None):
        """Box of ``side`` pixels centred on ``center`` and clamped into the image.

        ``out_size`` is the resolution the crop will be resampled to; it only
        affects the scale of the inverse map.
        """
        h, w = image_shape[:2]
        if side > h or side > w:
            raise BoxOutOfBounds(f"ROI side {side} exceeds image size {(h, w)}")
        top = int(round(center[0] - side / 2))
        left = int(round(center[1] - side / 2))
        top = min(max(top, 0), h - side)
        left = min(max(left, 0), w - side)
        scale = 1.0 if out_size is None else side / float(out_size)
        return cls((float(center[0]), float(center[1])), int(side), ScaleMap(top, left, scale))

    @property
    def top(self):
        return self.scale_map.row0

    @property
    def left(self):
        return self.scale_map.col0

    @property
    def out_size(self):
        return int(round(self.side / self.scale_map.scale))

    def contains(self, rows, cols):
        """True when the inclusive row/col ranges lie inside the box."""
        return (
            self.top <= rows[0] and rows[1] < self.top + self.side
            and self.left <= cols[0] and cols[1] < self.left + self.side
        )

    def to_dict(self):
        return {
            "center": list(self.center),
            "side": self.side,
            "top": self.top,
            "left": self.left,
            "scale": self.scale_map.scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), int(d["side"]), ScaleMap(int(d["top"]), int(d["left"]), float(d["scale"])))


def _check_box(box, shape):
    h, w = shape
    if box.side > h or box.side > w:
        raise BoxOutOfBounds(f"ROI side {box.side} exceeds image size {(h, w)}")
    if box.top < 0 or box.left < 0 or box.top + box.side > h or box.left + box.side > w:
        raise BoxOutOfBounds(f"ROI at ({box.top}, {box.left}) side {box.side} leaves image {(h, w)}")


def crop(image, box):
    """Cut ``box`` out of ``image``; labels are cropped the same way.

    When the box scale is not 1 the crop is resampled to ``box.out_size``
    (bilinear for pixels, nearest for labels).
    """
    _check_box(box, image.shape)
    rs = slice(box.top, box.top + box.side)
    cs = slice(box.left, box.left + box.side)
    pixels = image.pixels[rs, cs]
    labels = None
    if image.labels is not None:
        disc = image.labels.disc[rs, cs]
        cup = image.labels.cup[rs, cs]
    n = box.out_size
    if n != box.side:
        pixels = np.clip(resize(pixels, (n, n, 3), order=1, anti_aliasing=True, mode="edge"), 0, 1)
        if image.labels is not None:
            disc = resize(disc, (n, n), order=0, anti_aliasing=False).astype(bool)
            cup = resize(cup, (n, n), order=0, anti_aliasing=False).astype(bool) & disc
    if image.labels is not None:
        labels = LabelMasks(disc, cup)
    return ImageSample(image.id, pixels, labels, image.domain, image.original_size)


def uncrop(maps, box, original_size):
    """Place ROI probability maps back on an ``original_size`` canvas of zeros."""
    n = box.out_size
    if maps.shape != (n, n):
        raise ShapeMismatch(f"maps {maps.shape} do not match ROI resolution {(n, n)}")
    _check_box(box, original_size)
    a = maps.stack()
    if n != box.side:
        a = np.clip(resize(a, (box.side, box.side, 2), order=1, anti_aliasing=False, mode="edge"), 0, 1)
    canvas = np.zeros(tuple(original_size) + (2,))
    canvas[box.top:box.top + box.side, box.left:box.left + box.side] = a
    return ProbabilityMaps.from_array(canvas)


def uncrop_masks(masks, box, original_size):
    """Nearest-neighbour counterpart of :func:`uncrop` for binary masks."""
    out = uncrop(ProbabilityMaps(masks.disc.astype(float), masks.cup.astype(float)), box, original_size)
    return binarize(out, 0.5)
