"""Dataset ingestion and the synthetic two-domain fundus generator.

On-disk layout of a dataset tree::

    <root>/manifest.yaml
    <root>/images/<id>.png      8-bit RGB
    <root>/masks/<id>.png       8-bit grey, levels from the manifest encoding

Real datasets (REFUGE, Drishti-GS, RIM-ONE-r3) are used by writing a
manifest that points at their image and mask folders; see the README for
the layouts.
"""

from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage
from skimage.draw import line

from .core import DomainTag, ImageSample, LabelMasks, MaskEncoding, decode_mask, encode_mask
from .errors import ConfigError, ContainmentViolation, EmptyDataset, EncodingError, MissingMask, UnknownPixelValue

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    name: str
    root: str
    split: str = "train"
    image_glob: str = "images/*.png"
    mask_glob: str | None = "masks/*.png"
    encoding: MaskEncoding = field(default_factory=MaskEncoding)
    domain: DomainTag = DomainTag.SOURCE
    skip_invalid: bool = False

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train/val/test, got {self.split!r}")
        self.domain = DomainTag.parse(self.domain)
        if isinstance(self.encoding, dict):
            self.encoding = MaskEncoding.from_dict(self.encoding)

    @property
    def has_labels(self):
        return bool(self.mask_glob)

    def to_dict(self):
        d = asdict(self)
        d["domain"] = self.domain.value
        d["encoding"] = asdict(self.encoding)
        d.pop("root")
        return d

    @classmethod
    def read(cls, path):
        """Read a manifest; a relative ``root`` is resolved against its folder."""
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"manifest not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        base = os.path.dirname(os.path.abspath(path))
        d["root"] = os.path.normpath(os.path.join(base, d.get("root", ".")))
        d.setdefault("name", os.path.basename(base))
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"{path}: {e}") from None

    def write(self, path):
        d = self.to_dict()
        d["root"] = "."
        with open(path, "w") as fh:
            yaml.safe_dump(d, fh, sort_keys=False)


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, pixels):
    Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)).save(path)


def load_dataset(manifest):
    """Decode every image (and mask, when declared) of a manifest, sorted by id."""
    images = sorted(glob.glob(os.path.join(manifest.root, manifest.image_glob)))
    if not images:
        raise EmptyDataset(f"{manifest.name}: no images match {manifest.image_glob} under {manifest.root}")
    masks = {}
    if manifest.has_labels:
        for p in glob.glob(os.path.join(manifest.root, manifest.mask_glob)):
            masks.setdefault(_stem(p), []).append(p)
    samples = []
    for path in images:
        sid = _stem(path)
        pixels = read_image(path)
        labels = None
        if manifest.has_labels:
            found = masks.get(sid, [])
            if len(found) != 1:
                raise MissingMask(f"{manifest.name}: image {sid} pairs with {len(found)} mask files")
            with Image.open(found[0]) as im:
                raw = np.asarray(im)
            try:
                labels = decode_mask(raw, manifest.encoding)
            except UnknownPixelValue as e:
                raise EncodingError(f"{found[0]}: {e}") from None
            except ContainmentViolation as e:
                if manifest.skip_invalid:
                    log.warning("skipping %s: %s", sid, e)
                    continue
                raise ContainmentViolation(f"{sid}: {e}") from None
        samples.append(ImageSample(sid, pixels, labels, manifest.domain))
    return samples


def save_dataset(samples, root, name="dataset", split="train", encoding=MaskEncoding(), domain=None,
                 with_labels=True):
    """Write samples as a dataset tree and return its manifest."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    labelled = with_labels and all(s.labels is not None for s in samples)
    if labelled:
        os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for s in samples:
        write_image(os.path.join(root, "images", f"{s.id}.png"), s.pixels)
        if labelled:
            Image.fromarray(encode_mask(s.labels, encoding)).save(os.path.join(root, "masks", f"{s.id}.png"))
    dom = domain if domain is not None else (samples[0].domain if samples else DomainTag.SOURCE)
    m = DatasetManifest(name, root, split, mask_glob="masks/*.png" if labelled else None,
                        encoding=encoding, domain=dom)
    m.write(os.path.join(root, "manifest.yaml"))
    return m


# ---------------------------------------------------------------- synthetic generator


@dataclass(frozen=True)
class DomainShift:
    """Appearance deltas applied on top of the source rendering (all zero = none)."""

    color_gain: tuple = (0.0, 0.0, 0.0)
    color_bias: tuple = (0.0, 0.0, 0.0)
    gamma: float = 0.0  # log2 of the contrast gamma
    texture: float = 0.0
    noise: float = 0.0
    clutter: int = 0  # extra vessel-like strokes
    blur: float = 0.0
    disc_contrast: float = 0.0  # added to the disc/cup brightness (negative dims them)

    def is_identity(self):
        return self == DomainShift()


# A camera/illumination change: colour cast, flatter and blurrier optic
# nerve head, more texture and vessel clutter.
DEFAULT_TARGET_SHIFT = DomainShift(
    color_gain=(-0.3, 0.1, 0.35),
    color_bias=(0.02, 0.06, 0.02),
    gamma=0.5,
    texture=0.06,
    noise=0.03,
    clutter=4,
    blur=1.0,
    disc_contrast=-0.35,
)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    disc_radius: tuple = (0.2, 0.28)  # fraction of image size
    center_jitter: float = 0.08  # max offset of the disc centre from the middle, fraction of size
    cdr: tuple = (0.3, 0.8)
    aspect: tuple = (0.92, 1.12)  # vertical / horizontal semi-axis
    vessels: tuple = (4, 8)
    texture: float = 0.05
    noise: float = 0.01
    source_shift: DomainShift = field(default_factory=DomainShift)
    target_shift: DomainShift = field(default_factory=lambda: DEFAULT_TARGET_SHIFT)
    glaucoma_cdr: float = 0.6
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cdr
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"cdr range must lie inside (0, 1), got {self.cdr}")
        rlo, rhi = self.disc_radius
        if not 0 < rlo <= rhi:
            raise ConfigError(f"bad disc radius range {self.disc_radius}")
        if rhi * self.aspect[1] + self.center_jitter >= 0.5:
            raise ConfigError("disc radius plus centre jitter would leave the image")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        for k in ("source_shift", "target_shift"):
            if isinstance(d.get(k), dict):
                d[k] = DomainShift(**{kk: tuple(v) if isinstance(v, list) else v for kk, v in d[k].items()})
        for k in ("disc_radius", "cdr", "aspect", "vessels"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))


# Full-fundus variant used to train and check the ROI extractor.
FULL_IMAGE_CONFIG = SynthConfig(image_size=160, disc_radius=(0.17, 0.22), center_jitter=0.22)


@dataclass(frozen=True)
class SynthTruth:
    id: str
    domain: str
    center: tuple
    disc_axes: tuple  # (vertical, horizontal) semi-axes before rotation
    cup_axes: tuple
    angle: float
    cdr: float
    glaucoma: bool


def _ellipse_rho(rr, cc, center, axes, angle):
    """Normalised elliptical radius (1 on the boundary)."""
    dr = rr - center[0]
    dc = cc - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dr + sa * dc
    v = -sa * dr + ca * dc
    return np.sqrt((u / axes[0]) ** 2 + (v / axes[1]) ** 2)


def _half_height(axes, angle):
    a, b = axes
    return float(np.hypot(a * np.cos(angle), b * np.sin(angle)))


def _vessel_map(rng, n, start, size, length):
    canvas = np.zeros((size, size), dtype=bool)
    for _ in range(n):
        r, c = start
        theta = rng.uniform(0, 2 * np.pi)
        for _ in range(int(length)):
            theta += rng.normal(0, 0.15)
            nr, nc = r + 2.0 * np.sin(theta), c + 2.0 * np.cos(theta)
            rr, cc = line(int(round(r)), int(round(c)), int(round(nr)), int(round(nc)))
            ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            canvas[rr[ok], cc[ok]] = True
            r, c = nr, nc
            if not (0 <= r < size and 0 <= c < size):
                break
    return canvas


def _render(rng, cfg, shift, geometry):
    """Render one image from a fixed geometry; appearance draws come from ``rng``."""
    n = cfg.image_size
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    center, dax, cax, ang = geometry["center"], geometry["disc_axes"], geometry["cup_axes"], geometry["angle"]

    # background: orange-red fundus with vignetting and smooth texture
    base = np.array([0.72, 0.33, 0.14]) + rng.normal(0, 0.03, 3)
    vig = 1.0 - 0.35 * (((rr - n / 2) ** 2 + (cc - n / 2) ** 2) / (n / 2) ** 2)
    tex_amp = cfg.texture + shift.texture
    tex = ndimage.gaussian_filter(rng.normal(0, 1, (n, n)), sigma=n / 24)
    tex = tex / (tex.std() + 1e-9) * tex_amp
    img = base[None, None, :] * np.clip(vig, 0.3, 1)[..., None] + tex[..., None]

    # optic nerve head: soft-edged bright disc and brighter cup
    rho_d = _ellipse_rho(rr, cc, center, dax, ang)
    rho_c = _ellipse_rho(rr, cc, center, cax, ang)
    mean_r = np.mean(dax)
    soft_d = 1 / (1 + np.exp(-(1 - rho_d) * mean_r / 1.5))
    soft_c = 1 / (1 + np.exp(-(1 - rho_c) * np.mean(cax) / 3.0))
    k = 1.0 + shift.disc_contrast
    disc_col = np.array([0.95, 0.72, 0.38]) + rng.normal(0, 0.03, 3)
    cup_col = np.array([1.0, 0.93, 0.75]) + rng.normal(0, 0.02, 3)
    img = img + k * soft_d[..., None] * (disc_col - img)
    img = img + k * soft_c[..., None] * (cup_col - img)

    # vessels radiate from the disc centre and cross disc and cup
    nv = int(rng.integers(cfg.vessels[0], cfg.vessels[1] + 1)) + shift.clutter
    vessels = _vessel_map(rng, nv, center, n, length=n * 0.6)
    dist = ndimage.distance_transform_edt(~vessels)
    width = rng.uniform(0.8, 1.5)
    vmask = np.exp(-(dist**2) / (2 * width**2))
    img = img * (1 - 0.55 * vmask[..., None]) + 0.55 * vmask[..., None] * np.array([0.35, 0.05, 0.03])

    # domain appearance
    if shift.blur > 0:
        img = ndimage.gaussian_filter(img, sigma=(shift.blur, shift.blur, 0))
    img = img * (1.0 + np.asarray(shift.color_gain)) + np.asarray(shift.color_bias)
    img = np.clip(img, 0, 1) ** (2.0 ** shift.gamma)
    img = img + rng.normal(0, cfg.noise + shift.noise, img.shape)
    return np.clip(img, 0, 1)


def _geometry(rng, cfg):
    n = cfg.image_size
    r = rng.uniform(*cfg.disc_radius) * n
    aspect = rng.uniform(*cfg.aspect)
    dax = (r * np.sqrt(aspect), r / np.sqrt(aspect))
    cdr = rng.uniform(*cfg.cdr)
    # cup semi-axes shrink with a slightly different aspect, always leaving a rim
    caspect = rng.uniform(0.95, 1.1)
    cax = (dax[0] * cdr, min(dax[1] * cdr * caspect, dax[1] * 0.9))
    ang = rng.uniform(-0.25, 0.25)
    jit = cfg.center_jitter * n
    center = (n / 2 + rng.uniform(-jit, jit), n / 2 + rng.uniform(-jit, jit))
    return {"center": center, "disc_axes": dax, "cup_axes": cax, "angle": ang}


def _labels(cfg, g):
    n = cfg.image_size
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    disc = _ellipse_rho(rr, cc, g["center"], g["disc_axes"], g["angle"]) <= 1.0
    cup = (_ellipse_rho(rr, cc, g["center"], g["cup_axes"], g["angle"]) <= 1.0) & disc
    return LabelMasks(disc, cup)


def synth_sample(cfg, domain, index, geometry=None):
    """One deterministic sample; seeded by (seed, domain, index)."""
    domain = DomainTag.parse(domain)
    dom_i = 0 if domain is DomainTag.SOURCE else 1
    geo_rng = np.random.default_rng([cfg.seed, dom_i, index, 0])
    app_rng = np.random.default_rng([cfg.seed, dom_i, index, 1])
    g = geometry if geometry is not None else _geometry(geo_rng, cfg)
    shift = cfg.source_shift if domain is DomainTag.SOURCE else cfg.target_shift
    pixels = _render(app_rng, cfg, shift, g)
    labels = _labels(cfg, g)
    sid = f"{domain.value[0]}{index:05d}"
    cdr = _half_height(g["cup_axes"], g["angle"]) / _half_height(g["disc_axes"], g["angle"])
    truth = SynthTruth(sid, domain.value, tuple(g["center"]), tuple(g["disc_axes"]), tuple(g["cup_axes"]),
                       float(g["angle"]), float(cdr), bool(cdr > cfg.glaucoma_cdr))
    return ImageSample(sid, pixels, labels, domain), truth


def generate_synthetic(cfg, n_source, n_target, start=0):
    """Source and target datasets plus a ground-truth registry keyed by id.

    Geometry is drawn from the same distribution in both domains; only the
    rendering differs.  ``start`` offsets the sample indices so disjoint
    splits can be drawn from one config.
    """
    if n_source < 1 or n_target < 1:
        raise ConfigError("need at least one source and one target sample")
    source, target, registry = [], [], {}
    for dom, n, out in ((DomainTag.SOURCE, n_source, source), (DomainTag.TARGET, n_target, target)):
        for i in range(start, start + n):
            s, t = synth_sample(cfg, dom, i)
            out.append(s)
            registry[s.id] = t
    return source, target, registry


def write_registry(path, registry):
    with open(path, "w") as fh:
        json.dump({k: asdict(v) for k, v in sorted(registry.items())}, fh, indent=1)


def read_registry(path):
    with open(path) as fh:
        d = json.load(fh)
    return {k: SynthTruth(**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
            for k, v in d.items()}


def with_shift(cfg, **kw):
    return replace(cfg, target_shift=replace(cfg.target_shift, **kw))
