"""Network descriptions and their torch realisation.

A :class:`ModelSpec` is a flat, serialisable list of :class:`Layer`
descriptors.  :class:`Network` interprets that list; skip connections are
expressed with a few structural ops:

``pool``      push the current feature map on the skip stack, then 2x2 max-pool
``up``        2x bilinear upsample, pop the skip stack and concatenate
``save``      remember the current feature map under ``name``
``fuse``      project the saved map with a 1x1 conv, upsample the current map
              to its size and concatenate
``aspp``      atrous spatial pyramid pooling
``resize``    bilinear resize to the network's input resolution
``sigmoid``   elementwise sigmoid

Three builders produce the extractor (U-Net), the segmenter (MobileNetV2
backbone + DeepLabv3+ head) and the patch discriminator at ``paper`` or
``desk`` scale.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatch, UninitializedModel

CHECKPOINT_VERSION = 1

# (expansion, channels, repeats, stride, dilation) per MobileNetV2 stage.
# Stock strides for the stem and stages 1-3; stride 1 (dilated) afterwards.
MOBILENET_STAGES = (
    (1, 16, 1, 1, 1),
    (6, 24, 2, 2, 1),
    (6, 32, 3, 2, 1),
    (6, 64, 4, 1, 2),
    (6, 96, 3, 1, 2),
    (6, 160, 3, 1, 4),
    (6, 320, 1, 1, 4),
)
ASPP_RATES = (1, 6, 12, 18)

SCALES = {
    # name: (width multiplier, extractor input, segmenter input)
    "paper": (1.0, 640, 512),
    "desk": (0.2, 160, 128),
}
DESK_EXTRACTOR_WIDTH = 0.125


@dataclass(frozen=True)
class Layer:
    op: str
    out: int = 0
    k: int = 3
    s: int = 1
    d: int = 1
    act: str | None = None
    bn: bool = False
    t: int = 1  # inverted-residual expansion
    n: int = 1  # inverted-residual repeats
    rates: tuple = ()
    name: str = ""

    def to_dict(self):
        d = asdict(self)
        d["rates"] = list(self.rates)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["rates"] = tuple(d.get("rates", ()))
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    name: str  # "extractor" | "segmenter" | "discriminator"
    width_multiplier: float
    input_shape: tuple  # (H, W, C)
    layers: tuple = field(default_factory=tuple)

    def conv_layers(self):
        return [l for l in self.layers if l.op == "conv"]

    @property
    def out_channels(self):
        return self.conv_layers()[-1].out

    def to_dict(self):
        return {
            "name": self.name,
            "width_multiplier": self.width_multiplier,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], float(d["width_multiplier"]), tuple(d["input_shape"]),
                   tuple(Layer.from_dict(l) for l in d["layers"]))

    def with_input(self, h, w):
        return replace(self, input_shape=(h, w, self.input_shape[2]))


def _ch(c, width):
    if width == 1.0:
        return c
    return max(4, int(round(c * width / 4.0)) * 4)


def _scale(scale):
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}")
    return SCALES[scale]


def build_extractor(scale="paper", out_channels=1, width=None):
    """U-Net: 4 pooling levels, two 3x3 convs per level, 1x1 sigmoid head.

    19 convolutions in total.  ``out_channels=2`` gives the joint disc/cup
    variant used only for the extractor-only comparison.
    """
    w0, size, _ = _scale(scale)
    w = width if width is not None else (w0 if scale == "paper" else DESK_EXTRACTOR_WIDTH)
    chans = [_ch(c, w) for c in (64, 128, 256, 512, 1024)]
    layers = []
    for c in chans[:-1]:
        layers += [Layer("conv", c, act="relu", bn=True), Layer("conv", c, act="relu", bn=True), Layer("pool")]
    layers += [Layer("conv", chans[-1], act="relu", bn=True), Layer("conv", chans[-1], act="relu", bn=True)]
    for c in reversed(chans[:-1]):
        layers += [Layer("up"), Layer("conv", c, act="relu", bn=True), Layer("conv", c, act="relu", bn=True)]
    layers += [Layer("conv", out_channels, k=1, act="sigmoid")]
    return ModelSpec("extractor", w, (size, size, 3), tuple(layers))


def build_segmenter(scale="paper", width=None):
    w0, _, size = _scale(scale)
    w = width if width is not None else w0
    layers = [Layer("conv", _ch(32, w), k=3, s=2, act="relu6", bn=True, name="stem")]
    for i, (t, c, n, s, d) in enumerate(MOBILENET_STAGES):
        layers.append(Layer("ir", _ch(c, w), s=s, d=d, t=t, n=n, name=f"stage{i + 1}"))
        if i == 1:
            # first stride-2 stage: 1/4 resolution low-level features
            layers.append(Layer("save", name="low"))
    layers += [
        Layer("aspp", _ch(256, w), rates=ASPP_RATES),
        Layer("fuse", _ch(48, w), name="low"),
        Layer("conv", _ch(256, w), act="relu", bn=True),
        Layer("conv", _ch(256, w), act="relu", bn=True),
        Layer("conv", 2, k=1),
        Layer("resize"),
        Layer("sigmoid"),
    ]
    return ModelSpec("segmenter", w, (size, size, 3), tuple(layers))


def build_discriminator(scale="paper", width=None):
    w0, _, size = _scale(scale)
    w = width if width is not None else w0
    chans = [_ch(c, w) for c in (64, 128, 256, 512)] + [1]
    layers = [Layer("conv", c, k=4, s=2, act="leaky") for c in chans[:-1]]
    layers.append(Layer("conv", 1, k=4, s=2, act="sigmoid"))
    return ModelSpec("discriminator", w, (size, size, 2), tuple(layers))


BUILDERS = {"extractor": build_extractor, "segmenter": build_segmenter, "discriminator": build_discriminator}


# ---------------------------------------------------------------- torch modules


def same_padding(size, k, s, d=1):
    """TF-style 'same' padding (before, after) giving ceil(size / s) outputs."""
    eff = (k - 1) * d + 1
    out = -(-size // s)
    total = max((out - 1) * s + eff - size, 0)
    return total // 2, total - total // 2


class SameConv2d(nn.Conv2d):
    def __init__(self, cin, cout, k, s=1, d=1, groups=1, bias=True):
        super().__init__(cin, cout, k, stride=s, dilation=d, groups=groups, bias=bias)

    def forward(self, x):
        k, s, d = self.kernel_size[0], self.stride[0], self.dilation[0]
        if k == 1 and s == 1:
            return super().forward(x)
        ph = same_padding(x.shape[-2], k, s, d)
        pw = same_padding(x.shape[-1], k, s, d)
        return super().forward(F.pad(x, (pw[0], pw[1], ph[0], ph[1])))


_ACTS = {
    None: nn.Identity,
    "relu": lambda: nn.ReLU(inplace=True),
    "relu6": lambda: nn.ReLU6(inplace=True),
    "leaky": lambda: nn.LeakyReLU(0.2, inplace=True),
    "sigmoid": nn.Sigmoid,
}


def conv_block(cin, cout, k=3, s=1, d=1, act="relu", bn=True, groups=1):
    mods = [SameConv2d(cin, cout, k, s, d, groups=groups, bias=not bn)]
    if bn:
        mods.append(nn.BatchNorm2d(cout))
    mods.append(_ACTS[act]())
    return nn.Sequential(*mods)


class InvertedResidual(nn.Module):
    def __init__(self, cin, cout, s, d, t):
        super().__init__()
        hidden = cin * t
        layers = []
        if t != 1:
            layers.append(conv_block(cin, hidden, k=1, act="relu6"))
        layers.append(conv_block(hidden, hidden, k=3, s=s, d=d, act="relu6", groups=hidden))
        layers.append(conv_block(hidden, cout, k=1, act=None))
        self.body = nn.Sequential(*layers)
        self.residual = s == 1 and cin == cout

    def forward(self, x):
        y = self.body(x)
        return x + y if self.residual else y


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        self.branches = nn.ModuleList(
            conv_block(cin, cout, k=1 if r == 1 else 3, d=r) for r in rates
        )
        # no BatchNorm on a 1x1 map: batch-size-1 statistics are undefined
        self.pool = conv_block(cin, cout, k=1, bn=False)
        self.project = conv_block(cout * (len(rates) + 1), cout, k=1)

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        g = self.pool(F.adaptive_avg_pool2d(x, 1))
        feats.append(g.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(feats, 1))


class Network(nn.Module):
    """Interpreter for a :class:`ModelSpec` layer list."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.ops = []
        mods = nn.ModuleList()
        c = spec.input_shape[2]
        skips, saved = [], {}
        for layer in spec.layers:
            mod = None
            if layer.op == "conv":
                mod = conv_block(c, layer.out, layer.k, layer.s, layer.d, layer.act, layer.bn)
                c = layer.out
            elif layer.op == "ir":
                blocks = []
                for i in range(layer.n):
                    blocks.append(InvertedResidual(c, layer.out, layer.s if i == 0 else 1, layer.d, layer.t))
                    c = layer.out
                mod = nn.Sequential(*blocks)
            elif layer.op == "aspp":
                mod = ASPP(c, layer.out, layer.rates)
                c = layer.out
            elif layer.op == "pool":
                skips.append(c)
            elif layer.op == "up":
                c += skips.pop()
            elif layer.op == "save":
                saved[layer.name] = c
            elif layer.op == "fuse":
                mod = conv_block(saved[layer.name], layer.out, k=1)
                c += layer.out
            elif layer.op not in ("resize", "sigmoid"):
                raise ConfigError(f"unknown layer op {layer.op!r}")
            self.ops.append((layer, len(mods) if mod is not None else None))
            if mod is not None:
                mods.append(mod)
        self.mods = mods
        self.out_channels = c

    def forward(self, x, logits=False):
        """``logits=True`` skips a final sigmoid (conv activation or op)."""
        size = x.shape[-2:]
        skips, saved = [], {}
        last = len(self.ops) - 1
        for i, (layer, idx) in enumerate(self.ops):
            op = layer.op
            if logits and i == last and op == "conv" and layer.act == "sigmoid":
                x = self.mods[idx][:-1](x)
            elif op in ("conv", "ir", "aspp"):
                x = self.mods[idx](x)
            elif op == "pool":
                skips.append(x)
                x = F.max_pool2d(x, 2, ceil_mode=True)
            elif op == "up":
                skip = skips.pop()
                x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
                x = torch.cat([x, skip], 1)
            elif op == "save":
                saved[layer.name] = x
            elif op == "fuse":
                low = self.mods[idx](saved[layer.name])
                x = F.interpolate(x, size=low.shape[-2:], mode="bilinear", align_corners=False)
                x = torch.cat([x, low], 1)
            elif op == "resize":
                x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            elif op == "sigmoid" and not (logits and i == last):
                x = torch.sigmoid(x)
        return x

    def features(self, x):
        """Backbone output just before the ASPP head (segmenter only)."""
        for layer, idx in self.ops:
            if layer.op == "aspp":
                return x
            if layer.op in ("conv", "ir"):
                x = self.mods[idx](x)
        raise ConfigError("network has no ASPP head")


def init_weights(module, spec, generator=None):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if spec.name == "discriminator":
                # 0.02 at full width; narrower nets get 0.02/sqrt(width) wherever the fan-in
                # shrinks with width, so the per-layer gain and the initial logit scale match
                std = 0.02
                if m.in_channels != spec.input_shape[-1]:
                    std /= math.sqrt(spec.width_multiplier)
                nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            else:
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def count_parameters(spec):
    with torch.device("meta"):
        net = Network(spec)
    return sum(p.numel() for p in net.parameters())


def output_shape(spec, h=None, w=None):
    """(H', W', C') for an input of (h, w), computed on the meta device."""
    h = h or spec.input_shape[0]
    w = w or spec.input_shape[1]
    with torch.device("meta"):
        net = Network(spec)
        y = net(torch.empty(1, spec.input_shape[2], h, w))
    return tuple(y.shape[2:]) + (y.shape[1],)


def receptive_field(spec, h, w, row, col):
    """Input window ``((r0, r1), (c0, c1))`` (inclusive, may extend past the
    border) seen by output cell ``(row, col)`` of a plain conv stack."""
    sizes = [(h, w)]
    convs = spec.conv_layers()
    if len(convs) != len(spec.layers):
        raise ConfigError("receptive_field only supports plain conv stacks")
    for l in convs:
        sh, sw = sizes[-1]
        sizes.append((-(-sh // l.s), -(-sw // l.s)))
    r0 = r1 = row
    c0 = c1 = col
    for l, (sh, sw) in zip(reversed(convs), reversed(sizes[:-1])):
        eff = (l.k - 1) * l.d + 1
        ph = same_padding(sh, l.k, l.s, l.d)[0]
        pw = same_padding(sw, l.k, l.s, l.d)[0]
        r0, r1 = r0 * l.s - ph, r1 * l.s - ph + eff - 1
        c0, c1 = c0 * l.s - pw, c1 * l.s - pw + eff - 1
    return (r0, r1), (c0, c1)


# ---------------------------------------------------------------- state


@dataclass
class ModelState:
    """Spec plus trained parameters (including BatchNorm buffers)."""

    spec: ModelSpec
    parameters: dict | None = None
    training_step: int = 0

    def module(self):
        if not self.parameters:
            raise UninitializedModel(f"{self.spec.name} has no parameters")
        net = Network(self.spec)
        net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()})
        return net

    def fingerprint(self):
        h = hashlib.sha256()
        for k in sorted(self.parameters or {}):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.parameters[k]).tobytes())
        return h.hexdigest()

    def copy(self):
        params = None if self.parameters is None else {k: v.copy() for k, v in self.parameters.items()}
        return ModelState(self.spec, params, self.training_step)


def state_from_module(spec, net, training_step=0):
    params = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    return ModelState(spec, params, training_step)


def init_state(spec, seed=0):
    g = torch.Generator().manual_seed(seed)
    net = Network(spec)
    init_weights(net, spec, g)
    return state_from_module(spec, net, 0)


def forward(state, batch, mode="eval"):
    """Run a model on a (B, H, W, C) numpy batch and return (B, H', W', C')."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[3] != state.spec.input_shape[2]:
        raise ShapeMismatch(f"expected (B, H, W, {state.spec.input_shape[2]}), got {batch.shape}")
    net = state.module()
    net.train(mode == "train")
    with torch.no_grad():
        y = net(torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous())
    return y.permute(0, 2, 3, 1).numpy()


def save_state(path, state):
    header = {
        "format": "odoc-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": state.spec.to_dict(),
        "training_step": state.training_step,
    }
    arrays = {f"p/{k}": v for k, v in (state.parameters or {}).items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_state(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != "odoc-checkpoint":
            raise ConfigError(f"{path}: not a checkpoint file")
        if header["version"] > CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: checkpoint version {header['version']} is newer than supported")
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
    return ModelState(ModelSpec.from_dict(header["spec"]), params, int(header["training_step"]))


def downsampling_rate(spec):
    """Input size divided by the backbone feature size (segmenter)."""
    h = spec.input_shape[0]
    with torch.device("meta"):
        net = Network(spec)
        f = net.features(torch.empty(1, spec.input_shape[2], h, h))
    return h / f.shape[-1]


def rf_size(spec):
    """Receptive-field side of one output cell of a plain conv stack."""
    size, jump = 1, 1
    for l in spec.conv_layers():
        size += ((l.k - 1) * l.d) * jump
        jump *= l.s
    return size


__all__ = [
    "Layer", "ModelSpec", "ModelState", "Network", "build_extractor", "build_segmenter",
    "build_discriminator", "init_state", "forward", "save_state", "load_state", "count_parameters",
    "output_shape", "receptive_field", "rf_size", "downsampling_rate",
]
