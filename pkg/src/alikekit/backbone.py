"""Lightweight score/descriptor network with analytic complexity accounting.

Encoder: block1 is two 3x3 convs with ReLU; blocks 2-4 are max-pooling
(strides 2, 4, 4) followed by a two-conv residual block with a zero-padded
identity shortcut. A per-block 1x1 conv adapts each level to dim/4
channels at its native resolution; the levels are bilinearly upsampled to
full resolution and concatenated into the dim-channel descriptor feature,
which is L2-normalized per pixel. A narrow convolutional score branch
(1x1 to 16 channels, then n_head 3x3 layers down to one channel) produces
the sigmoid score map. Keeping the score branch narrow and the descriptor
path convolution-free at full resolution is what keeps the parameter and
FLOP budgets at the published levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgraph as tg
from .tensorgraph import Tensor

SCORE_BRANCH_WIDTH = 16

# (kernel, stride) of the encoder in execution order, grouped by block
_ENCODER_LAYERS = (
    ((3, 1), (3, 1)),
    ((2, 2), (3, 1), (3, 1)),
    ((4, 4), (3, 1), (3, 1)),
    ((4, 4), (3, 1), (3, 1)),
)


@dataclass(frozen=True)
class ModelConfig:
    """One network size preset: encoder widths, descriptor dim, head depth."""

    name: str
    c1: int
    c2: int
    c3: int
    c4: int
    dim: int
    n_head: int

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.c4) <= 0:
            raise ValueError("channel counts must be positive")
        if self.dim % 4 != 0:
            raise ValueError("descriptor dim must be divisible by 4")
        if self.n_head < 1:
            raise ValueError("n_head must be >= 1")

    @property
    def channels(self):
        return (self.c1, self.c2, self.c3, self.c4)


PRESETS = {
    "tiny": ModelConfig("tiny", 8, 16, 32, 64, 64, 1),
    "small": ModelConfig("small", 8, 16, 48, 96, 96, 1),
    "normal": ModelConfig("normal", 16, 32, 64, 128, 128, 1),
    "large": ModelConfig("large", 32, 64, 128, 128, 128, 2),
}


@dataclass
class ModelOutput:
    """score_map: (H, W) in (0,1); descriptor_map: (H, W, dim), unit rows."""

    score_map: Tensor
    descriptor_map: Tensor


def weight_shapes(config):
    """Ordered name -> (shape of weight array) map defining the network."""
    c1, c2, c3, c4 = config.channels
    dim, q = config.dim, config.dim // 4
    shapes = {
        "block1.conv1.w": (c1, 3, 3, 3), "block1.conv1.b": (c1,),
        "block1.conv2.w": (c1, c1, 3, 3), "block1.conv2.b": (c1,),
    }
    for i, (cin, cout) in enumerate([(c1, c2), (c2, c3), (c3, c4)], start=2):
        shapes[f"block{i}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"block{i}.conv1.b"] = (cout,)
        shapes[f"block{i}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"block{i}.conv2.b"] = (cout,)
    for i, c in enumerate((c1, c2, c3, c4), start=1):
        shapes[f"agg{i}.w"] = (q, c, 1, 1)
        shapes[f"agg{i}.b"] = (q,)
    sw = SCORE_BRANCH_WIDTH
    shapes["head.pre.w"] = (sw, dim, 1, 1)
    shapes["head.pre.b"] = (sw,)
    for i in range(1, config.n_head + 1):
        cout = 1 if i == config.n_head else sw
        shapes[f"head.conv{i}.w"] = (cout, sw, 3, 3)
        shapes[f"head.conv{i}.b"] = (cout,)
    return shapes


def init_weights(config, seed=0, dtype=np.float64):
    """He-uniform conv weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return weights


def _as_tensors(weights):
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in weights.items()}


def _conv(w, name, x, padding):
    return tg.conv2d(x, w[f"{name}.w"], w[f"{name}.b"], stride=1, padding=padding)


def _resblock(w, name, x, cout):
    cin = x.shape[1]
    h = tg.relu(_conv(w, f"{name}.conv1", x, 1))
    h = _conv(w, f"{name}.conv2", h, 1)
    if cin < cout:  # parameter-free shortcut: zero-pad the extra channels
        pad = Tensor(np.zeros((x.shape[0], cout - cin) + x.shape[2:], dtype=x.dtype))
        x = tg.concat([x, pad], axis=1)
    return tg.relu(h + x)


def forward(image, config, weights):
    """Run the network on image [1,3,H,W]; H and W must be divisible by 32."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected image of shape [1,3,H,W], got {x.shape}")
    h, wd = x.shape[2], x.shape[3]
    if h % 32 or wd % 32:
        raise ValueError(
            f"image size {h}x{wd} not divisible by 32; pad to "
            f"{-(-h // 32) * 32}x{-(-wd // 32) * 32}")
    w = _as_tensors(weights)

    x1 = tg.relu(_conv(w, "block1.conv1", x, 1))
    x1 = tg.relu(_conv(w, "block1.conv2", x1, 1))
    x2 = _resblock(w, "block2", tg.maxpool2d(x1, 2), config.c2)
    x3 = _resblock(w, "block3", tg.maxpool2d(x2, 4), config.c3)
    x4 = _resblock(w, "block4", tg.maxpool2d(x3, 4), config.c4)

    f1 = _conv(w, "agg1", x1, 0)
    f2 = tg.upsample_bilinear(_conv(w, "agg2", x2, 0), h, wd)
    f3 = tg.upsample_bilinear(_conv(w, "agg3", x3, 0), h, wd)
    f4 = tg.upsample_bilinear(_conv(w, "agg4", x4, 0), h, wd)
    feat = tg.concat([f1, f2, f3, f4], axis=1)  # (1, dim, H, W)

    desc = tg.l2_normalize(feat, axis=1)
    desc = desc.reshape(config.dim, h, wd).transpose(1, 2, 0)  # (H, W, dim)

    s = tg.relu(_conv(w, "head.pre", feat, 0))
    for i in range(1, config.n_head + 1):
        s = _conv(w, f"head.conv{i}", s, 1)
        if i < config.n_head:
            s = tg.relu(s)
    score = tg.sigmoid(s.reshape(h, wd))
    return ModelOutput(score_map=score, descriptor_map=desc)


def count_params(config):
    """Exact number of weight and bias scalars of the constructed network."""
    return sum(int(np.prod(s)) for s in weight_shapes(config).values())


def count_flops(config, height, width):
    """Analytic FLOP count of forward() at the given resolution.

    A multiply-accumulate counts as 2 FLOPs; pooling comparisons,
    upsampling arithmetic, normalizations, and activations are included.
    """
    c1, c2, c3, c4 = config.channels
    dim, q = config.dim, config.dim // 4
    sizes = [(height, width)]
    for pk in (2, 4, 4):
        sizes.append((sizes[-1][0] // pk, sizes[-1][1] // pk))
    hw = [h * w for h, w in sizes]

    def conv(cin, cout, k, px):
        return (2 * k * k * cin + 1) * cout * px

    f = conv(3, c1, 3, hw[0]) + conv(c1, c1, 3, hw[0]) + 2 * c1 * hw[0]  # block1+relu
    for lvl, (cin, cout, pk) in enumerate(
            [(c1, c2, 2), (c2, c3, 4), (c3, c4, 4)], start=1):
        f += (pk * pk - 1) * cin * hw[lvl]                 # maxpool comparisons
        f += conv(cin, cout, 3, hw[lvl]) + conv(cout, cout, 3, hw[lvl])
        f += 3 * cout * hw[lvl]                            # relu, residual add, relu
    for lvl, c in enumerate((c1, c2, c3, c4)):
        f += conv(c, q, 1, hw[lvl])                        # aggregation 1x1
    f += 3 * q * hw[0] * 8                                 # bilinear upsample, 3 maps
    f += (3 * dim + 10) * hw[0]                            # per-pixel L2 normalization
    sw = SCORE_BRANCH_WIDTH
    f += conv(dim, sw, 1, hw[0]) + sw * hw[0]
    for i in range(1, config.n_head + 1):
        cout = 1 if i == config.n_head else sw
        f += conv(sw, cout, 3, hw[0]) + cout * hw[0]
    f += 4 * hw[0]                                         # sigmoid
    return int(f)


def receptive_field(config, blocks=4):
    """Receptive field of the deepest encoder output via r += (k-1)*j, j *= s.

    Channel widths do not enter the recurrence; all presets yield 204.
    """
    if not 1 <= blocks <= 4:
        raise ValueError("blocks must be in 1..4")
    r, j = 1, 1
    for block in _ENCODER_LAYERS[:blocks]:
        for k, s in block:
            r += (k - 1) * j
            j *= s
    return r
