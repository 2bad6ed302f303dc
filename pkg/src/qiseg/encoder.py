"""Dual-scale convolutional feature extractor.

Four 3x3 blocks: two stride-2 blocks reach 1/4 resolution (fine tap), a third
stride-2 block reaches 1/8, and a final stride-1 block with dilation 2 gives
the coarse tap. Each tap is projected to ``depth`` channels by a 1x1 conv so
both paths share one prototype dimensionality.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor_core import autograd as ag

# (name, stride, dilation, padding)
BLOCKS = (
    ("block1", 2, 1, 1),
    ("block2", 2, 1, 1),
    ("block3", 2, 1, 1),
    ("block4", 1, 2, 2),
)
FINE_TAP = "block2"


@dataclass
class EncoderParams:
    """Named kernels/biases in forward order; values are ``Var`` leaves."""

    tensors: dict
    depth: int

    def names(self):
        return list(self.tensors)

    def arrays(self):
        return {k: v.value for k, v in self.tensors.items()}

    def leaves(self):
        return list(self.tensors.values())


@dataclass
class DualFeatures:
    fine: ag.Var
    coarse: ag.Var


def init_encoder(seed: int, depth: int = 32, widths=(16, 32, 32), dtype=np.float64) -> EncoderParams:
    """Uniform ``[-s, s]`` init with ``s = sqrt(1 / fan_in)``."""
    rng = np.random.default_rng(seed)
    chans = (1,) + tuple(widths) + (widths[-1],)
    tensors = {}

    def uniform(shape, fan_in, name):
        s = np.sqrt(1.0 / fan_in)
        tensors[name] = ag.param(rng.uniform(-s, s, size=shape).astype(dtype), name=name)

    for idx, (name, *_rest) in enumerate(BLOCKS):
        cin, cout = chans[idx], chans[idx + 1]
        uniform((3, 3, cin, cout), 9 * cin, f"{name}.kernel")
        uniform((cout,), 9 * cin, f"{name}.bias")
    for tap, cin in (("fine", widths[1]), ("coarse", widths[-1])):
        uniform((1, 1, cin, depth), cin, f"proj_{tap}.kernel")
        uniform((depth,), cin, f"proj_{tap}.bias")
    return EncoderParams(tensors, depth)


def check_extents(h: int, w: int) -> None:
    if h % 8 or w % 8:
        bad = "height" if h % 8 else "width"
        raise ShapeError(f"image {bad} must be divisible by 8, got {h}x{w}")


def extract_features(image, params: EncoderParams) -> DualFeatures:
    """Encode ``(H, W)``, ``(H, W, 1)`` or a batch ``(N, H, W, 1)``."""
    x = image.value if isinstance(image, ag.Var) else np.asarray(image, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    check_extents(x.shape[-3], x.shape[-2])
    t = params.tensors
    h = ag.as_var(x)
    taps = {}
    for name, stride, dilation, padding in BLOCKS:
        h = ag.relu(ag.conv2d(h, t[f"{name}.kernel"], t[f"{name}.bias"], stride, dilation, padding))
        taps[name] = h
    fine = ag.conv2d(taps[FINE_TAP], t["proj_fine.kernel"], t["proj_fine.bias"])
    coarse = ag.conv2d(taps["block4"], t["proj_coarse.kernel"], t["proj_coarse.bias"])
    return DualFeatures(fine, coarse)


def split_batch(feats: DualFeatures, i: int) -> DualFeatures:
    return DualFeatures(ag.index(feats.fine, i), ag.index(feats.coarse, i))
