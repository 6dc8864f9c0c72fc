"""Invertible flow primitives: actnorm, coupling, soft permutation, squeeze, split.

Each layer exposes forward and inverse directions returning a `LayerResult`
with the transformed tensor and the exact log-Jacobian-determinant in nats.
Inputs are channels-last [..., H, W, C]; leading axes are treated as batch,
and `log_det` then carries one scalar per leading index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ShapeError

FORWARD = "forward"
INVERSE = "inverse"

# Trailing axes holding one frame (H, W, C); log-dets sum over these.
_FRAME_AXES = (-3, -2, -1)


@dataclass
class LayerResult:
    output: Node
    log_det: Node


@dataclass
class ActnormParams:
    log_scale: Parameter
    shift: Parameter
    initialized: bool = False


@dataclass
class CouplingParams:
    kind: str  # "additive" | "affine"
    k1: Parameter
    b1: Parameter
    k2: Parameter
    b2: Parameter
    k3: Parameter
    b3: Parameter


@dataclass
class PermuteParams:
    matrix: Parameter


def _gaussian_kernel(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


def make_actnorm(channels, name, dtype):
    return ActnormParams(
        log_scale=Parameter(np.zeros(channels, dtype=dtype), f"{name}.log_scale"),
        shift=Parameter(np.zeros(channels, dtype=dtype), f"{name}.shift"),
    )


def make_coupling(channels, width, kind, name, rng, dtype):
    if channels % 2 != 0:
        raise ShapeError(f"coupling needs an even channel count, got {channels}")
    half = channels // 2
    out_ch = channels if kind == "affine" else half
    return CouplingParams(
        kind=kind,
        k1=Parameter(_gaussian_kernel(rng, (3, 3, half, width), dtype), f"{name}.k1"),
        b1=Parameter(np.zeros(width, dtype=dtype), f"{name}.b1"),
        k2=Parameter(_gaussian_kernel(rng, (1, 1, width, width), dtype), f"{name}.k2"),
        b2=Parameter(np.zeros(width, dtype=dtype), f"{name}.b2"),
        k3=Parameter(np.zeros((3, 3, width, out_ch), dtype=dtype), f"{name}.k3"),
        b3=Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.b3"),
    )


def make_permute(channels, name, rng, dtype):
    q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
    return PermuteParams(matrix=Parameter(q.astype(dtype), f"{name}.matrix"))


def layer_params(obj):
    """All Parameters held by a layer-params dataclass."""
    return [v for v in vars(obj).values() if isinstance(v, Parameter)]


def actnorm(x, params, direction=FORWARD, training=False):
    """Per-channel scale and shift: y = (x + shift) * exp(log_scale)."""
    h, w = x.shape[-3], x.shape[-2]
    if not params.initialized:
        if direction == INVERSE:
            raise ShapeError("actnorm inverse before data-dependent initialization")
        if training:
            _init_actnorm(params, x.value)
    ls, sh = params.log_scale, params.shift
    n_pix = x.value.dtype.type(h * w)
    log_det = ad.scale_by_constant(ad.sum_(ls), n_pix)
    if direction == FORWARD:
        out = ad.mul(ad.add(x, sh), ad.exp(ls))
        return LayerResult(out, log_det)
    out = ad.sub(ad.mul(x, ad.exp(ad.negate(ls))), sh)
    return LayerResult(out, ad.negate(log_det))


def _init_actnorm(params, value):
    axes = tuple(range(value.ndim - 1))
    mean = value.mean(axis=axes)
    std = value.std(axis=axes)
    params.shift.value = (-mean).astype(params.shift.value.dtype)
    params.log_scale.value = (-np.log(std + 1e-6)).astype(params.log_scale.value.dtype)
    params.initialized = True


def _coupling_net(y1, params):
    h = ad.relu(ad.conv2d(y1, params.k1, params.b1))
    h = ad.relu(ad.conv2d(h, params.k2, params.b2))
    return ad.conv2d(h, params.k3, params.b3)


def coupling(y, params, direction=FORWARD):
    """Channel-split coupling; the first half passes through and conditions
    the transform of the second half. Zero-initialized nets give the exact
    identity with zero log-det."""
    y1, y2 = ad.split_channels(y)
    net_out = _coupling_net(y1, params)
    lead = y.value.shape[:-3]
    zero = Node(np.zeros(lead, dtype=y.value.dtype))

    if params.kind == "additive":
        g = net_out
        if direction == FORWARD:
            z2 = ad.add(y2, g)
        else:
            z2 = ad.sub(y2, g)
        return LayerResult(ad.concat_channels([y1, z2]), zero)

    s_raw, g = ad.split_channels(net_out)
    s = ad.clip(s_raw, -7.0, 7.0)
    log_det = ad.sum_(s, axes=_FRAME_AXES)
    if direction == FORWARD:
        z2 = ad.add(ad.mul(ad.exp(s), y2), g)
        return LayerResult(ad.concat_channels([y1, z2]), log_det)
    z2 = ad.mul(ad.sub(y2, g), ad.exp(ad.negate(s)))
    return LayerResult(ad.concat_channels([y1, z2]), ad.negate(log_det))


def soft_permute(y, params, direction=FORWARD):
    """Invertible 1x1 convolution: each pixel's channel vector is multiplied
    by a square matrix. log|det| comes from an LU factorization and the
    inverse direction uses the solved inverse matrix.

    The inverse direction does not backpropagate into the matrix; training
    only ever runs the forward direction.
    """
    h, w = y.shape[-3], y.shape[-2]
    n_pix = y.value.dtype.type(h * w)
    ld = ad.logabsdet(params.matrix)  # also rejects near-singular matrices
    log_det = ad.scale_by_constant(ld, n_pix)
    if direction == FORWARD:
        m_t = ad.transpose(params.matrix, (1, 0))
        out = ad.matmul_last(y, m_t)
        return LayerResult(out, log_det)
    inv = np.linalg.inv(params.matrix.value.astype(np.float64))
    inv = Node(inv.T.astype(y.value.dtype))
    out = ad.matmul_last(y, inv)
    return LayerResult(out, ad.negate(log_det))


def squeeze(x, direction=FORWARD):
    """Trade 2x2 spatial blocks for 4x channels (volume-preserving, log-det 0).

    Forward gathers each block in the fixed order top-left, top-right,
    bottom-left, bottom-right: output channel p*C + c holds block position p
    of input channel c.
    """
    if direction == FORWARD:
        lead = x.shape[:-3]
        h, w, c = x.shape[-3:]
        if h % 2 or w % 2:
            raise ShapeError(f"squeeze requires even spatial dims, got {h}x{w}")
        n = len(lead)
        out = ad.reshape(x, lead + (h // 2, 2, w // 2, 2, c))
        out = ad.transpose(out, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
        return ad.reshape(out, lead + (h // 2, w // 2, 4 * c))
    lead = x.shape[:-3]
    h, w, c = x.shape[-3:]
    if c % 4:
        raise ShapeError(f"unsqueeze requires channels divisible by 4, got {c}")
    n = len(lead)
    out = ad.reshape(x, lead + (h, w, 2, 2, c // 4))
    out = ad.transpose(out, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return ad.reshape(out, lead + (2 * h, 2 * w, c // 4))


def split_level(h):
    """Emit the second half of channels as this level's latent; the first
    half continues to the next level."""
    h_pass, z_level = ad.split_channels(h)
    return h_pass, z_level


def unsplit_level(h_pass, z_level):
    return ad.concat_channels([h_pass, z_level])
