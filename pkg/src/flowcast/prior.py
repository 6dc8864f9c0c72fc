"""Autoregressive latent dynamics: p(z) = prod_t prod_l p(z_t^l | z_<t^l, z_t^>l).

Each factor is a diagonal Gaussian whose (mu, log sigma) come from a per-level
3-D residual network over the stacked recent history. The network is built so
that a fresh model is the identity: mu = z_{t-1}, sigma = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ShapeError

LOG_SIGMA_CLAMP = 7.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    mu: Node
    log_sigma: Node  # already clamped to [-7, 7]


@dataclass
class BranchParams:
    dilation: int
    k_in: Parameter
    b_in: Parameter
    gate_a_k: Parameter
    gate_a_b: Parameter
    gate_b_k: Parameter | None  # None when the GATU is ablated
    gate_b_b: Parameter | None
    k_out: Parameter  # zero-initialized: block is the identity at init
    b_out: Parameter


@dataclass
class BlockParams:
    branches: list


@dataclass
class LevelNet:
    ctx_k: Parameter | None  # 1x1 projection of h^(>l); None at the top level
    ctx_b: Parameter | None
    in_k: Parameter  # 1x1x1 projection of the stacked history to width R
    in_b: Parameter
    blocks: list
    out_k: Parameter  # zero-initialized 1x1 conv emitting (dz, log sigma)
    out_b: Parameter


@dataclass
class PriorNet:
    levels: list  # one LevelNet per flow level, fine level first
    history_len: int
    channels: int  # residual width R
    blocks_per_level: int
    use_temporal_skip: bool = True
    use_gatu: bool = True
    use_dilations: bool = True

    def parameters(self):
        out = {}

        def put(p):
            if p is not None:
                out[p.name] = p

        for net in self.levels:
            put(net.ctx_k)
            put(net.ctx_b)
            put(net.in_k)
            put(net.in_b)
            put(net.out_k)
            put(net.out_b)
            for blk in net.blocks:
                for br in blk.branches:
                    for p in (br.k_in, br.b_in, br.gate_a_k, br.gate_a_b,
                              br.gate_b_k, br.gate_b_b, br.k_out, br.b_out):
                        put(p)
        return out


def _gauss(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


def build_prior_net(latent_shapes, history_len=3, channels=64, blocks=2,
                    use_temporal_skip=True, use_gatu=True, use_dilations=True,
                    rng=None, dtype=np.float32):
    """Build one residual network per latent level.

    `latent_shapes` comes from FlowModel.latent_shapes(); levels below the top
    additionally receive the projected pass-through tensor h^(>l), which has
    the same shape as z^(l).
    """
    rng = rng or np.random.default_rng(0)
    dtype = np.dtype(dtype).type
    r = channels
    dilations = (1, 2, 4) if use_dilations else (1,)
    levels = []
    n_levels = len(latent_shapes)
    for l, (hl, wl, cz) in enumerate(latent_shapes):
        name = f"prior.l{l}"
        top = l == n_levels - 1
        if top:
            ctx_k = ctx_b = None
            c_in = cz
        else:
            ctx_k = Parameter(_gauss(rng, (1, 1, cz, cz), dtype), f"{name}.ctx_k")
            ctx_b = Parameter(np.zeros(cz, dtype=dtype), f"{name}.ctx_b")
            c_in = 2 * cz
        blocks_list = []
        for b in range(blocks):
            branches = []
            for d in dilations:
                bn = f"{name}.b{b}.d{d}"
                if use_gatu:
                    gbk = Parameter(_gauss(rng, (1, 1, 1, r, r), dtype), f"{bn}.gate_b_k")
                    gbb = Parameter(np.zeros(r, dtype=dtype), f"{bn}.gate_b_b")
                else:
                    gbk = gbb = None
                branches.append(BranchParams(
                    dilation=d,
                    k_in=Parameter(_gauss(rng, (2, 3, 3, r, r), dtype), f"{bn}.k_in"),
                    b_in=Parameter(np.zeros(r, dtype=dtype), f"{bn}.b_in"),
                    gate_a_k=Parameter(_gauss(rng, (1, 1, 1, r, r), dtype), f"{bn}.gate_a_k"),
                    gate_a_b=Parameter(np.zeros(r, dtype=dtype), f"{bn}.gate_a_b"),
                    gate_b_k=gbk,
                    gate_b_b=gbb,
                    k_out=Parameter(np.zeros((2, 3, 3, r, r), dtype=dtype), f"{bn}.k_out"),
                    b_out=Parameter(np.zeros(r, dtype=dtype), f"{bn}.b_out"),
                ))
            blocks_list.append(BlockParams(branches=branches))
        levels.append(LevelNet(
            ctx_k=ctx_k, ctx_b=ctx_b,
            in_k=Parameter(_gauss(rng, (1, 1, 1, c_in, r), dtype), f"{name}.in_k"),
            in_b=Parameter(np.zeros(r, dtype=dtype), f"{name}.in_b"),
            blocks=blocks_list,
            out_k=Parameter(np.zeros((1, 1, r, 2 * cz), dtype=dtype), f"{name}.out_k"),
            out_b=Parameter(np.zeros(2 * cz, dtype=dtype), f"{name}.out_b"),
        ))
    return PriorNet(levels=levels, history_len=history_len, channels=channels,
                    blocks_per_level=blocks, use_temporal_skip=use_temporal_skip,
                    use_gatu=use_gatu, use_dilations=use_dilations)


def gatu(a, b):
    """Gated activation unit tanh(a) * sigmoid(b)."""
    if a.shape != b.shape:
        raise ShapeError(f"gatu operands differ: {a.shape} vs {b.shape}")
    return ad.mul(ad.tanh(a), ad.sigmoid(b))


def residual_block(h, block, net):
    """Three parallel dilated branches (or one, when dilations are ablated),
    each conv(2x3x3) -> ReLU -> gated 1x1x1 stage -> zero-init conv(2x3x3),
    summed onto the input."""
    out = h
    for br in block.branches:
        u = ad.relu(ad.conv3d(h, br.k_in, br.b_in, dilation=br.dilation))
        if net.use_gatu:
            v = gatu(ad.conv3d(u, br.gate_a_k, br.gate_a_b),
                     ad.conv3d(u, br.gate_b_k, br.gate_b_b))
        else:
            v = ad.relu(ad.conv3d(u, br.gate_a_k, br.gate_a_b))
        w = ad.conv3d(v, br.k_out, br.b_out, dilation=br.dilation)
        out = ad.add(out, w)
    return out


def prior_params(z_hist, h_above, net, level):
    """Conditional Gaussian parameters for z_t at one level.

    `z_hist` lists the most recent latents oldest first (length >= 1);
    `h_above` is the pass-through tensor of the target frame (None at the
    top level). All tensors may carry leading batch axes.
    """
    if not z_hist:
        raise ShapeError("prior history must contain at least one frame")
    z_hist = [z if isinstance(z, Node) else Node(z) for z in z_hist]
    lnet = net.levels[level]
    cz = z_hist[-1].shape[-1]

    if lnet.ctx_k is not None:
        if h_above is None:
            raise ShapeError(f"level {level} requires the pass-through tensor")
        if not isinstance(h_above, Node):
            h_above = Node(h_above)
        if h_above.shape[-3:] != z_hist[-1].shape[-3:]:
            raise ShapeError(f"pass-through shape {h_above.shape[-3:]} != latent "
                             f"shape {z_hist[-1].shape[-3:]}")
        ctx = ad.conv2d(h_above, lnet.ctx_k, lnet.ctx_b)
        frames = [ad.concat_channels([ctx, z]) for z in z_hist]
    else:
        frames = z_hist

    x = ad.stack(frames, axis=-4)
    x = ad.conv3d(x, lnet.in_k, lnet.in_b)
    for blk in lnet.blocks:
        x = residual_block(x, blk, net)
    n = len(z_hist)
    last = ad.slice_time(x, n - 1, n, axis=-4)
    last = ad.reshape(last, last.shape[:-4] + last.shape[-3:])
    out = ad.conv2d(last, lnet.out_k, lnet.out_b)
    dz = ad.slice_axis(out, -1, 0, cz)
    log_sigma = ad.clip(ad.slice_axis(out, -1, cz, 2 * cz),
                        -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    mu = ad.add(z_hist[-1], dz) if net.use_temporal_skip else dz
    return GaussianParams(mu=mu, log_sigma=log_sigma)


def gaussian_logprob(z, params):
    """Sum over one frame's elements of log N(z; mu, sigma), in nats.

    Returns a Node whose shape is the leading (batch) axes.
    """
    if not isinstance(z, Node):
        z = Node(z)
    if z.shape != params.mu.shape:
        raise ShapeError(f"latent shape {z.shape} != mu shape {params.mu.shape}")
    diff = ad.sub(z, params.mu)
    inv_var = ad.exp(ad.scale_by_constant(params.log_sigma, -2.0))
    quad = ad.scale_by_constant(ad.mul(ad.square(diff), inv_var), 0.5)
    per_elem = ad.add(params.log_sigma, quad)
    total = ad.sum_(per_elem, axes=(-3, -2, -1))
    d = int(np.prod(z.shape[-3:]))
    const = z.value.dtype.type(0.5 * LOG_2PI * d)
    return ad.negate(ad.add(total, Node(np.asarray(const))))


def video_prior_logprob(latents, net, context_len):
    """Log-probability of target-frame latents given their history, summed
    over frames t in (context_len, T] and all levels. Teacher-forced: the
    history and the same-frame higher levels come from ground truth.

    `latents` is a list of per-frame LatentStack. Returns a Node with the
    leading batch shape.
    """
    t_total = len(latents)
    if t_total <= context_len or context_len < 1:
        raise ShapeError(f"need T > context_len >= 1, got T={t_total}, "
                         f"context_len={context_len}")
    n_levels = len(net.levels)
    total = None
    for t in range(context_len, t_total):
        lo = max(0, t - net.history_len)
        for l in reversed(range(n_levels)):
            hist = [latents[k].z[l] for k in range(lo, t)]
            h_above = latents[t].h[l] if l < n_levels - 1 else None
            gp = prior_params(hist, h_above, net, l)
            lp = gaussian_logprob(latents[t].z[l], gp)
            total = lp if total is None else ad.add(total, lp)
    return total
