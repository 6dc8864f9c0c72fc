"""Temperature-controlled sampling, rollout, latent interpolation, and
out-of-sequence scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import prior as pr
from . import training as tr
from .autodiff import Node
from .errors import ShapeError


@dataclass
class SampleConfig:
    temperature: float = 1.0  # T=0 is deterministic z = mu
    rollout_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class OosReport:
    offsets: list  # strictly increasing frame offsets
    mean_bpp: list  # mean bpp of frame (context_len + offset) scored as next
    spearman: float

    def to_csv(self):
        lines = ["offset,mean_bpp"]
        lines += [f"{o},{b:.6f}" for o, b in zip(self.offsets, self.mean_bpp)]
        return "\n".join(lines) + "\n"


def sample_next_frame(history_latents, model, net, cfg, rng):
    """Draw the next frame given the latent history.

    Levels are drawn coarse-to-fine: each level's Gaussian is conditioned on
    the same-level history and on the pass-through tensor reconstructed from
    the already-drawn higher levels. Returns (frame, LatentStack).
    """
    if not history_latents:
        raise ShapeError("history must contain at least one frame")
    n_levels = model.levels
    temp = cfg.temperature
    drawn = [None] * n_levels
    for l in reversed(range(n_levels)):
        hist = [s.z[l] for s in history_latents[-net.history_len:]]
        if l < n_levels - 1:
            h_above = enc.pass_through_above(
                [None] * (l + 1) + drawn[l + 1:], model, l)
        else:
            h_above = None
        gp = pr.prior_params(hist, h_above, net, l)
        mu, sigma = gp.mu.value, np.exp(gp.log_sigma.value)
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        drawn[l] = Node(mu + temp * sigma * eps)
    frame = enc.decode_frame(drawn, model)
    log_det = Node(np.zeros(frame.shape[:-3], dtype=frame.value.dtype))
    stack = enc.LatentStack(z=drawn, log_det=log_det)
    return frame, stack


def quantize_frames(x):
    """floor(x*256) clamped to [0,255]; inverse of the dequantization bins."""
    arr = x.value if isinstance(x, Node) else np.asarray(x)
    return np.clip(np.floor(arr * 256.0), 0, 255).astype(np.uint8)


def rollout(context_frames_u8, model, net, cfg, rng=None):
    """Encode the context (fixed-seed dequantization), then iteratively sample
    frames, sliding the history window. Returns a uint8 video of the context
    followed by `cfg.rollout_len` generated frames."""
    context = np.asarray(context_frames_u8)
    if context.ndim != 4 or context.shape[0] < 1:
        raise ShapeError(f"context must be [T,H,W,C] with T >= 1, got {context.shape}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dtype = next(iter(model.parameters().values())).value.dtype
    x = tr.dequantize(context, np.random.default_rng(cfg.seed ^ 0x5EED), dtype)
    history = enc.encode_video(x, model)
    history = [enc.LatentStack(z=[Node(z.value) for z in s.z], log_det=s.log_det)
               for s in history]
    frames = [quantize_frames(Node(xi)) for xi in x]
    for _ in range(cfg.rollout_len):
        frame, stack = sample_next_frame(history, model, net, cfg, rng)
        frames.append(quantize_frames(frame))
        history.append(stack)
        history = history[-net.history_len:]
    return np.stack(frames)


def interpolate(frame_a_u8, frame_b_u8, steps, level_mask, model, seed=0):
    """Decode evenly spaced blends of the two frames' latents.

    Levels in `level_mask` (0-based) interpolate linearly; all other levels
    stay at frame A's latents.
    """
    if steps < 2:
        raise ShapeError("interpolation needs at least 2 steps")
    a = np.asarray(frame_a_u8)
    b = np.asarray(frame_b_u8)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    dtype = next(iter(model.parameters().values())).value.dtype
    rng = np.random.default_rng(seed)
    xa = tr.dequantize(a, rng, dtype)
    xb = tr.dequantize(b, rng, dtype)
    za = enc.encode_frame(xa, model)
    zb = enc.encode_frame(xb, model)
    out = []
    for i in range(steps):
        alpha = i / (steps - 1)
        zs = []
        for l in range(model.levels):
            if l in level_mask:
                zs.append(Node((1 - alpha) * za.z[l].value + alpha * zb.z[l].value))
            else:
                zs.append(Node(za.z[l].value))
        out.append(quantize_frames(enc.decode_frame(zs, model)))
    return out


def _spearman(xs, ys):
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        # average tied ranks
        for val in np.unique(v):
            m = v == val
            if m.sum() > 1:
                r[m] = r[m].mean()
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx ** 2).sum() * (ry ** 2).sum()))
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def oos_scores(test_videos_u8, model, net, context_len=3, max_offset=10, seed=0):
    """Score each offset-t frame as if it were the next frame after the
    context, per the out-of-sequence protocol. Returns an OosReport with the
    per-offset mean bpp (averaged across videos) and the Spearman rank
    correlation between offset and mean bpp."""
    videos = np.asarray(test_videos_u8)
    t_needed = context_len + max_offset
    if videos.shape[1] < t_needed:
        raise ShapeError(f"videos have {videos.shape[1]} frames, "
                         f"need {t_needed} for max_offset {max_offset}")
    n, _, h, w, c = videos.shape
    d = h * w * c
    dtype = next(iter(model.parameters().values())).value.dtype
    rng = np.random.default_rng(seed)
    x = ((videos[:, :t_needed].astype(np.float64)
          + rng.random(size=videos[:, :t_needed].shape)) / 256.0).astype(dtype)
    stacks = enc.encode_video(x, model)

    # The conditional distribution for the slot right after the context is
    # fixed; each candidate frame supplies its own latents and pass-through
    # conditioning for the lower levels.
    lo = max(0, context_len - net.history_len)
    bpp = np.zeros((max_offset, n))
    for off in range(1, max_offset + 1):
        t = context_len + off - 1  # 0-based index of the candidate frame
        logp = None
        for l in reversed(range(model.levels)):
            hist = [stacks[k].z[l] for k in range(lo, context_len)]
            h_above = stacks[t].h[l] if l < model.levels - 1 else None
            gp = pr.prior_params(hist, h_above, net, l)
            lp = pr.gaussian_logprob(stacks[t].z[l], gp)
            logp = lp if logp is None else ad.add(logp, lp)
        nll = -(stacks[t].log_det.value + logp.value)
        bpp[off - 1] = nll / (tr.LN2 * d) + 8.0
    mean_bpp = bpp.mean(axis=1)
    offsets = list(range(1, max_offset + 1))
    rho = _spearman(offsets, mean_bpp)
    return OosReport(offsets=offsets, mean_bpp=[float(b) for b in mean_bpp],
                     spearman=rho)
