"""Dequantization, the exact conditional log-likelihood objective,
bits-per-pixel accounting, Adam, and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import prior as pr
from .autodiff import Node
from .errors import DivergenceError, ShapeError

LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    batch_size: int = 8
    total_steps: int = 15000
    learning_rate: float = 1e-3
    warmup_steps: int = 500
    decay_steps: int = 5000
    context_len: int = 1
    patch_len: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 100.0
    seed: int = 0
    precision: str = "float32"
    # model geometry
    levels: int = 2
    steps_per_level: int = 4
    coupling_width: int = 32
    coupling: str = "affine"
    frame_height: int = 16
    frame_width: int = 16
    frame_channels: int = 3
    # prior
    prior_blocks: int = 2
    prior_channels: int = 64
    history_len: int = 3
    # ablation toggles
    temporal_skip: bool = True
    gatu: bool = True
    dilations: bool = True
    # bookkeeping
    metrics_every: int = 10
    checkpoint_every: int = 2000

    def __post_init__(self):
        if not (self.patch_len > self.context_len >= 1):
            raise ValueError("need patch_len > context_len >= 1")
        if self.warmup_steps + self.decay_steps > self.total_steps:
            raise ValueError("warmup + decay must not exceed total steps")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def frame_shape(self):
        return (self.frame_height, self.frame_width, self.frame_channels)


# Config-file keys for the ablation toggles carry an "ablation." prefix.
_KEY_ALIASES = {
    "temporal_skip": "ablation.temporal_skip",
    "gatu": "ablation.gatu",
    "dilations": "ablation.dilations",
}
_ALIAS_TO_FIELD = {v: k for k, v in _KEY_ALIASES.items()}


def config_to_text(cfg):
    lines = []
    for f in fields(cfg):
        key = _KEY_ALIASES.get(f.name, f.name)
        lines.append(f"{key} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    by_name = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        name = _ALIAS_TO_FIELD.get(key, key)
        if name not in by_name:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        ftype = by_name[name].type
        if ftype in ("bool", bool):
            if val.lower() not in ("true", "false"):
                raise ValueError(f"config line {lineno}: expected true/false, got {val!r}")
            values[name] = val.lower() == "true"
        elif ftype in ("int", int):
            values[name] = int(val)
        elif ftype in ("float", float):
            values[name] = float(val)
        else:
            values[name] = val
    return TrainConfig(**values)


def build_models(cfg, seed=None):
    """Construct a fresh flow model and prior net from a TrainConfig."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    model = enc.build_flow_model(cfg.levels, cfg.steps_per_level, cfg.coupling_width,
                                 cfg.frame_shape, cfg.coupling, rng, cfg.dtype)
    net = pr.build_prior_net(model.latent_shapes(), history_len=cfg.history_len,
                             channels=cfg.prior_channels, blocks=cfg.prior_blocks,
                             use_temporal_skip=cfg.temporal_skip, use_gatu=cfg.gatu,
                             use_dilations=cfg.dilations, rng=rng, dtype=cfg.dtype)
    return model, net


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def dequantize(frames_u8, rng, dtype=np.float32):
    """(k + u) / 256 with u ~ Uniform(0,1) per element; result in [0, 1)."""
    frames_u8 = np.asarray(frames_u8)
    u = rng.random(size=frames_u8.shape)
    return ((frames_u8.astype(np.float64) + u) / 256.0).astype(dtype)


def nll_from_dequantized(x, model, net, context_len, training=False):
    """Negative log-likelihood (nats) of the target frames of dequantized
    videos [..., T, H, W, C] given the context frames. Returns a Node with
    the leading batch shape; only target frames contribute flow log-dets."""
    stacks = enc.encode_video(x, model, training=training)
    t_total = len(stacks)
    if t_total <= context_len:
        raise ShapeError(f"need more than {context_len} frames, got {t_total}")
    log_det = None
    for t in range(context_len, t_total):
        log_det = stacks[t].log_det if log_det is None else ad.add(log_det, stacks[t].log_det)
    logp = pr.video_prior_logprob(stacks, net, context_len)
    return ad.negate(ad.add(log_det, logp))


def nll_nats(video_u8, model, net, context_len, rng, dtype=np.float32, training=False):
    x = dequantize(video_u8, rng, dtype)
    return nll_from_dequantized(x, model, net, context_len, training=training)


def bits_per_pixel(nll_nats_value, n_target_frames, h, w, c):
    """Discrete-data rate implied by the continuous density under 1/256 bins."""
    d = n_target_frames * h * w * c
    return float(nll_nats_value) / (LN2 * d) + 8.0


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam step, in place on the parameter values."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if not p.trainable:
            continue
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = (p.value.astype(np.float64) - step).astype(p.value.dtype)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def learning_rate_at(step, cfg):
    """Linear warmup to the base rate, constant middle, linear decay to zero
    over the final `decay_steps`."""
    lr = cfg.learning_rate
    if cfg.warmup_steps > 0:
        lr *= min(1.0, step / cfg.warmup_steps)
    if cfg.decay_steps > 0:
        remaining = cfg.total_steps - 1 - step
        lr *= max(0.0, min(1.0, remaining / cfg.decay_steps))
    return lr


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def sample_patches(videos, batch_size, patch_len, rng):
    """Random temporal patches: returns uint8 [B, patch_len, H, W, C]."""
    n, t = videos.shape[0], videos.shape[1]
    if t < patch_len:
        raise ShapeError(f"videos of length {t} shorter than patch_len {patch_len}")
    idx = rng.integers(0, n, size=batch_size)
    starts = rng.integers(0, t - patch_len + 1, size=batch_size)
    return np.stack([videos[i, s:s + patch_len] for i, s in zip(idx, starts)])


def train(dataset, cfg, out_dir=None, model=None, net=None, opt=None,
          on_metrics=None):
    """Train on random temporal patches of `dataset` (uint8 [N,T,H,W,C]).

    Returns (model, net, opt, metrics) where metrics is the list of logged
    rows (step, loss_nats, bpp, lr, seconds). When `out_dir` is given, an
    append-only metrics.csv and periodic checkpoints are written there; on
    divergence the last good checkpoint is retained and DivergenceError is
    raised.
    """
    from . import storage

    videos = dataset.videos if hasattr(dataset, "videos") else np.asarray(dataset)
    if model is None or net is None:
        model, net = build_models(cfg)
    if opt is None:
        opt = OptimizerState()
    params = dict(model.parameters())
    params.update(net.parameters())

    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        new_file = not metrics_path.exists()
        metrics_file = open(metrics_path, "a")
        if new_file:
            metrics_file.write("step,loss_nats,bpp,lr,seconds\n")

    n_target = cfg.patch_len - cfg.context_len
    h, w, c = cfg.frame_shape
    metrics = []
    t0 = time.monotonic()
    try:
        for step in range(opt.step, cfg.total_steps):
            batch = sample_patches(videos, cfg.batch_size, cfg.patch_len, rng)
            x = dequantize(batch, rng, cfg.dtype)
            try:
                nll = nll_from_dequantized(x, model, net, cfg.context_len, training=True)
                loss = ad.mean(nll)
                grads = ad.backward(loss)
            except DivergenceError as e:
                raise DivergenceError(f"training diverged at step {step}: {e}",
                                      step=step) from e
            grads, _ = clip_grad_norm(grads, cfg.grad_clip)
            lr = learning_rate_at(step, cfg)
            adam_update(params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

            if step % cfg.metrics_every == 0 or step == cfg.total_steps - 1:
                loss_mean = float(loss.value)
                bpp = bits_per_pixel(loss_mean, n_target, h, w, c)
                row = (step, loss_mean, bpp, lr, time.monotonic() - t0)
                metrics.append(row)
                if metrics_file is not None:
                    metrics_file.write(f"{row[0]},{row[1]:.6f},{row[2]:.6f},"
                                       f"{row[3]:.8f},{row[4]:.3f}\n")
                    metrics_file.flush()
                if on_metrics is not None:
                    on_metrics(row)
            if out_dir is not None and cfg.checkpoint_every > 0 and (
                    (step + 1) % cfg.checkpoint_every == 0 or step == cfg.total_steps - 1):
                storage.save_checkpoint(out_dir / "checkpoint.vfck", model, net, opt, cfg)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return model, net, opt, metrics


def evaluate_bpp(videos_u8, model, net, context_len, n_targets, seed=0,
                 batch_size=16):
    """Mean held-out bits-per-pixel with teacher forcing and fixed
    dequantization noise. Returns (mean_bpp, per_video_bpp)."""
    videos_u8 = np.asarray(videos_u8)
    t_needed = context_len + n_targets
    if videos_u8.shape[1] < t_needed:
        raise ShapeError(f"videos have {videos_u8.shape[1]} frames, need {t_needed}")
    clip_videos = videos_u8[:, :t_needed]
    h, w, c = clip_videos.shape[2:]
    rng = np.random.default_rng(seed)
    noise = rng.random(size=clip_videos.shape)
    dtype = next(iter(model.parameters().values())).value.dtype
    x_all = ((clip_videos.astype(np.float64) + noise) / 256.0).astype(dtype)
    per_video = []
    for i in range(0, len(x_all), batch_size):
        x = x_all[i:i + batch_size]
        nll = nll_from_dequantized(x, model, net, context_len)
        for v in np.atleast_1d(nll.value):
            per_video.append(bits_per_pixel(v, n_targets, h, w, c))
    return float(np.mean(per_video)), per_video
