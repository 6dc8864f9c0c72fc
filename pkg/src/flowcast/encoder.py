"""Multi-scale invertible encoder mapping frames to per-level latent stacks.

Per level: squeeze -> N x (actnorm -> soft permute -> coupling) -> split,
with no split at the top level. Frames are encoded independently; any
leading axes of the input act as batch, and per-frame log-dets keep that
leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow_layers as fl
from .autodiff import Node
from .errors import ShapeError


@dataclass
class FlowStep:
    actnorm: fl.ActnormParams
    permute: fl.PermuteParams
    coupling: fl.CouplingParams


@dataclass
class FlowModel:
    levels: int
    steps_per_level: int
    coupling_width: int
    coupling_kind: str
    frame_shape: tuple  # (H, W, C)
    steps: list  # steps[level][n] -> FlowStep

    @property
    def initialized(self):
        return all(s.actnorm.initialized for lvl in self.steps for s in lvl)

    def mark_initialized(self):
        for lvl in self.steps:
            for s in lvl:
                s.actnorm.initialized = True

    def parameters(self):
        out = {}
        for lvl in self.steps:
            for s in lvl:
                for part in (s.actnorm, s.permute, s.coupling):
                    for p in fl.layer_params(part):
                        out[p.name] = p
        return out

    def level_channels(self, level):
        """Channel count of the tensor entering level `level`'s flow steps."""
        h, w, c = self.frame_shape
        ch = c
        for l in range(level + 1):
            ch *= 4
            if l < level:
                ch //= 2
        return ch

    def latent_shapes(self):
        """Shape of z at each level (length `levels`)."""
        h, w, c = self.frame_shape
        shapes = []
        for l in range(self.levels):
            ch = self.level_channels(l)
            hl, wl = h // 2 ** (l + 1), w // 2 ** (l + 1)
            if l < self.levels - 1:
                shapes.append((hl, wl, ch // 2))
            else:
                shapes.append((hl, wl, ch))
        return shapes


@dataclass
class LatentStack:
    z: list  # L Nodes, coarse levels last
    log_det: Node
    h: list = field(default_factory=list)  # pass-through tensors, one per split


def build_flow_model(levels, steps_per_level, coupling_width, frame_shape,
                     coupling_kind="affine", rng=None, dtype=np.float32):
    h, w, c = frame_shape
    if h % 2 ** levels or w % 2 ** levels:
        raise ShapeError(f"frame dims {h}x{w} not divisible by 2^{levels}")
    rng = rng or np.random.default_rng(0)
    dtype = np.dtype(dtype).type
    model = FlowModel(levels, steps_per_level, coupling_width, coupling_kind,
                      tuple(frame_shape), steps=[])
    for l in range(levels):
        ch = None
        level_steps = []
        for n in range(steps_per_level):
            ch = model.level_channels(l)
            name = f"flow.l{l}.s{n}"
            level_steps.append(FlowStep(
                actnorm=fl.make_actnorm(ch, f"{name}.actnorm", dtype),
                permute=fl.make_permute(ch, f"{name}.permute", rng, dtype),
                coupling=fl.make_coupling(ch, coupling_width, coupling_kind,
                                          f"{name}.coupling", rng, dtype),
            ))
        model.steps.append(level_steps)
    return model


def _run_steps(h, level_steps, direction, training):
    log_dets = []
    if direction == fl.FORWARD:
        for step in level_steps:
            r = fl.actnorm(h, step.actnorm, fl.FORWARD, training=training)
            h, ld1 = r.output, r.log_det
            r = fl.soft_permute(h, step.permute, fl.FORWARD)
            h, ld2 = r.output, r.log_det
            r = fl.coupling(h, step.coupling, fl.FORWARD)
            h, ld3 = r.output, r.log_det
            log_dets += [ld1, ld2, ld3]
    else:
        for step in reversed(level_steps):
            r = fl.coupling(h, step.coupling, fl.INVERSE)
            h, ld1 = r.output, r.log_det
            r = fl.soft_permute(h, step.permute, fl.INVERSE)
            h, ld2 = r.output, r.log_det
            r = fl.actnorm(h, step.actnorm, fl.INVERSE)
            h, ld3 = r.output, r.log_det
            log_dets += [ld1, ld2, ld3]
    return h, log_dets


def encode_frame(x, model, training=False):
    """Map frames [..., H, W, C] to a LatentStack; leading axes are batch."""
    if not isinstance(x, Node):
        x = Node(x)
    if tuple(x.shape[-3:]) != tuple(model.frame_shape):
        raise ShapeError(f"frame shape {x.shape[-3:]} != model {model.frame_shape}")
    h = x
    zs, hs, log_dets = [], [], []
    for l in range(model.levels):
        h = fl.squeeze(h, fl.FORWARD)
        h, lds = _run_steps(h, model.steps[l], fl.FORWARD, training)
        log_dets += lds
        if l < model.levels - 1:
            h, z = fl.split_level(h)
            zs.append(z)
            hs.append(h)
        else:
            zs.append(h)
    total = log_dets[0]
    for ld in log_dets[1:]:
        total = ad.add(total, ld)
    lead = x.shape[:-3]
    if total.shape != lead:
        total = ad.add(total, Node(np.zeros(lead, dtype=x.value.dtype)))
    return LatentStack(z=zs, log_det=total, h=hs)


def decode_frame(zs, model):
    """Exact inverse of encode_frame. `zs` is a LatentStack or list of z
    tensors (numpy arrays or Nodes), coarse level last."""
    z_list = zs.z if isinstance(zs, LatentStack) else list(zs)
    if len(z_list) != model.levels:
        raise ShapeError(f"expected {model.levels} latent levels, got {len(z_list)}")
    z_list = [z if isinstance(z, Node) else Node(z) for z in z_list]
    for z, shape in zip(z_list, model.latent_shapes()):
        if tuple(z.shape[-3:]) != tuple(shape):
            raise ShapeError(f"latent shape {z.shape[-3:]} != expected {shape}")
    h = None
    for l in reversed(range(model.levels)):
        cur = z_list[l] if h is None else fl.unsplit_level(h, z_list[l])
        cur, _ = _run_steps(cur, model.steps[l], fl.INVERSE, training=False)
        h = fl.squeeze(cur, fl.INVERSE)
    return h


def pass_through_above(z_list, model, level):
    """Reconstruct h^(>level), the pass-through tensor emitted by the split at
    `level`, from the latents of levels above it. Used when sampling, where
    higher levels are drawn before lower ones."""
    if level >= model.levels - 1:
        raise ShapeError("top level has no pass-through tensor")
    h = None
    for l in reversed(range(level + 1, model.levels)):
        z = z_list[l] if isinstance(z_list[l], Node) else Node(z_list[l])
        cur = z if h is None else fl.unsplit_level(h, z)
        cur, _ = _run_steps(cur, model.steps[l], fl.INVERSE, training=False)
        h = fl.squeeze(cur, fl.INVERSE)
    return h


def encode_video(frames, model, training=False):
    """Encode [..., T, H, W, C] frames independently; returns one LatentStack
    per frame, each keeping the remaining leading axes."""
    if not isinstance(frames, Node):
        frames = Node(frames)
    if len(frames.shape) < 4:
        raise ShapeError(f"encode_video expects [..., T, H, W, C], got {frames.shape}")
    stack = encode_frame(frames, model, training=training)
    t = frames.shape[-4]
    out = []
    for ti in range(t):
        z_t = [_take_time(z, ti) for z in stack.z]
        h_t = [_take_time(h, ti) for h in stack.h]
        ld_t = _take_lead_time(stack.log_det, ti)
        out.append(LatentStack(z=z_t, log_det=ld_t, h=h_t))
    return out


def _take_time(node, ti):
    sl = ad.slice_axis(node, -4, ti, ti + 1)
    return ad.reshape(sl, node.shape[:-4] + node.shape[-3:])


def _take_lead_time(node, ti):
    sl = ad.slice_axis(node, -1, ti, ti + 1)
    return ad.reshape(sl, node.shape[:-1])
