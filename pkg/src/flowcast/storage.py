"""Binary containers: `.vfd` video datasets, `.vfck` checkpoints, PPM frames.

Dataset container: magic ``VFD1``, five little-endian u32 dims (N,T,H,W,C),
then the raw uint8 payload. Checkpoint container: magic ``VFCK``, u32 format
version, a length-prefixed UTF-8 ``key = value`` config block, then a
count-prefixed sequence of named tensors (u32 name length, name bytes, u32
rank, rank u64 dims, float64 little-endian data). Tensors are stored as
float64; float32 values round-trip bit-exactly through the widening.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .datasets import VideoDataset
from .errors import FormatError

DATASET_MAGIC = b"VFD1"
CHECKPOINT_MAGIC = b"VFCK"
CHECKPOINT_VERSION = 1

_MAX_DIM = 2**31  # guards against overflowing payload-size arithmetic


def write_dataset(path, dataset):
    videos = dataset.videos if isinstance(dataset, VideoDataset) else np.asarray(dataset)
    if videos.dtype != np.uint8 or videos.ndim != 5:
        raise FormatError(f"dataset must be uint8 [N,T,H,W,C], got "
                          f"{videos.dtype} {videos.shape}")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<5I", *videos.shape))
        f.write(np.ascontiguousarray(videos).tobytes())


def read_dataset(path):
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise FormatError(f"file too short for a dataset header ({len(data)} bytes)")
    if data[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DATASET_MAGIC!r}")
    dims = struct.unpack("<5I", data[4:24])
    if any(d == 0 or d > _MAX_DIM for d in dims):
        raise FormatError(f"invalid dimensions {dims}")
    expected = 24 + int(np.prod([int(d) for d in dims]))
    if len(data) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, "
                          f"got {len(data)}")
    videos = np.frombuffer(data[24:], dtype=np.uint8).reshape(dims).copy()
    return VideoDataset(videos, metadata={"dims": dims, "path": str(path)})


def dataset_store(path, dataset=None, direction="read"):
    if direction == "write":
        write_dataset(path, dataset)
        return None
    if direction == "read":
        return read_dataset(path)
    raise ValueError(f"direction must be read or write, got {direction!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_tensor(f, name, arr):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    arr = np.asarray(arr, dtype=np.float64)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(arr.astype("<f8").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at "
                              f"offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def write_checkpoint_raw(path, config_text, tensors):
    """Write config text plus named float tensors (sorted by name)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        cb = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cb)))
        f.write(cb)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name])


def read_checkpoint_raw(path):
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, "
                          f"expected {CHECKPOINT_VERSION}")
    try:
        config_text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"config block is not valid UTF-8: {e}") from None
    tensors = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not valid UTF-8: {e}") from None
        rank = r.u32()
        if rank > 16:
            raise FormatError(f"implausible tensor rank {rank} for {name!r}")
        dims = tuple(r.u64() for _ in range(rank))
        if any(d > _MAX_DIM for d in dims):
            raise FormatError(f"invalid dims {dims} for {name!r}")
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(size * 8), dtype="<f8").reshape(dims).copy()
        tensors[name] = arr
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after checkpoint payload")
    return config_text, tensors


def save_checkpoint(path, model, net, opt, cfg):
    from .training import config_to_text

    tensors = {}
    for name, p in {**model.parameters(), **net.parameters()}.items():
        tensors[name] = p.value
    for name, m in opt.m.items():
        tensors[f"adam.m.{name}"] = m
    for name, v in opt.v.items():
        tensors[f"adam.v.{name}"] = v
    tensors["adam.step"] = np.asarray(float(opt.step))
    config_text = config_to_text(cfg)
    config_text += f"actnorm_initialized = {model.initialized}\n"
    write_checkpoint_raw(path, config_text, tensors)


def load_checkpoint(path):
    """Rebuild (model, net, opt, cfg) from a checkpoint file.

    Every expected parameter must be present with a matching shape; extra or
    missing parameters are errors.
    """
    from .training import OptimizerState, build_models, config_from_text

    config_text, tensors = read_checkpoint_raw(path)
    lines = []
    initialized = False
    for line in config_text.splitlines():
        if line.startswith("actnorm_initialized"):
            initialized = line.split("=", 1)[1].strip().lower() == "true"
        else:
            lines.append(line)
    try:
        cfg = config_from_text("\n".join(lines))
    except ValueError as e:
        raise FormatError(f"invalid checkpoint config: {e}") from None
    model, net = build_models(cfg)
    params = {**model.parameters(), **net.parameters()}

    expected = set(params)
    stored_params = {k for k in tensors if not k.startswith("adam.")}
    if stored_params != expected:
        missing = sorted(expected - stored_params)
        extra = sorted(stored_params - expected)
        raise FormatError(f"parameter set mismatch: missing {missing[:3]}, "
                          f"extra {extra[:3]}")
    dtype = cfg.dtype
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.value.shape:
            raise FormatError(f"shape mismatch for {name!r}: checkpoint "
                              f"{arr.shape}, model {p.value.shape}")
        p.value = arr.astype(dtype)
    if initialized:
        model.mark_initialized()

    opt = OptimizerState()
    opt.step = int(tensors.get("adam.step", np.asarray(0.0)))
    for name in params:
        mk, vk = f"adam.m.{name}", f"adam.v.{name}"
        if mk in tensors:
            opt.m[name] = tensors[mk].copy()
            opt.v[name] = tensors[vk].copy()
    return model, net, opt, cfg


def checkpoint_store(path, state=None, direction="read"):
    if direction == "write":
        model, net, opt, cfg = state
        save_checkpoint(path, model, net, opt, cfg)
        return None
    if direction == "read":
        return load_checkpoint(path)
    raise ValueError(f"direction must be read or write, got {direction!r}")


# ---------------------------------------------------------------------------
# Frame export
# ---------------------------------------------------------------------------

def export_frames(video_u8, dir_path, prefix="frame"):
    """One binary PPM (P6) per frame; single-channel frames replicate to RGB."""
    video = np.asarray(video_u8)
    if video.dtype != np.uint8:
        raise FormatError(f"export expects uint8 frames, got {video.dtype}")
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video):
        if frame.shape[-1] == 1:
            frame = np.repeat(frame, 3, axis=-1)
        h, w, c = frame.shape
        if c != 3:
            raise FormatError(f"cannot export {c}-channel frame as PPM")
        path = dir_path / f"{prefix}_{i:04d}.ppm"
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(np.ascontiguousarray(frame).tobytes())
        paths.append(path)
    return paths


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"not a binary PPM: {path}")
    try:
        w, h = (int(v) for v in parts[1].split())
    except ValueError:
        raise FormatError(f"bad PPM dimension line {parts[1]!r}") from None
    if w <= 0 or h <= 0:
        raise FormatError(f"bad PPM dimensions {w}x{h}")
    if parts[2] != b"255":
        raise FormatError("unsupported maxval")
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != h * w * 3:
        raise FormatError(f"PPM payload size mismatch: {pixels.size} != {h * w * 3}")
    return pixels.reshape(h, w, 3).copy()
