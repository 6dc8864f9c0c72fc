"""Procedural video datasets and the motion-direction classifier.

Shape videos: a single shape on a gray background moving with constant
speed in one of eight directions (45-degree increments). Sprite videos: a
fixed glyph bouncing off the frame edges. Both are pure functions of
(config, seed), with per-video seeds derived as seed XOR video index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, NoForegroundError

BACKGROUND = 128

# Eight saturated colors; sampled uniformly.
PALETTE = (
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0),
    (255, 0, 255), (0, 255, 255), (255, 128, 0), (255, 255, 255),
)

# Canonical unit vectors (dx, dy), dy positive downward (row direction),
# at 45-degree increments starting from +x.
DIRECTIONS = tuple(
    (float(np.cos(k * np.pi / 4)), float(np.sin(k * np.pi / 4))) for k in range(8)
)

SHAPE_KINDS = ("circle", "square", "triangle")


@dataclass
class ShapeSpec:
    kind: str
    size: int  # radius, px
    color: tuple
    start: tuple  # (x, y), continuous
    direction: int  # index into DIRECTIONS
    speed: float  # px/frame


@dataclass
class VideoDataset:
    videos: np.ndarray  # uint8 [N, T, H, W, C]
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.videos.shape


def _rasterize_shape(kind, cx, cy, r, color, h, w):
    frame = np.full((h, w, 3), BACKGROUND, dtype=np.uint8)
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif kind == "square":
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif kind == "triangle":
        # Isoceles triangle pointing up: half-width grows linearly with depth.
        depth = dy + r
        mask = (depth >= 0) & (depth <= 2 * r) & (np.abs(dx) <= depth / 2.0)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    frame[mask] = color
    return frame


def _feasible_start(dim, r, disp):
    """Allowed start range [lo, hi] so the shape stays fully inside for the
    whole displacement `disp` along one axis."""
    lo = r - min(0.0, disp)
    hi = (dim - 1 - r) - max(0.0, disp)
    return lo, hi


def sample_shape_spec(rng, t, h, w, sizes, speed, kinds=SHAPE_KINDS):
    kind = kinds[rng.integers(len(kinds))]
    size = int(sizes[rng.integers(len(sizes))])
    color = PALETTE[rng.integers(len(PALETTE))]
    direction = int(rng.integers(8))
    dx, dy = DIRECTIONS[direction]
    total = (t - 1) * speed
    ranges = []
    for dim, disp in ((w, total * dx), (h, total * dy)):
        lo, hi = _feasible_start(dim, size, disp)
        # Keep the start near the center where possible.
        lo = max(lo, dim / 2.0 - dim / 4.0)
        hi = min(hi, dim / 2.0 + dim / 4.0)
        if hi < lo:
            lo, hi = _feasible_start(dim, size, disp)
            if hi < lo:
                raise GeometryError(
                    f"shape of radius {size} cannot stay inside a {h}x{w} frame "
                    f"for {t} frames at speed {speed}")
        ranges.append((lo, hi))
    (x_lo, x_hi), (y_lo, y_hi) = ranges
    start = (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))
    return ShapeSpec(kind, size, color, start, direction, speed)


def render_shape_video(spec, t, h, w):
    dx, dy = DIRECTIONS[spec.direction]
    frames = np.empty((t, h, w, 3), dtype=np.uint8)
    for k in range(t):
        cx = spec.start[0] + k * spec.speed * dx
        cy = spec.start[1] + k * spec.speed * dy
        frames[k] = _rasterize_shape(spec.kind, cx, cy, spec.size, spec.color, h, w)
    return frames


def gen_stochastic_movement(n_videos, t, h, w, seed, sizes=(2, 3, 4), speed=1.0):
    """Shape videos: type, size, color, and direction sampled per video."""
    videos = np.empty((n_videos, t, h, w, 3), dtype=np.uint8)
    specs = []
    for i in range(n_videos):
        rng = np.random.default_rng(seed ^ i)
        spec = sample_shape_spec(rng, t, h, w, sizes, speed)
        specs.append(spec)
        videos[i] = render_shape_video(spec, t, h, w)
    return VideoDataset(videos, metadata={
        "generator": "shapes", "seed": seed, "dims": (n_videos, t, h, w, 3),
        "directions": [s.direction for s in specs],
    })


# 5x5 diamond glyph for the bouncing-sprite variant.
_GLYPH = np.array([
    [0, 0, 1, 0, 0],
    [0, 1, 1, 1, 0],
    [1, 1, 1, 1, 1],
    [0, 1, 1, 1, 0],
    [0, 0, 1, 0, 0],
], dtype=bool)


def gen_moving_sprite(n_videos, t, h, w, seed, speed=1.0):
    """A fixed glyph bouncing off the frame edges with constant speed."""
    g = _GLYPH.shape[0]
    if h <= g or w <= g:
        raise GeometryError(f"frame {h}x{w} too small for the {g}x{g} sprite")
    videos = np.zeros((n_videos, t, h, w, 3), dtype=np.uint8)
    for i in range(n_videos):
        rng = np.random.default_rng(seed ^ i)
        x = float(rng.uniform(0, w - g))
        y = float(rng.uniform(0, h - g))
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)
        for k in range(t):
            r, c = int(round(y)), int(round(x))
            videos[i, k, r:r + g, c:c + g][_GLYPH] = 255
            x += vx
            y += vy
            if x < 0 or x > w - g:
                vx = -vx
                x = min(max(x, 0.0), float(w - g))
            if y < 0 or y > h - g:
                vy = -vy
                y = min(max(y, 0.0), float(h - g))
    return VideoDataset(videos, metadata={
        "generator": "sprite", "seed": seed, "dims": (n_videos, t, h, w, 3)})


def classify_direction(video_u8):
    """Recover the movement direction of a video's foreground.

    Foreground pixels differ from the modal background intensity by more
    than 16 levels. A least-squares line through the per-frame centroids
    gives the velocity; the result is the nearest of the 8 canonical
    directions plus the cosine of the angular residual as confidence.
    """
    video = np.asarray(video_u8)
    t = video.shape[0]
    flat = video.reshape(-1)
    background = int(np.bincount(flat, minlength=256).argmax())
    centroids = []
    for k in range(t):
        frame = video[k]
        mask = (np.abs(frame.astype(np.int16) - background) > 16).any(axis=-1)
        if mask.sum() < 0.01 * mask.size:
            raise NoForegroundError(f"frame {k}: less than 1% foreground")
        ys, xs = np.nonzero(mask)
        centroids.append((xs.mean(), ys.mean()))
    centroids = np.asarray(centroids)
    ts = np.arange(t)
    vx = np.polyfit(ts, centroids[:, 0], 1)[0]
    vy = np.polyfit(ts, centroids[:, 1], 1)[0]
    v = np.hypot(vx, vy)
    if v < 1e-6:
        raise NoForegroundError("zero foreground displacement")
    angle = np.arctan2(vy, vx)
    idx = int(np.round(angle / (np.pi / 4))) % 8
    residual = angle - idx * (np.pi / 4)
    residual = (residual + np.pi) % (2 * np.pi) - np.pi
    return idx, float(np.cos(residual))
