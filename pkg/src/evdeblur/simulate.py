"""Synthetic scene generator: sharp frame sequences, blur, and ideal events.

A scene is a short sequence of latent frames under known motion.  The blurry
observation is their per-pixel average, and events come from an idealized
contrast-threshold sensor that watches the linearly interpolated
log-intensity path between consecutive frames.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .events import EventStream, write_events_binary
from .imageio import write_image

LOG_EPS = 1e-4
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SceneConfig:
    """Parameters for one synthetic scene.

    motion is ("translate", vx, vy) in px/frame, ("rotate", omega) in
    rad/frame, or ("flow", field) with a (2, H, W) px/frame displacement.
    texture is ("checker", cell_px), ("blobs", count) or ("image", array).
    """

    width: int = 64
    height: int = 64
    n_frames: int = 11
    motion: tuple = ("translate", 1.0, 0.0)
    texture: tuple = ("blobs", 8)
    contrast_c: float = 0.15
    rgb: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 3 or self.n_frames % 2 == 0:
            raise ConfigError("n_frames must be odd and >= 3")
        if self.contrast_c <= 0:
            raise ConfigError("contrast threshold must be positive")
        if self.motion[0] not in ("translate", "rotate", "flow"):
            raise ConfigError(f"unsupported motion kind {self.motion[0]!r}")
        if self.texture[0] not in ("checker", "blobs", "discs", "image"):
            raise ConfigError(f"unsupported texture kind {self.texture[0]!r}")
        for v in self.motion[1:]:
            if np.isscalar(v) and not np.isfinite(v):
                raise ConfigError("motion speeds must be finite")


@dataclass(frozen=True)
class ScenePack:
    """Simulator output bundle for one scene."""

    latent_frames: list[np.ndarray]
    blur: np.ndarray
    events: EventStream
    gt_mid: np.ndarray
    contrast_c: float

    @property
    def mid_index(self) -> int:
        return (len(self.latent_frames) - 1) // 2


def _motion_margin(config: SceneConfig) -> int:
    kind = config.motion[0]
    n = config.n_frames - 1
    if kind == "translate":
        _, vx, vy = config.motion
        return int(np.ceil(n * max(abs(vx), abs(vy)))) + 2
    if kind == "rotate":
        omega = config.motion[1]
        radius = 0.5 * float(np.hypot(config.width, config.height))
        return int(np.ceil(radius * abs(omega) * n)) + 2
    fieldarr = np.asarray(config.motion[1], dtype=np.float64)
    return int(np.ceil(n * np.abs(fieldarr).max())) + 2


def _binomial3(img: np.ndarray) -> np.ndarray:
    """Separable 1-2-1 smoothing with replicated edges; tames aliasing on
    hard-edged textures under subpixel motion."""
    p = np.pad(img, 1, mode="edge")
    img = 0.25 * (p[:-2, 1:-1] + 2 * p[1:-1, 1:-1] + p[2:, 1:-1])
    p = np.pad(img, ((0, 0), (1, 1)), mode="edge")
    return 0.25 * (p[:, :-2] + 2 * p[:, 1:-1] + p[:, 2:])


def _make_canvas(config: SceneConfig, margin: int, rng: np.random.Generator) -> np.ndarray:
    ch, cw = config.height + 2 * margin, config.width + 2 * margin
    kind = config.texture[0]
    channels = 3 if config.rgb else 1
    if kind == "image":
        img = np.asarray(config.texture[1], dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape[0] < ch or img.shape[1] < cw:
            raise ConfigError(
                f"texture image {img.shape[:2]} smaller than padded canvas ({ch}, {cw})"
            )
        return img[:ch, :cw, :channels] if img.shape[2] >= channels else np.repeat(img, 3, axis=2)
    if kind == "checker":
        cell = int(config.texture[1])
        yy, xx = np.mgrid[0:ch, 0:cw]
        parity = ((yy // cell) + (xx // cell)) % 2
        canvas = np.empty((ch, cw, channels))
        for c in range(channels):
            lo, hi = rng.uniform(0.05, 0.35), rng.uniform(0.6, 0.95)
            canvas[:, :, c] = np.where(parity == 0, lo, hi)
        return canvas
    if kind == "discs":
        count = int(config.texture[1])
        yy, xx = np.mgrid[0:ch, 0:cw].astype(np.float64)
        canvas = np.empty((ch, cw, channels))
        for c in range(channels):
            img = np.full((ch, cw), rng.uniform(0.2, 0.8))
            for _ in range(count):
                cy, cx = rng.uniform(0, ch), rng.uniform(0, cw)
                r = rng.uniform(2.0, 9.0)
                val = rng.uniform(0.08, 0.92)
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = val
            canvas[:, :, c] = _binomial3(img)
        return canvas
    # gaussian blobs on a gently sloped background
    count = int(config.texture[1])
    yy, xx = np.mgrid[0:ch, 0:cw].astype(np.float64)
    canvas = np.empty((ch, cw, channels))
    for c in range(channels):
        gx, gy = rng.uniform(-0.15, 0.15, size=2)
        img = 0.45 + gx * (xx - cw / 2) / cw + gy * (yy - ch / 2) / ch
        for _ in range(count):
            cy, cx = rng.uniform(0, ch), rng.uniform(0, cw)
            sigma = rng.uniform(2.0, 8.0)
            amp = rng.uniform(-0.5, 0.5)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
        lo, hi = img.min(), img.max()
        span = hi - lo if hi > lo else 1.0
        canvas[:, :, c] = 0.08 + 0.84 * (img - lo) / span
    return canvas


def _bilinear_canvas(canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = canvas.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.clip(y0, 0, h - 2)
    x0 = np.clip(x0, 0, w - 2)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    v00 = canvas[y0, x0]
    v01 = canvas[y0, x0 + 1]
    v10 = canvas[y0 + 1, x0]
    v11 = canvas[y0 + 1, x0 + 1]
    return (
        v00 * (1 - fy) * (1 - fx)
        + v01 * (1 - fy) * fx
        + v10 * fy * (1 - fx)
        + v11 * fy * fx
    )


def generate_scene(config: SceneConfig) -> list[np.ndarray]:
    """Render the latent frame sequence for a scene, deterministic in seed."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    margin = _motion_margin(config)
    canvas = _make_canvas(config, margin, rng)
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = config.motion[0]
    frames = []
    for k in range(config.n_frames):
        if kind == "translate":
            _, vx, vy = config.motion
            sy = yy - k * vy + margin
            sx = xx - k * vx + margin
        elif kind == "rotate":
            omega = config.motion[1]
            theta = -omega * k
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
            dy, dx = yy - cy, xx - cx
            sy = cy + np.cos(theta) * dy - np.sin(theta) * dx + margin
            sx = cx + np.sin(theta) * dy + np.cos(theta) * dx + margin
        else:
            fieldarr = np.asarray(config.motion[1], dtype=np.float64)
            if fieldarr.shape != (2, h, w):
                raise ConfigError(f"flow field must be (2, {h}, {w}), got {fieldarr.shape}")
            sy = yy - k * fieldarr[0] + margin
            sx = xx - k * fieldarr[1] + margin
        frame = _bilinear_canvas(canvas, sy, sx)
        frames.append(frame[:, :, 0] if not config.rgb else frame)
    return frames


def blur_average(frames: list[np.ndarray]) -> np.ndarray:
    """Per-pixel arithmetic mean of equally shaped frames."""
    if not frames:
        raise ShapeError("need at least one frame")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ShapeError("frames must share one shape")
    acc = np.zeros(shape, dtype=np.float64)
    for f in frames:
        acc += f
    return acc / len(frames)


def to_luma(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    return image @ LUMA_WEIGHTS


def emit_events(
    frames: list[np.ndarray],
    c: float,
    t0: float = 0.0,
    t1: float = 1.0,
) -> EventStream:
    """Ideal contrast-threshold events from the latent sequence.

    Per pixel a reference log intensity tracks threshold crossings of the
    linearly interpolated log-intensity path; every full crossing of c emits
    one event at the interpolated crossing time.
    """
    if c <= 0:
        raise ConfigError("contrast threshold must be positive")
    height, width = frames[0].shape[:2]
    log_frames = [np.log(to_luma(f) + LOG_EPS).ravel() for f in frames]
    n = len(frames)
    frame_times = t0 + (t1 - t0) * np.arange(n) / (n - 1)
    ref = log_frames[0].copy()
    ts, xs, ys, ps = [], [], [], []
    pix_y, pix_x = np.divmod(np.arange(height * width), width)
    for k in range(1, n):
        prev_l, cur_l = log_frames[k - 1], log_frames[k]
        delta = cur_l - prev_l
        pol = np.where(delta >= 0, 1.0, -1.0)
        # 1e-9 slack so exact multiples of c are not lost to rounding
        m = np.floor((cur_l - ref) * pol / c + 1e-9).astype(np.int64)
        m = np.maximum(m, 0)
        fired = np.nonzero(m)[0]
        if fired.size:
            counts = m[fired]
            total = int(counts.sum())
            pix = np.repeat(fired, counts)
            j = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            levels = ref[pix] + j * pol[pix] * c
            tau = np.clip((levels - prev_l[pix]) / delta[pix], 0.0, 1.0)
            ts.append(frame_times[k - 1] + tau * (frame_times[k] - frame_times[k - 1]))
            xs.append(pix_x[pix])
            ys.append(pix_y[pix])
            ps.append(pol[pix].astype(np.int8))
            ref[fired] += counts * pol[fired] * c
    if not ts:
        return EventStream.empty(width, height, t0, t1)
    t = np.concatenate(ts)
    x = np.concatenate(xs).astype(np.int32)
    y = np.concatenate(ys).astype(np.int32)
    p = np.concatenate(ps)
    order = np.argsort(t, kind="stable")
    t = np.minimum(t[order], t1)
    return EventStream(t, x[order], y[order], p[order], t0, t1, width, height)


def simulate_scene(config: SceneConfig) -> ScenePack:
    """Full pipeline: frames, blur, events, and mid-exposure ground truth."""
    frames = generate_scene(config)
    blur = blur_average(frames)
    events = emit_events(frames, config.contrast_c)
    return ScenePack(frames, blur, events, frames[(config.n_frames - 1) // 2], config.contrast_c)


# ---------------------------------------------------------------------------
# Dataset emission
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Sampling ranges for a scene collection plus its train/test split."""

    n_scenes: int = 220
    train_fraction: float = 10.0 / 11.0
    width: int = 64
    height: int = 64
    n_frames: int = 11
    contrast_c: float = 0.15
    speed_range: tuple[float, float] = (0.4, 1.0)
    textures: tuple[str, ...] = ("discs", "checker")
    rgb: bool = False
    seed: int = 0


def standard_toy_config(seed: int = 0) -> DatasetConfig:
    """The fixed 200-train / 20-test 64x64 grayscale benchmark set."""
    return DatasetConfig(n_scenes=220, train_fraction=200.0 / 220.0, seed=seed)


def sample_scene_config(dataset: DatasetConfig, index: int) -> SceneConfig:
    """Deterministically sample scene i of a dataset."""
    rng = np.random.default_rng(np.random.SeedSequence(dataset.seed, spawn_key=(index,)))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(*dataset.speed_range)
    motion = ("translate", float(speed * np.cos(angle)), float(speed * np.sin(angle)))
    tex_kind = dataset.textures[index % len(dataset.textures)]
    if tex_kind == "checker":
        texture = ("checker", int(rng.integers(6, 14)))
    elif tex_kind == "discs":
        texture = ("discs", int(rng.integers(25, 45)))
    else:
        texture = ("blobs", int(rng.integers(6, 14)))
    return SceneConfig(
        width=dataset.width,
        height=dataset.height,
        n_frames=dataset.n_frames,
        motion=motion,
        texture=texture,
        contrast_c=dataset.contrast_c,
        rgb=dataset.rgb,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def make_dataset(dataset: DatasetConfig, out_dir) -> dict:
    """Write scene packs and train/test manifests; deterministic in seed.

    Each scene yields blur_XXXX.pgm, events_XXXX.evt1, gt_XXXX.pgm.  The two
    manifests hold `blur events gt` path triples relative to the manifest.
    """
    out_dir = os.fspath(out_dir)
    n_train = int(round(dataset.n_scenes * dataset.train_fraction))
    splits = {"train": range(0, n_train), "test": range(n_train, dataset.n_scenes)}
    manifests = {}
    for split, indices in splits.items():
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        lines = []
        for i in indices:
            pack = simulate_scene(sample_scene_config(dataset, i))
            names = (f"blur_{i:04d}.pgm", f"events_{i:04d}.evt1", f"gt_{i:04d}.pgm")
            write_image(pack.blur, os.path.join(split_dir, names[0]))
            write_events_binary(pack.events, os.path.join(split_dir, names[1]))
            write_image(pack.gt_mid, os.path.join(split_dir, names[2]))
            lines.append(" ".join(os.path.join(split, n) for n in names))
        manifest_path = os.path.join(out_dir, f"{split}_manifest.txt")
        with open(manifest_path, "w", encoding="ascii") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
        manifests[split] = manifest_path
    return manifests


def read_manifest(path) -> list[tuple[str, str, str]]:
    """Resolve a manifest's `blur events gt` triples relative to its location."""
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    entries = []
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise FormatError(f"manifest line must have 3 paths: {line!r}")
            entries.append(tuple(os.path.join(base, p) for p in parts))
    return entries
