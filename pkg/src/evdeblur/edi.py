"""Analytic double-integral deblurring from a blurry image plus events.

The blur equals the sharp start-of-exposure image times the time average of
the exponentiated event integral, so dividing the blur by that average
recovers the sharp image, and multiplying by the integral moves it to any
in-exposure timestamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ConfigError, ShapeError
from .events import EventStream, accumulate

DEFAULT_N_SAMPLES = 50
DEFAULT_C_GRID = tuple(float(c) for c in np.round(np.arange(0.02, 0.42, 0.02), 4))


@dataclass(frozen=True)
class EdiParams:
    """Contrast threshold and time sampling density for the exposure average."""

    c: float
    n_samples: int = DEFAULT_N_SAMPLES

    def __post_init__(self):
        if self.c <= 0:
            raise ConfigError("contrast threshold must be positive")
        if self.n_samples < 2:
            raise ConfigError("need at least two time samples")


def _check_dims(blur: np.ndarray, stream: EventStream) -> np.ndarray:
    blur = np.asarray(blur, dtype=np.float64)
    if blur.shape[:2] != (stream.height, stream.width):
        raise ShapeError(
            f"blur {blur.shape[:2]} does not match stream ({stream.height}, {stream.width})"
        )
    return blur


def event_integral_at(stream: EventStream, times: np.ndarray) -> np.ndarray:
    """Cumulative per-pixel polarity sums at each time, in one sorted sweep.

    The integral at time t counts events with timestamp <= t, so a crossing
    completed exactly at t is already reflected at t.
    """
    times = np.asarray(times, dtype=np.float64)
    out = np.zeros((times.size, stream.height, stream.width), dtype=np.float64)
    running = np.zeros((stream.height, stream.width), dtype=np.float64)
    prev_idx = 0
    for i, t in enumerate(times):
        idx = int(np.searchsorted(stream.t, t, side="right"))
        if idx > prev_idx:
            np.add.at(
                running,
                (stream.y[prev_idx:idx], stream.x[prev_idx:idx]),
                stream.p[prev_idx:idx].astype(np.float64),
            )
            prev_idx = idx
        out[i] = running
    return out


def _exposure_gain(stream: EventStream, params: EdiParams) -> np.ndarray:
    """Mean over sampled times of exp(c * event integral)."""
    times = np.linspace(stream.t0, stream.t1, params.n_samples)
    if len(stream) == 0:
        return np.ones((stream.height, stream.width), dtype=np.float64)
    integrals = event_integral_at(stream, times)
    gain = np.zeros((stream.height, stream.width), dtype=np.float64)
    for i in range(times.size):
        gain += np.exp(params.c * integrals[i])
    return gain / times.size


def edi_deblur(blur: np.ndarray, stream: EventStream, params: EdiParams) -> np.ndarray:
    """Sharp image at exposure start: blur divided by the exposure gain.

    RGB blur shares one event-derived gain field across channels.  Output is
    clamped below at zero and may exceed one.
    """
    blur = _check_dims(blur, stream)
    gain = _exposure_gain(stream, params)
    if blur.ndim == 3:
        gain = gain[:, :, None]
    return np.maximum(blur / gain, 0.0)


def reconstruct_at(
    blur: np.ndarray, stream: EventStream, params: EdiParams, t: float
) -> np.ndarray:
    """Sharp image at time t: the deblurred start image advanced by events."""
    if not (stream.t0 <= t <= stream.t1):
        raise BoundsError(f"t={t} outside exposure [{stream.t0}, {stream.t1}]")
    start = edi_deblur(blur, stream, params)
    step = np.exp(params.c * accumulate(stream, stream.t0, t).values)
    if start.ndim == 3:
        step = step[:, :, None]
    return start * step


def reconstruct_mid(blur: np.ndarray, stream: EventStream, params: EdiParams) -> np.ndarray:
    return reconstruct_at(blur, stream, params, 0.5 * (stream.t0 + stream.t1))


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gy = np.zeros_like(image)
    gx = np.zeros_like(image)
    gy[1:-1, :] = 0.5 * (image[2:, :] - image[:-2, :])
    gx[:, 1:-1] = 0.5 * (image[:, 2:] - image[:, :-2])
    return np.hypot(gy, gx)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


MID_COUNT_WINDOW = 0.1


def _mid_window_counts(stream: EventStream, fraction: float = MID_COUNT_WINDOW) -> np.ndarray:
    """Absolute event counts in a short window around mid-exposure.

    Events near the reconstruction time mark instantaneous edge locations;
    counts over the whole exposure are smeared along the motion path and
    carry no usable sharpness signal.
    """
    counts = np.zeros((stream.height, stream.width), dtype=np.float64)
    if not len(stream):
        return counts
    mid = 0.5 * (stream.t0 + stream.t1)
    half = 0.5 * fraction * (stream.t1 - stream.t0)
    mask = (stream.t >= mid - half) & (stream.t < mid + half)
    if not mask.any():
        mask = np.ones(len(stream), dtype=bool)
    np.add.at(counts, (stream.y[mask], stream.x[mask]), 1.0)
    return counts


def estimate_c(blur: np.ndarray, stream: EventStream, grid=DEFAULT_C_GRID) -> float:
    """Pick the threshold whose mid-exposure reconstruction has gradients
    best correlated with near-mid event locations; ties go to the smaller c."""
    candidates = sorted(float(c) for c in grid)
    if not candidates:
        raise ConfigError("candidate grid is empty")
    if any(c <= 0 for c in candidates):
        raise ConfigError("candidate thresholds must be positive")
    blur = _check_dims(blur, stream)
    counts = _mid_window_counts(stream)
    best_c, best_score = candidates[0], -np.inf
    for c in candidates:
        recon = reconstruct_mid(blur, stream, EdiParams(c=c))
        if recon.ndim == 3:
            recon = recon.mean(axis=2)
        score = _ncc(_gradient_magnitude(recon), counts)
        if score > best_score:
            best_c, best_score = c, score
    return best_c
