"""PSNR and SSIM image quality metrics.

Inputs are float images in [0, 1]; both metrics clamp to that range first.
Multi-channel images are scored per channel and averaged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

PSNR_CAP_DB = 99.0
_MSE_FLOOR = 1e-12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for near-zero MSE."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_single(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    win = SSIM_WINDOW
    if a.shape[0] < win or a.shape[1] < win:
        raise ShapeError(f"images must be at least {win}x{win} for SSIM, got {a.shape}")
    w = _gaussian_window(win, SSIM_SIGMA)

    def filt(img):
        patches = np.lib.stride_tricks.sliding_window_view(img, (win, win))
        return np.tensordot(patches, w, axes=([2, 3], [0, 1]))

    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        return _ssim_single(a, b, peak)
    return float(np.mean([_ssim_single(a[..., c], b[..., c], peak) for c in range(a.shape[2])]))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM values plus aggregate means."""

    psnr_values: list[float]
    ssim_values: list[float]
    names: list[str] | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else float("nan")

    def to_json_lines(self) -> str:
        names = self.names or [str(i) for i in range(len(self.psnr_values))]
        lines = [
            json.dumps({"name": n, "psnr": p, "ssim": s})
            for n, p, s in zip(names, self.psnr_values, self.ssim_values)
        ]
        lines.append(
            json.dumps({"name": "mean", "psnr": self.mean_psnr, "ssim": self.mean_ssim})
        )
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (
            f"images: {len(self.psnr_values)}  "
            f"mean PSNR: {self.mean_psnr:.3f} dB  mean SSIM: {self.mean_ssim:.4f}"
        )
