"""PSNR and SSIM on the luma plane, plus the CSV report format.

Both metrics follow the common deraining evaluation protocol: convert RGB
to studio-swing BT.601 Y, then compare as real values (no re-quantization).
SSIM is single-scale with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
K2=0.03, L=255, averaged over valid (fully inside) window positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Image, rgb_to_y

__all__ = [
    "psnr",
    "ssim",
    "evaluate_pair",
    "MetricReport",
    "write_report_csv",
]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords * coords) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_WINDOW = _gaussian_window()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """Single-scale SSIM over valid positions of an 11x11 Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 11:
        raise ValueError(f"ssim needs a 2-D image at least 11x11, got {a.shape}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = sliding_window_view(a, (11, 11))
    wb = sliding_window_view(b, (11, 11))
    kern = _WINDOW
    mu_a = np.einsum("hwuv,uv->hw", wa, kern)
    mu_b = np.einsum("hwuv,uv->hw", wb, kern)
    e_aa = np.einsum("hwuv,hwuv,uv->hw", wa, wa, kern)
    e_bb = np.einsum("hwuv,hwuv,uv->hw", wb, wb, kern)
    e_ab = np.einsum("hwuv,hwuv,uv->hw", wa, wb, kern)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    smap = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(smap))


def evaluate_pair(clean: Image, restored: Image) -> tuple[float, float]:
    """(PSNR, SSIM) on the Y channel of a clean/restored pair."""
    if clean.pixels.shape != restored.pixels.shape:
        raise ValueError(
            f"image sizes differ: {clean.pixels.shape} vs {restored.pixels.shape}"
        )
    ya = rgb_to_y(clean)
    yb = rgb_to_y(restored)
    return psnr(ya, yb), ssim(ya, yb)


@dataclass
class MetricReport:
    """Per-image scores plus dataset means.

    The PSNR mean is taken over finite entries only; SSIM averages all
    entries.  ``inf_count`` records how many rows the PSNR mean excluded.
    """

    entries: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_score: float):
        self.entries.append((name, psnr_db, ssim_score))

    @property
    def inf_count(self) -> int:
        return sum(1 for _, p, _ in self.entries if math.isinf(p))

    @property
    def mean_psnr(self) -> float:
        finite = [p for _, p, _ in self.entries if math.isfinite(p)]
        if not finite:
            return math.inf
        return sum(finite) / len(finite)

    @property
    def mean_ssim(self) -> float:
        return sum(s for _, _, s in self.entries) / len(self.entries)


def write_report_csv(report: MetricReport, path):
    lines = ["image,psnr_db,ssim"]
    for name, p, s in report.entries:
        lines.append(f"{name},{p!r},{s!r}")
    lines.append(f"MEAN,{report.mean_psnr!r},{report.mean_ssim!r}")
    if report.inf_count:
        lines.append(f"# MEAN psnr_db excludes {report.inf_count} inf row(s)")
    Path(path).write_text("\n".join(lines) + "\n")
