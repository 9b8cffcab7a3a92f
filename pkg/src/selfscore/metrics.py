"""NMSE, PSNR and SSIM on magnitude images."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from .exceptions import DimensionError


@dataclass(frozen=True)
class SliceMetrics:
    nmse: float
    psnr_db: float
    ssim: float


def evaluate(recon, ref, data_range: float | None = None) -> SliceMetrics:
    """Compare magnitude images.

    ``psnr = 10 log10(max(ref)^2 / mse)`` (``inf`` on an exact match); SSIM
    uses an 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03 and
    dynamic range ``max(ref)`` unless ``data_range`` is given.
    """
    recon = np.asarray(recon, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if recon.shape != ref.shape or ref.ndim != 2:
        raise DimensionError(f"need two equal-shape 2D images, got {recon.shape} and {ref.shape}")
    ref_energy = np.sum(ref ** 2)
    if ref_energy == 0:
        raise ValueError("NMSE is undefined for an all-zero reference")
    err = recon - ref
    nmse = float(np.sum(err ** 2) / ref_energy)
    mse = float(np.mean(err ** 2))
    peak = float(ref.max())
    psnr = float("inf") if mse == 0 else float(10 * np.log10(peak ** 2 / mse))
    rng = peak if data_range is None else float(data_range)
    ssim = float(structural_similarity(recon, ref, data_range=rng, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03))
    return SliceMetrics(nmse, psnr, ssim)


@dataclass
class MetricsReport:
    slices: list[SliceMetrics] = field(default_factory=list)

    def add(self, m: SliceMetrics) -> None:
        self.slices.append(m)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.slices])

    def mean(self, name: str) -> float:
        return float(np.mean(self.column(name)))

    def std(self, name: str) -> float:
        return float(np.std(self.column(name)))

    def median(self, name: str) -> float:
        return float(np.median(self.column(name)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("slice,nmse,psnr,ssim\n")
        for i, s in enumerate(self.slices):
            buf.write(f"{i},{_fmt(s.nmse)},{_fmt(s.psnr_db)},{_fmt(s.ssim)}\n")
        buf.write(f"aggregate,{_fmt(self.mean('nmse'))},{_fmt(self.mean('psnr_db'))},{_fmt(self.mean('ssim'))}\n")
        return buf.getvalue()


def _fmt(v: float) -> str:
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.10g}"


def evaluate_many(recons, refs) -> MetricsReport:
    report = MetricsReport()
    for r, g in zip(recons, refs):
        report.add(evaluate(r, g))
    return report
