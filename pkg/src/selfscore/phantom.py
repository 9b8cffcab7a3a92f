"""Random-ellipse complex phantoms and smooth coil maps for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mri import (CoilSensitivities, PairedMeasurement, derive_pair_subsample,
                  gen_mask, simulate)
from .numerics import RandomStream


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 32
    width: int = 32
    n_ellipses: int = 6
    intensity: tuple[float, float] = (0.2, 1.0)
    phase_roughness: float = 1.0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("phantoms need H, W >= 8")
        lo, hi = self.intensity
        if not lo < hi:
            raise ValueError("intensity range must satisfy lo < hi")
        if self.n_ellipses < 0:
            raise ValueError("n_ellipses must be nonnegative")


@dataclass(frozen=True)
class DatasetRecord:
    truth: np.ndarray
    sens: CoilSensitivities
    pair: PairedMeasurement


def _grid(height: int, width: int):
    v, u = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    return u, v


def _ellipse(u, v, cx, cy, a, b, angle):
    c, s = np.cos(angle), np.sin(angle)
    du, dv = u - cx, v - cy
    pu, pv = c * du + s * dv, -s * du + c * dv
    return ((pu / a) ** 2 + (pv / b) ** 2) <= 1.0


def gen_phantom(spec: PhantomSpec, stream: RandomStream) -> np.ndarray:
    """Sum of random ellipses with complex amplitudes under a smooth phase.

    The first ellipse is a large "body"; the others are placed inside it.
    Nonzero phantoms are scaled to unit peak magnitude.
    """
    u, v = _grid(spec.height, spec.width)
    img = np.zeros((spec.height, spec.width), dtype=np.complex128)
    if spec.n_ellipses == 0:
        return img.astype(np.complex64)
    lo, hi = spec.intensity
    params = stream.uniform((spec.n_ellipses, 6))
    for k, (p0, p1, p2, p3, p4, p5) in enumerate(params):
        if k == 0:
            cx, cy = 0.2 * (p0 - 0.5), 0.2 * (p1 - 0.5)
            a, b = 0.6 + 0.3 * p2, 0.6 + 0.3 * p3
        else:
            r, t = 0.45 * np.sqrt(p0), 2 * np.pi * p1
            cx, cy = r * np.cos(t), r * np.sin(t)
            a, b = 0.08 + 0.3 * p2, 0.08 + 0.3 * p3
        amp = (lo + (hi - lo) * p5) * np.exp(1j * spec.phase_roughness * 0.5 * (p4 - 0.5))
        img += amp * _ellipse(u, v, cx, cy, a, b, np.pi * p4)
    coeffs = stream.gaussian(5, dtype=np.float64) * 0.5
    phase = coeffs[0] + coeffs[1] * u + coeffs[2] * v + coeffs[3] * u * v + coeffs[4] * (u ** 2 - v ** 2)
    img *= np.exp(1j * spec.phase_roughness * phase)
    peak = np.abs(img).max()
    if peak > 0:
        img /= peak
    return img.astype(np.complex64)


def gen_coil_maps(n_coils: int, height: int, width: int, stream: RandomStream) -> CoilSensitivities:
    """Gaussian-bump coil profiles around the FOV, normalized so sum_c |S_c|^2 = 1."""
    if n_coils < 1:
        raise ValueError("need at least one coil")
    u, v = _grid(height, width)
    draws = stream.uniform((n_coils, 4))
    offset = 2 * np.pi * stream.uniform()
    maps = np.empty((n_coils, height, width), dtype=np.complex128)
    for c, (q0, q1, q2, q3) in enumerate(draws):
        angle = offset + 2 * np.pi * c / n_coils
        cx, cy = 1.2 * np.cos(angle), 1.2 * np.sin(angle)
        w = 0.8 * (1 + 0.4 * (q0 - 0.5))
        mag = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * w ** 2))
        phase = 2 * np.pi * q1 + 1.5 * (q2 - 0.5) * u + 1.5 * (q3 - 0.5) * v
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilSensitivities(maps.astype(np.complex64))


def simulate_record(truth, sens, mask_kind: str, acceleration: int, acs: int, gamma: float,
                    keep_fraction: float, sub_acs: int, stream: RandomStream) -> PairedMeasurement:
    mask = gen_mask(mask_kind, truth.shape[-1], acceleration, acs, stream)
    y = simulate(truth, sens, mask, gamma, stream)
    return derive_pair_subsample(y, keep_fraction, sub_acs, stream)


def build_dataset(n: int, spec: PhantomSpec = PhantomSpec(), n_coils: int = 4,
                  mask_kind: str = "random", acceleration: int = 4, acs: int = 4,
                  gamma: float = 0.01, keep_fraction: float = 0.7, sub_acs: int = 2,
                  seed: int = 0, first_id: int = 0) -> list[DatasetRecord]:
    """``n`` simulated records; record ``i`` draws everything from stream id ``first_id + i``.

    Phantom and coils are drawn before the mask, so two calls that differ only
    in ``mask_kind`` describe the same objects under different sampling.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    records = []
    for i in range(first_id, first_id + n):
        stream = RandomStream(seed, i)
        truth = gen_phantom(spec, stream)
        sens = gen_coil_maps(n_coils, spec.height, spec.width, stream)
        pair = simulate_record(truth, sens, mask_kind, acceleration, acs, gamma,
                               keep_fraction, sub_acs, stream)
        records.append(DatasetRecord(truth, sens, pair))
    return records
