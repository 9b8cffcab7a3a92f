"""Cartesian multi-coil MRI forward model ``A = P F S`` and its helpers.

Images are complex ``(..., H, W)`` arrays, coil data ``(..., C, H, W)``.
Masks select whole phase-encode columns (the last axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_coil_array, check_image, check_same_grid
from .exceptions import DimensionError, FormatError
from .numerics import RandomStream, fft2c, ifft2c

MASK_KINDS = ("uniform", "random", "gaussian-pair", "full")


@dataclass(frozen=True)
class CoilSensitivities:
    maps: np.ndarray

    def __post_init__(self):
        maps = check_coil_array(self.maps, "maps")
        object.__setattr__(self, "maps", maps.astype(np.complex64, copy=False))

    @property
    def n_coils(self) -> int:
        return self.maps.shape[-3]

    @property
    def grid(self) -> tuple[int, int]:
        return self.maps.shape[-2:]

    def is_normalized(self, atol: float = 1e-4) -> bool:
        energy = np.sum(np.abs(self.maps) ** 2, axis=-3)
        support = energy > 0
        return bool(np.all(np.abs(energy[support] - 1) <= atol))


@dataclass(frozen=True)
class SamplingMask:
    lines: np.ndarray
    kind: str = "uniform"

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=bool)
        if lines.ndim != 1:
            raise DimensionError("mask lines must be a 1D boolean vector")
        if not lines.any():
            raise ValueError("a sampling mask needs at least one sampled line")
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        lines.setflags(write=False)
        object.__setattr__(self, "lines", lines)

    @property
    def width(self) -> int:
        return self.lines.size

    @property
    def n_lines(self) -> int:
        return int(self.lines.sum())

    @property
    def acceleration(self) -> float:
        return self.width / self.n_lines

    def project(self, k):
        """Zero every unsampled column of ``k``."""
        return k * self.lines.astype(np.float32)

    def to_text(self) -> str:
        return "".join("1" if v else "0" for v in self.lines) + "\n"

    @classmethod
    def from_text(cls, text: str, kind: str = "uniform") -> "SamplingMask":
        body = text.rstrip("\n")
        if not body or set(body) - {"0", "1"}:
            raise FormatError("mask text must be a non-empty line of '0'/'1' characters")
        return cls(np.array([c == "1" for c in body]), kind)

    def __eq__(self, other):
        return isinstance(other, SamplingMask) and np.array_equal(self.lines, other.lines)

    __hash__ = None


@dataclass(frozen=True)
class MultiCoilKSpace:
    data: np.ndarray
    mask: SamplingMask
    noise_scale: float = 0.0

    def __post_init__(self):
        data = check_coil_array(self.data, "data").astype(np.complex64, copy=False)
        if data.shape[-1] != self.mask.width:
            raise DimensionError(f"k-space width {data.shape[-1]} does not match mask width {self.mask.width}")
        if np.any(data[..., ~self.mask.lines]):
            raise ValueError("k-space data must be zero on unsampled lines")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be nonnegative")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class PairedMeasurement:
    y: MultiCoilKSpace
    y_sub: MultiCoilKSpace
    submask: SamplingMask = field(repr=False)

    def __post_init__(self):
        if np.any(self.submask.lines & ~self.y.mask.lines):
            raise ValueError("submask must select a subset of the measured lines")
        if not np.array_equal(self.y_sub.data, self.submask.project(self.y.data)):
            raise ValueError("y_sub must equal y on the submask and zero elsewhere")


def _maps(sens) -> np.ndarray:
    return sens.maps if isinstance(sens, CoilSensitivities) else np.asarray(sens)


def _lines(mask) -> np.ndarray:
    return mask.lines if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)


def apply_A(x, sens, mask) -> np.ndarray:
    """``P F (S_c x)`` for every coil; ``x`` may carry leading batch dims."""
    x = check_image(x, "x")
    maps, lines = _maps(sens), _lines(mask)
    check_same_grid(x.shape[-2:], maps.shape[-2:], "image", "sensitivities")
    if lines.size != x.shape[-1]:
        raise DimensionError(f"mask width {lines.size} does not match image width {x.shape[-1]}")
    return fft2c(x[..., None, :, :] * maps) * lines


def apply_Ah(k, sens, mask) -> np.ndarray:
    """Adjoint of :func:`apply_A`: ``sum_c conj(S_c) F^-1 (P k_c)``."""
    k = check_coil_array(k, "k")
    maps, lines = _maps(sens), _lines(mask)
    check_same_grid(k.shape[-3:], maps.shape[-3:], "k-space", "sensitivities")
    if lines.size != k.shape[-1]:
        raise DimensionError(f"mask width {lines.size} does not match k-space width {k.shape[-1]}")
    return np.sum(np.conj(maps) * ifft2c(k * lines), axis=-3)


def _acs_block(width: int, acs: int) -> np.ndarray:
    lines = np.zeros(width, dtype=bool)
    if acs:
        start = width // 2 - acs // 2
        lines[start:start + acs] = True
    return lines


def _gaussian_density(width: int, sigma: float) -> np.ndarray:
    idx = np.arange(width) - width // 2
    return np.exp(-0.5 * (idx / sigma) ** 2)


def gen_mask(kind: str, width: int, acceleration: int, acs: int = 0,
             stream: RandomStream | None = None, sigma: float | None = None) -> SamplingMask:
    """Cartesian line mask.

    ``uniform`` keeps every ``acceleration``-th column plus a centered ACS
    block. ``random`` keeps ``ceil(width / acceleration)`` columns in total:
    the ACS block plus the rest drawn without replacement with probability
    proportional to a Gaussian over the column offset from DC (std ``sigma``,
    default ``width / 4``).
    """
    if acceleration < 1 or acceleration > width:
        raise ValueError(f"acceleration must lie in [1, {width}], got {acceleration}")
    if acs < 0 or acs > width:
        raise ValueError(f"acs must lie in [0, {width}], got {acs}")
    if acceleration == 1:
        return SamplingMask(np.ones(width, dtype=bool), "full")
    lines = _acs_block(width, acs)
    if kind == "uniform":
        lines[::acceleration] = True
    elif kind == "random":
        if stream is None:
            raise ValueError("random masks need a stream")
        target = math.ceil(width / acceleration)
        extra = target - int(lines.sum())
        if extra > 0:
            density = _gaussian_density(width, sigma or width / 4)
            density[lines] = 0
            picked = stream.choice(width, extra, p=density / density.sum())
            lines[picked] = True
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    return SamplingMask(lines, kind)


def derive_pair_subsample(y: MultiCoilKSpace, keep_fraction: float, acs: int,
                          stream: RandomStream, sigma: float | None = None) -> PairedMeasurement:
    """Split off a Gaussian-density subsample ``y_sub`` of the lines of ``y``.

    The submask keeps the ``acs`` sampled lines nearest DC plus a random
    subset of the remaining sampled lines, ``round(keep_fraction * n)`` lines
    in total (never fewer than ``acs``, and never fewer than one).
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    measured = np.flatnonzero(y.mask.lines)
    if measured.size < acs:
        raise ValueError(f"measurement has {measured.size} lines, fewer than acs={acs}")
    width = y.mask.width
    target = max(int(math.floor(keep_fraction * measured.size + 0.5)), acs, 1)
    dist = np.abs(measured - width // 2)
    order = measured[np.argsort(dist, kind="stable")]
    sub = np.zeros(width, dtype=bool)
    sub[order[:acs]] = True
    rest = np.array([j for j in measured if not sub[j]], dtype=int)
    extra = target - acs
    if extra > 0:
        density = _gaussian_density(width, sigma or width / 4)[rest]
        sub[stream.choice(rest, extra, p=density / density.sum())] = True
    submask = SamplingMask(sub, "gaussian-pair")
    y_sub = MultiCoilKSpace(submask.project(y.data), submask, y.noise_scale)
    return PairedMeasurement(y, y_sub, submask)


def add_noise(k: MultiCoilKSpace, gamma: float, stream: RandomStream) -> MultiCoilKSpace:
    """Complex Gaussian noise, per-component std ``gamma``, on sampled lines only."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0:
        return k
    noise = stream.gaussian(k.data.shape, complex=True) * np.float32(gamma)
    data = k.data + k.mask.project(noise)
    return MultiCoilKSpace(data, k.mask, float(math.hypot(k.noise_scale, gamma)))


def ssos(x, axis: int = -3) -> np.ndarray:
    """Root sum of squares over the coil axis."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise DimensionError("ssos expects coil images of shape (..., C, H, W)")
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=axis))


def zero_filled_combine(y, sens) -> np.ndarray:
    """``S^* F^-1 y`` with no mask reweighting."""
    data = y.data if isinstance(y, MultiCoilKSpace) else check_coil_array(y, "y")
    maps = _maps(sens)
    check_same_grid(data.shape[-3:], maps.shape[-3:], "k-space", "sensitivities")
    return np.sum(np.conj(maps) * ifft2c(data), axis=-3)


def simulate(x, sens, mask: SamplingMask, gamma: float, stream: RandomStream) -> MultiCoilKSpace:
    """``y = A x + n``."""
    clean = MultiCoilKSpace(apply_A(x, sens, mask), mask)
    return add_noise(clean, gamma, stream)
