"""Centered orthonormal Fourier transforms and counter-based random streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import DimensionError

_AXES = (-2, -1)


def _check_2d(x):
    if x.ndim < 2:
        raise DimensionError(f"expected an array with at least 2 dims, got shape {tuple(x.shape)}")


def fft2c(x):
    """Centered, orthonormal 2D DFT over the last two axes.

    The DC coefficient sits at ``(H // 2, W // 2)``. Works on numpy arrays
    and torch tensors (the latter stays differentiable).
    """
    _check_2d(x)
    if isinstance(x, torch.Tensor):
        x = torch.fft.ifftshift(x, dim=_AXES)
        x = torch.fft.fft2(x, dim=_AXES, norm="ortho")
        return torch.fft.fftshift(x, dim=_AXES)
    out = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=_AXES), axes=_AXES, norm="ortho"), axes=_AXES)
    return out.astype(np.result_type(x.dtype, np.complex64), copy=False)


def ifft2c(k):
    """Inverse of :func:`fft2c`."""
    _check_2d(k)
    if isinstance(k, torch.Tensor):
        k = torch.fft.ifftshift(k, dim=_AXES)
        k = torch.fft.ifft2(k, dim=_AXES, norm="ortho")
        return torch.fft.fftshift(k, dim=_AXES)
    out = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=_AXES), axes=_AXES, norm="ortho"), axes=_AXES)
    return out.astype(np.result_type(k.dtype, np.complex64), copy=False)


@dataclass
class RandomStream:
    """Philox stream identified by ``(seed, stream_id, counter)``.

    Every draw rebuilds the generator from the triple and then moves
    ``counter`` past the blocks it consumed, so equal triples always produce
    equal draws and no two draws from one stream overlap. Distinct
    ``stream_id`` values select distinct Philox keys.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        ctr = np.array([self.counter, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def _advance(self, gen: np.random.Generator) -> None:
        self.counter = int(gen.bit_generator.state["state"]["counter"][0])

    def _draw(self, fn):
        gen = self._generator()
        out = fn(gen)
        self._advance(gen)
        return out

    def spawn(self, stream_id: int) -> "RandomStream":
        """Fresh stream with the same seed and a different id."""
        return RandomStream(self.seed, stream_id, 0)

    def copy(self) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id, self.counter)

    def gaussian(self, shape, complex: bool = False, dtype=np.float32) -> np.ndarray:
        """Standard normal draws.

        The complex variant has independent N(0, 1) real and imaginary parts.
        """
        shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
        if complex:
            pair = self._draw(lambda g: g.standard_normal((2,) + shape))
            ctype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
            return (pair[0] + 1j * pair[1]).astype(ctype)
        return self._draw(lambda g: g.standard_normal(shape)).astype(dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._draw(lambda g: g.uniform(low, high, shape))

    def integers(self, low: int, high: int, shape=None):
        return self._draw(lambda g: g.integers(low, high, shape))

    def choice(self, a, size: int, p=None, replace: bool = False) -> np.ndarray:
        return self._draw(lambda g: g.choice(a, size=size, p=p, replace=replace))

    def permutation(self, n: int) -> np.ndarray:
        return self._draw(lambda g: g.permutation(n))


def gaussian(stream: RandomStream, shape, complex: bool = False, dtype=np.float32) -> np.ndarray:
    """Functional alias of :meth:`RandomStream.gaussian`; advances ``stream``."""
    return stream.gaussian(shape, complex=complex, dtype=dtype)


def as_stream(seed_or_stream) -> RandomStream:
    if isinstance(seed_or_stream, RandomStream):
        return seed_or_stream
    return RandomStream(int(seed_or_stream))
