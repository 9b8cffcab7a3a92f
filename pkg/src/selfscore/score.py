"""Noise-conditional score network and multi-scale denoising score matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionError
from .nn import EmaState, Params, ema_update, make_optimizer
from .numerics import RandomStream

PRESETS = {"full": (0.0066, 50.0, 266), "desk": (0.01, 16.0, 32)}


@dataclass(frozen=True)
class NoiseSchedule:
    """Increasing perturbation scales; index 0 is the smallest."""

    levels: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        if levels.ndim != 1 or levels.size < 1:
            raise ValueError("levels must be a non-empty 1D array")
        if np.any(levels <= 0) or np.any(np.diff(levels) <= 0):
            raise ValueError("levels must be positive and strictly increasing")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return self.levels.size

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def sigma_min(self) -> float:
        return float(self.levels[0])

    @property
    def sigma_max(self) -> float:
        return float(self.levels[-1])

    def check_level(self, i: int) -> int:
        if not 0 <= i < len(self):
            raise IndexError(f"level {i} outside [0, {len(self)})")
        return int(i)


def make_schedule(sigma_min: float, sigma_max: float, n_levels: int) -> NoiseSchedule:
    """Geometric ladder with exact endpoints."""
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    if n_levels < 2:
        raise ValueError("need at least two levels")
    t = np.arange(n_levels) / (n_levels - 1)
    levels = sigma_min * (sigma_max / sigma_min) ** t
    levels[0], levels[-1] = sigma_min, sigma_max
    return NoiseSchedule(levels)


def schedule_preset(name: str) -> NoiseSchedule:
    return make_schedule(*PRESETS[name])


@dataclass(frozen=True)
class ScoreArch:
    filters: int = 32
    blocks: int = 4
    channels: int = 2

    def shapes(self) -> dict[str, tuple[int, ...]]:
        f, c = self.filters, self.channels
        out = {"head.weight": (f, c, 3, 3), "head.bias": (f,)}
        for b in range(self.blocks):
            for j in (1, 2):
                out[f"block{b}.conv{j}.weight"] = (f, f, 3, 3)
                out[f"block{b}.conv{j}.bias"] = (f,)
        out["tail.weight"] = (c, f, 3, 3)
        out["tail.bias"] = (c,)
        return out


def init_score_params(arch: ScoreArch, stream: RandomStream, tail_scale: float = 0.1) -> Params:
    params = {}
    for name, shape in arch.shapes().items():
        if name.endswith("bias"):
            params[name] = torch.zeros(shape)
            continue
        std = np.sqrt(2.0 / (shape[1] * 9))
        if name.startswith("tail") or name.endswith("conv2.weight"):
            std *= tail_scale
        params[name] = torch.from_numpy(stream.gaussian(shape) * np.float32(std))
    return params


def score_net(params: Params, x: torch.Tensor, arch: ScoreArch) -> torch.Tensor:
    """Residual conv net on real ``(B, 2, H, W)`` input."""
    h = F.relu(F.conv2d(x, params["head.weight"], params["head.bias"], padding=1))
    for b in range(arch.blocks):
        z = F.relu(F.conv2d(h, params[f"block{b}.conv1.weight"], params[f"block{b}.conv1.bias"], padding=1))
        z = F.conv2d(z, params[f"block{b}.conv2.weight"], params[f"block{b}.conv2.bias"], padding=1)
        h = F.relu(h + z)
    return F.conv2d(h, params["tail.weight"], params["tail.bias"], padding=1)


def image_to_channels(x: torch.Tensor) -> torch.Tensor:
    """Complex ``(..., H, W)`` to real ``(..., 2, H, W)``."""
    return torch.view_as_real(x).movedim(-1, -3).contiguous()


def channels_to_image(r: torch.Tensor) -> torch.Tensor:
    return torch.view_as_complex(r.movedim(-3, -1).contiguous())


def scaled_net(params: Params, x: torch.Tensor, arch: ScoreArch) -> torch.Tensor:
    """``eps_i * s(x, eps_i)``, which does not depend on the level."""
    batch_shape = x.shape[:-2]
    flat = image_to_channels(x.reshape(-1, *x.shape[-2:]))
    return channels_to_image(score_net(params, flat, arch)).reshape(*batch_shape, *x.shape[-2:])


def score_apply(params: Params, x, level: int, schedule: NoiseSchedule, arch: ScoreArch):
    """``s(x, eps_level) = net(x) / eps_level``; numpy in, numpy out."""
    schedule.check_level(level)
    as_numpy = not isinstance(x, torch.Tensor)
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.complex64)) if as_numpy else x
    if xt.ndim < 2:
        raise DimensionError("score input must be an image (..., H, W)")
    with torch.no_grad():
        out = scaled_net(params, xt, arch) / np.float32(schedule[level])
    return out.numpy() if as_numpy else out


def dsm_loss(params: Params, centers, schedule: NoiseSchedule, arch: ScoreArch,
             stream: RandomStream, levels=None, noise=None) -> torch.Tensor:
    """Multi-scale denoising score matching loss around ``centers``.

    Per element: a uniformly drawn level ``i``, ``x~ = c + eps_i z`` and residual
    ``eps_i s(x~, eps_i) + z``; the loss averages ``|r|^2 / 2`` over the batch.
    ``levels`` and ``noise`` may be injected for testing.
    """
    c = centers if isinstance(centers, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(centers, dtype=np.complex64))
    if c.ndim != 3 or c.shape[0] == 0:
        raise ValueError("centers must be a non-empty (B, H, W) stack")
    n = c.shape[0]
    if levels is None:
        levels = stream.integers(0, len(schedule), n)
    if noise is None:
        noise = stream.gaussian(tuple(c.shape), complex=True)
    eps = torch.from_numpy(schedule.levels[np.asarray(levels)].astype(np.float32)).reshape(n, 1, 1)
    z = torch.from_numpy(np.ascontiguousarray(noise)) if not isinstance(noise, torch.Tensor) else noise
    x_tilde = c + eps * z
    r = scaled_net(params, x_tilde, arch) + z
    return 0.5 * torch.sum(r.real ** 2 + r.imag ** 2) / n


def dsm_loss_selfsup(params, centers, schedule, arch, stream, **kw):
    """DSM around network outputs ``f_theta(y)``."""
    return dsm_loss(params, centers, schedule, arch, stream, **kw)


def dsm_loss_supervised(params, truths, schedule, arch, stream, **kw):
    """DSM around fully sampled ground-truth images."""
    return dsm_loss(params, truths, schedule, arch, stream, **kw)


def _split_float32(values: np.ndarray) -> np.ndarray:
    """Rows of float32 terms whose float64 sum is exactly ``values`` (72 bits >= 53)."""
    rest = np.asarray(values, dtype=np.float64)
    rows = []
    for _ in range(3):
        part = rest.astype(np.float32)
        rows.append(part)
        rest = rest - part.astype(np.float64)
    return np.stack(rows)


def _join_float32(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    out = rows[0].copy()
    for r in rows[1:]:
        out += r
    return out


class NoiseConditionalScoreNet(BaseEstimator):
    """Estimator: ``fit`` on complex images ``(N, H, W)``; ``score(x, level)`` afterwards.

    Sampling uses the EMA weights unless ``use_ema=False`` is passed. With
    ``ema_warmup`` the effective rate at update ``n`` is
    ``min(ema_rate, (1 + n) / (10 + n))`` so that short runs are not dominated
    by the initial weights.
    """

    def __init__(self, filters=32, blocks=4, sigma_min=0.01, sigma_max=16.0, n_levels=32,
                 epochs=100, batch_size=16, lr=1e-4, ema_rate=0.999, ema_warmup=False,
                 seed=0, verbose=False):
        self.filters = filters
        self.blocks = blocks
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.n_levels = n_levels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.ema_rate = ema_rate
        self.ema_warmup = ema_warmup
        self.seed = seed
        self.verbose = verbose

    @property
    def arch(self) -> ScoreArch:
        return ScoreArch(self.filters, self.blocks)

    def fit(self, X):
        X = np.ascontiguousarray(X, dtype=np.complex64)
        if X.ndim != 3 or X.shape[0] == 0:
            raise ValueError("X must be a non-empty (N, H, W) stack of complex images")
        stream = RandomStream(self.seed, 0)
        self.schedule_ = make_schedule(self.sigma_min, self.sigma_max, self.n_levels)
        self.params_ = init_score_params(self.arch, stream)
        self.ema_ = EmaState.of(self.params_, self.ema_rate)
        for t in self.params_.values():
            t.requires_grad_(True)
        opt = make_optimizer(self.params_.values(), lr=self.lr)
        data = torch.from_numpy(X)
        self.history_ = []
        n = X.shape[0]
        n_updates = 0
        for epoch in range(self.epochs):
            order = stream.permutation(n)
            total, steps = 0.0, 0
            for start in range(0, n, self.batch_size):
                idx = torch.from_numpy(order[start:start + self.batch_size])
                loss = dsm_loss(self.params_, data[idx], self.schedule_, self.arch, stream)
                opt.zero_grad()
                loss.backward()
                opt.step()
                n_updates += 1
                rate = self.ema_rate
                if self.ema_warmup:
                    rate = min(rate, (1.0 + n_updates) / (10.0 + n_updates))
                ema_update(self.ema_, self.params_, rate)
                total += loss.item()
                steps += 1
            self.history_.append(total / steps)
            if self.verbose:
                print(f"score epoch {epoch}: loss={self.history_[-1]:.4f}")
        for t in self.params_.values():
            t.requires_grad_(False)
        return self

    def weights(self, use_ema: bool = True) -> Params:
        check_is_fitted(self, "params_")
        return self.ema_.shadow if use_ema else self.params_

    def score(self, x, level: int, use_ema: bool = True):
        return score_apply(self.weights(use_ema), x, level, self.schedule_, self.arch)

    def __call__(self, x, level: int):
        return self.score(x, level)

    def get_weights(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "params_")
        w = {"score.arch": np.array([self.filters, self.blocks], dtype=np.float32),
             "score.schedule": _split_float32(self.schedule_.levels)}
        w.update({f"score.ema.{k}": v.detach().numpy() for k, v in self.ema_.shadow.items()})
        w.update({f"score.raw.{k}": v.detach().numpy() for k, v in self.params_.items()})
        return w

    @classmethod
    def from_weights(cls, weights: dict[str, np.ndarray], **params) -> "NoiseConditionalScoreNet":
        filters, blocks = (int(v) for v in weights["score.arch"])
        levels = _join_float32(weights["score.schedule"])
        model = cls(filters=filters, blocks=blocks, sigma_min=float(levels[0]),
                    sigma_max=float(levels[-1]), n_levels=levels.size, **params)
        model.schedule_ = NoiseSchedule(levels)
        grab = lambda tag: {n[len(tag):]: torch.from_numpy(np.array(v)) for n, v in weights.items() if n.startswith(tag)}
        model.params_ = grab("score.raw.")
        model.ema_ = EmaState(grab("score.ema."), model.ema_rate)
        return model
