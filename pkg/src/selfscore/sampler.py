"""Annealed Langevin MCMC, unconditional and conditioned on k-space data."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mri import CoilSensitivities, MultiCoilKSpace, apply_A, apply_Ah, zero_filled_combine
from .numerics import RandomStream
from .score import NoiseSchedule

SIGNS = {"gradient-correct": -1.0, "as-printed": 1.0}
INITS = ("gaussian", "zero-filled")
# Per-step size at the smallest scale used by noise-conditional score samplers.
REFERENCE_STEP = 2e-5
_CHUNK = 1024

ScoreFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    """Langevin settings.

    ``step_scale`` is the step at the largest scale. ``None`` picks
    ``REFERENCE_STEP * (sigma_max / sigma_min) ** 2`` so the smallest scale
    gets step ``REFERENCE_STEP``.
    """

    step_scale: float | None = None
    n_steps: int = 5
    noise_scale: float = 0.01
    data_sign: str = "gradient-correct"
    init: str = "gaussian"
    final_denoise: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.step_scale is not None and not self.step_scale > 0:
            raise ValueError("step_scale must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.data_sign not in SIGNS:
            raise ValueError(f"data_sign must be one of {tuple(SIGNS)}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")

    def resolved_step_scale(self, schedule: NoiseSchedule) -> float:
        if self.step_scale is not None:
            return float(self.step_scale)
        return REFERENCE_STEP * (schedule.sigma_max / schedule.sigma_min) ** 2


def step_size(cfg: SamplerConfig, schedule: NoiseSchedule, i: int) -> float:
    """``step_scale * eps_i^2 / eps_max^2``."""
    schedule.check_level(i)
    return float(cfg.resolved_step_scale(schedule) * schedule[i] ** 2 / schedule.sigma_max ** 2)


@dataclass
class SampleTrace:
    final: np.ndarray
    snapshots: list[np.ndarray] = field(default_factory=list)
    residuals: list[tuple[int, int, float]] = field(default_factory=list)

    def residual_csv(self) -> str:
        buf = io.StringIO()
        buf.write("level,step,residual\n")
        for level, step, r in self.residuals:
            buf.write(f"{level},{step},{r:.9g}\n")
        return buf.getvalue()


def _as_score_fn(score) -> ScoreFn:
    if hasattr(score, "score"):
        return score.score
    if callable(score):
        return score
    raise TypeError("score source must be callable as score(x, level)")


def _level_noise(stream: RandomStream, n_steps: int, shape, complex: bool):
    """Yields the step noise of one level, drawn in fixed-size chunks."""
    dtype = np.float32 if complex else np.float64
    for start in range(0, n_steps, _CHUNK):
        block = stream.gaussian((min(_CHUNK, n_steps - start),) + tuple(shape), complex=complex, dtype=dtype)
        yield from block


def _anneal(score_fn: ScoreFn, x: np.ndarray, schedule: NoiseSchedule, cfg: SamplerConfig,
            stream: RandomStream, data_term=None, noise=None, keep_snapshots=False,
            callback=None, trace: SampleTrace | None = None) -> SampleTrace:
    trace = trace or SampleTrace(x)
    is_complex = np.iscomplexobj(x)
    for i in reversed(range(len(schedule))):
        eta = step_size(cfg, schedule, i)
        root = math.sqrt(eta)
        zs = iter(noise[i]) if noise is not None else _level_noise(stream, cfg.n_steps, x.shape, is_complex)
        for t in range(cfg.n_steps):
            z = next(zs)
            s = score_fn(x, i)
            if data_term is not None:
                s = s + data_term(x, i, t, trace)
            x = x + (eta / 2) * s + root * z
            if callback is not None:
                callback(i, t, x)
        if keep_snapshots:
            trace.snapshots.append(x.copy())
    if cfg.final_denoise:
        x = x + schedule.sigma_min ** 2 * score_fn(x, 0)
    trace.final = x
    return trace


def langevin_uncond(score, schedule: NoiseSchedule, cfg: SamplerConfig, shape, complex: bool = True,
                    stream: RandomStream | None = None, x_init=None, noise=None,
                    keep_snapshots: bool = False, callback=None) -> SampleTrace:
    """Annealed Langevin over all levels, largest to smallest, ``n_steps`` each.

    ``noise`` (indexable by level, then step) replaces the drawn step noise.
    """
    stream = stream or RandomStream(cfg.seed, 0)
    if x_init is None:
        if cfg.init != "gaussian":
            raise ValueError("unconditional sampling only supports gaussian initialization")
        dtype = np.float32 if complex else np.float64
        x_init = schedule.sigma_max * stream.gaussian(tuple(shape), complex=complex, dtype=dtype)
    x = np.array(x_init)
    return _anneal(_as_score_fn(score), x, schedule, cfg, stream, None, noise, keep_snapshots, callback)


def langevin_cond(score, y: MultiCoilKSpace, sens: CoilSensitivities, schedule: NoiseSchedule,
                  cfg: SamplerConfig, stream: RandomStream | None = None, x_init=None, noise=None,
                  keep_snapshots: bool = False, log_residuals: bool = True, callback=None) -> SampleTrace:
    """Annealed Langevin on the posterior of ``y = A x + n``.

    Each step adds ``sign * A^*(A x - y) / (gamma^2 + eps_i^2)`` to the prior
    score, with ``sign = -1`` for the log-likelihood gradient.
    """
    stream = stream or RandomStream(cfg.seed, 0)
    if x_init is None:
        if cfg.init == "gaussian":
            x_init = schedule.sigma_max * stream.gaussian(tuple(sens.grid), complex=True)
        else:
            x_init = zero_filled_combine(y, sens)
    sign = SIGNS[cfg.data_sign]
    gamma2 = cfg.noise_scale ** 2

    def data_term(x, i, t, trace):
        resid = apply_A(x, sens, y.mask) - y.data
        if log_residuals:
            trace.residuals.append((i, t, float(np.linalg.norm(resid))))
        return sign * apply_Ah(resid, sens, y.mask) / float(gamma2 + schedule[i] ** 2)

    x = np.array(x_init, dtype=np.complex64)
    return _anneal(_as_score_fn(score), x, schedule, cfg, stream, data_term, noise,
                   keep_snapshots, callback)


def reconstruct(score, y: MultiCoilKSpace, sens: CoilSensitivities, schedule: NoiseSchedule,
                cfg: SamplerConfig, n_samples: int = 1) -> tuple[np.ndarray, list[SampleTrace]]:
    """Mean of ``n_samples`` conditional chains; chain ``j`` uses stream id ``j``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    traces = [langevin_cond(score, y, sens, schedule, cfg, RandomStream(cfg.seed, j))
              for j in range(n_samples)]
    if n_samples == 1:
        return traces[0].final, traces
    return np.mean([t.final for t in traces], axis=0).astype(np.complex64), traces
