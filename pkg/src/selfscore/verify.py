"""Oracle checks shared by the ``verify`` command and the acceptance tests.

Every check returns a :class:`Check`; ``run_all`` runs the whole suite.
Seeds are fixed, so each check is deterministic.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mri import CoilSensitivities, MultiCoilKSpace, SamplingMask, apply_A, apply_Ah, gen_mask
from .nn import kl_gaussian
from .numerics import RandomStream, fft2c, ifft2c
from .oracles import (GaussianMixture, GaussianPrior, affine_dsm_oracle, analytic_score,
                      gaussian_posterior, mc_kl)
from .sampler import SamplerConfig, langevin_cond, langevin_uncond, reconstruct
from .score import NoiseConditionalScoreNet, NoiseSchedule, make_schedule


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f} s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    start = time.perf_counter()
    ok, detail = fn()
    return Check(name, bool(ok), detail, time.perf_counter() - start)


def _random_maps(c: int, n: int, stream: RandomStream) -> CoilSensitivities:
    maps = stream.gaussian((c, n, n), complex=True)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilSensitivities(maps.astype(np.complex64))


def _vdot(a, b) -> complex:
    return complex(np.vdot(np.asarray(a, np.complex128).ravel(), np.asarray(b, np.complex128).ravel()))


def check_adjoint(n_pairs: int = 50, seed: int = 0) -> Check:
    """``<Ax, y> = <x, A^*y>`` on random operators of sizes 8, 16, 32 with 1 or 4 coils."""
    def run():
        stream = RandomStream(seed, 0)
        worst = 0.0
        configs = [(n, c) for n in (8, 16, 32) for c in (1, 4)]
        for j in range(n_pairs):
            n, c = configs[j % len(configs)]
            sens = _random_maps(c, n, stream)
            mask = gen_mask("random", n, 2, 2, stream)
            x = stream.gaussian((n, n), complex=True)
            y = mask.project(stream.gaussian((c, n, n), complex=True))
            ax = apply_A(x, sens, mask)
            gap = abs(_vdot(y, ax) - _vdot(apply_Ah(y, sens, mask), x))
            worst = max(worst, gap / (np.linalg.norm(ax) * np.linalg.norm(y)))
        return worst <= 1e-5, f"max relative gap {worst:.2e} over {n_pairs} pairs (tol 1e-5)"
    return _timed("adjointness", run)


def check_fft(n_inputs: int = 100, seed: int = 1) -> Check:
    def run():
        stream = RandomStream(seed, 0)
        worst_norm = worst_inv = 0.0
        for j in range(n_inputs):
            n = (8, 16, 32)[j % 3]
            x = stream.gaussian((n, n), complex=True)
            k = fft2c(x)
            nx = np.linalg.norm(x)
            worst_norm = max(worst_norm, abs(np.linalg.norm(k) - nx) / nx)
            worst_inv = max(worst_inv, np.linalg.norm(ifft2c(k) - x) / nx)
        ok = worst_norm <= 1e-6 and worst_inv <= 1e-6
        return ok, f"norm error {worst_norm:.2e}, inversion error {worst_inv:.2e} (tol 1e-6)"
    return _timed("fft unitarity", run)


def check_kl(n_configs: int = 20, n: int = 10 ** 6, seed: int = 2) -> Check:
    """Closed-form Gaussian KL against the Monte Carlo estimate for random scalar configs."""
    def run():
        stream = RandomStream(seed, 0)
        worst = 0.0
        for _ in range(n_configs):
            mu = float(stream.uniform(low=-1.0, high=1.0))
            sd = float(stream.uniform(low=0.05, high=0.2))
            prior = float(stream.uniform(low=0.5, high=2.0))
            exact = float(kl_gaussian(np.array([mu]), np.array([sd]), prior))
            est = mc_kl(mu, sd, prior, n, stream)
            worst = max(worst, abs(est - exact) / exact)
        return worst <= 0.01, f"max relative error {worst:.2e} over {n_configs} configs (tol 1e-2)"
    return _timed("kl closed form", run)


def check_affine_dsm(eps: float = 0.1, n: int = 10 ** 6, seed: int = 3) -> Check:
    def run():
        fit = affine_dsm_oracle(eps, n, RandomStream(seed, 0))
        target = -1.0 / (1.0 + eps ** 2)
        gap = abs(fit.a_dsm - fit.a_esm)
        off = max(abs(fit.a_dsm - target), abs(fit.a_esm - target))
        ok = gap <= 1e-3 and off <= 2e-3
        return ok, (f"a_dsm {fit.a_dsm:.6f}, a_esm {fit.a_esm:.6f}, |diff| {gap:.1e} (tol 1e-3), "
                    f"max |a + 1/(1+eps^2)| {off:.1e} (tol 2e-3)")
    return _timed("affine dsm = esm", run)


def check_langevin_uncond(eta: float = 0.01, n_steps: int = 200_000, burn_in: int = 1_000,
                          n_chains: int = 64, seed: int = 4) -> Check:
    """``s(x) = -x`` on one level: stationary mean 0 and variance ``1 / (1 - eta / 4)``.

    The moments pool ``n_chains`` independent chains, each with ``n_steps``
    post-burn-in steps.
    """
    def run():
        sums = np.zeros(3)

        def accumulate(level, t, x):
            if t >= burn_in:
                sums[:] += (x.size, float(np.sum(x)), float(np.sum(x * x)))

        cfg = SamplerConfig(step_scale=eta, n_steps=burn_in + n_steps, seed=seed)
        langevin_uncond(lambda x, i: -x, NoiseSchedule([1.0]), cfg, (n_chains,), complex=False,
                        callback=accumulate)
        mean = sums[1] / sums[0]
        var = sums[2] / sums[0] - mean ** 2
        target = 1.0 / (1.0 - eta / 4)
        ok = abs(mean) <= 0.02 and abs(var - target) <= 0.02
        return ok, f"mean {mean:+.4f} (tol 0.02), variance {var:.4f} vs {target:.4f} (tol 0.02)"
    return _timed("langevin stationary moments", run)


def _hand_transcript(x0, y, maps, lines, levels, step_scale, gamma, noise, score):
    """Two levels, two steps each, stepped by hand from the update rule."""
    x = x0
    levels = [float(v) for v in levels]
    eps_max = levels[-1]
    for i in (1, 0):
        eta = step_scale * levels[i] ** 2 / eps_max ** 2
        for t in range(2):
            s = score(x, i)
            resid = fft2c(x[..., None, :, :] * maps) * lines - y
            grad = np.sum(np.conj(maps) * ifft2c(resid * lines), axis=-3)
            s = s + -1.0 * grad / (gamma ** 2 + levels[i] ** 2)
            x = x + (eta / 2) * s + math.sqrt(eta) * noise[i][t]
    return x


def check_transcript(seed: int = 5) -> Check:
    def run():
        stream = RandomStream(seed, 0)
        n, c = 8, 2
        sens = _random_maps(c, n, stream)
        mask = gen_mask("uniform", n, 2, 2, stream)
        schedule = make_schedule(0.1, 1.0, 2)
        prior = GaussianPrior(0.0, 1.0)
        score = lambda x, i: analytic_score(prior, x, float(schedule[i]))
        x0 = stream.gaussian((n, n), complex=True)
        y = mask.project(stream.gaussian((c, n, n), complex=True))
        noise = {i: [stream.gaussian((n, n), complex=True) for _ in range(2)] for i in (0, 1)}
        meas = MultiCoilKSpace(y, mask, 0.3)
        cfg = SamplerConfig(step_scale=0.5, n_steps=2, noise_scale=0.3)
        got = langevin_cond(score, meas, sens, schedule, cfg, x_init=x0, noise=noise).final
        want = _hand_transcript(x0.astype(np.complex64), y, sens.maps, mask.lines, schedule.levels,
                                0.5, 0.3, noise, score)
        same = got.dtype == want.dtype == np.complex64 and np.array_equal(got, want)
        return same, "bit-identical" if same else f"max deviation {np.max(np.abs(got - want)):.3e}"
    return _timed("algorithm transcript", run)


def gaussian_oracle_problem(n: int = 16, gamma: float = 0.2, prior_var: float = 1.0, seed: int = 6):
    """Single coil, unit sensitivity, full mask; returns ``(prior, y, sens, truth)``."""
    stream = RandomStream(seed, 0)
    prior = GaussianPrior(0.0, prior_var)
    truth = math.sqrt(prior_var) * stream.gaussian((n, n), complex=True)
    sens = CoilSensitivities(np.ones((1, n, n), dtype=np.complex64))
    mask = SamplingMask(np.ones(n, dtype=bool), "full")
    data = apply_A(truth, sens, mask) + gamma * stream.gaussian((1, n, n), complex=True)
    return prior, MultiCoilKSpace(data.astype(np.complex64), mask, gamma), sens, truth


def posterior_nmse(sign: str, n_chains: int = 64, schedule: NoiseSchedule | None = None,
                   step_scale: float | None = None, n_steps: int = 5) -> float:
    prior, y, sens, _ = gaussian_oracle_problem()
    schedule = schedule or make_schedule(0.01, 16.0, 32)
    step_scale = schedule.sigma_max ** 2 if step_scale is None else step_scale
    exact, _ = gaussian_posterior(prior, y.data, sens.maps, y.mask.lines, y.noise_scale)
    cfg = SamplerConfig(step_scale=step_scale, n_steps=n_steps, noise_scale=y.noise_scale,
                        data_sign=sign, seed=7)
    score = lambda x, i: analytic_score(prior, x, schedule[i])
    with np.errstate(all="ignore"):
        est, _ = reconstruct(score, y, sens, schedule, cfg, n_chains)
        err = np.sum(np.abs(est - exact) ** 2) / np.sum(np.abs(exact) ** 2)
    return float(err) if np.isfinite(err) else math.inf


def check_sign(seed: int = 6) -> Check:
    def run():
        good = posterior_nmse("gradient-correct")
        bad = posterior_nmse("as-printed")
        ok = good <= 1e-2 and bad > 1e-2
        return ok, f"posterior-mean NMSE {good:.2e} gradient-correct (tol 1e-2), {bad:.2e} as printed (must exceed 1e-2)"
    return _timed("sign discrimination", run)


TOY_MIXTURE = GaussianMixture(means=[[-1.5, 0.0], [1.5, 0.5]], stds=[0.4, 0.4], weights=[0.5, 0.5])


def check_mixture_score(n_train: int = 4096, epochs: int = 150, seed: int = 8) -> Check:
    """Learned score on a 2D mixture, each point stored as a 1x1 complex image.

    For every level the cosine similarity between learned and analytic
    perturbed scores is taken over grid points where the perturbed density
    exceeds 1e-3; the check needs the smallest of them to reach 0.95.
    """
    def run():
        stream = RandomStream(seed, 0)
        pts = TOY_MIXTURE.sample(n_train, stream)
        X = (pts[:, 0] + 1j * pts[:, 1]).astype(np.complex64).reshape(-1, 1, 1)
        model = NoiseConditionalScoreNet(filters=32, blocks=2, sigma_min=0.1, sigma_max=1.0, n_levels=4,
                                         epochs=epochs, batch_size=128, lr=3e-3, ema_warmup=True, seed=seed)
        model.fit(X)
        g = np.linspace(-4.0, 4.0, 81)
        gx, gy = np.meshgrid(g, g, indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        z = (grid[:, 0] + 1j * grid[:, 1]).astype(np.complex64).reshape(-1, 1, 1)
        cosines = []
        for i in range(len(model.schedule_)):
            eps = model.schedule_[i]
            keep = np.exp(TOY_MIXTURE.log_density(grid, eps)) > 1e-3
            want = analytic_score(TOY_MIXTURE, grid[keep], eps)
            got = model.score(z[keep], i).reshape(-1)
            got = np.stack([got.real, got.imag], axis=1).astype(np.float64)
            cosines.append(float(np.sum(got * want) / (np.linalg.norm(got) * np.linalg.norm(want))))
        worst = min(cosines)
        return worst >= 0.95, "cosine per level " + ", ".join(f"{c:.4f}" for c in cosines) + " (tol 0.95)"
    return _timed("mixture score", run)


ORACLE_CHECKS = (check_adjoint, check_fft, check_kl, check_affine_dsm, check_langevin_uncond,
                 check_transcript, check_sign, check_mixture_score)


def run_all(log: Callable[[str], None] | None = None) -> list[Check]:
    results = []
    for fn in ORACLE_CHECKS:
        res = fn()
        if log is not None:
            log(res.line())
        results.append(res)
    return results
