"""Closed-form and brute-force references for the Gaussian test cases.

Nothing here calls into the operator, network or sampler modules; the
forward model is re-derived from the raw Fourier transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import logsumexp, ndtri
from scipy.stats import qmc

from .exceptions import ConvergenceError
from .numerics import RandomStream, fft2c, ifft2c


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray | float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("prior variance must be positive")


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic mixture in ``d`` real dimensions; ``means`` is ``(K, d)``."""

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=np.float64).reshape(-1))
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "weights", w / w.sum())

    def log_density(self, x, eps: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        var = self.stds ** 2 + eps ** 2
        d = self.means.shape[1]
        sq = np.sum((x[..., None, :] - self.means) ** 2, axis=-1)
        logc = np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
        return logsumexp(logc, axis=-1)

    def sample(self, n: int, stream: RandomStream) -> np.ndarray:
        comp = stream.choice(len(self.weights), n, p=self.weights, replace=True)
        z = stream.gaussian((n, self.means.shape[1]), dtype=np.float64)
        return self.means[comp] + self.stds[comp, None] * z


def analytic_score(prior, x, eps: float = 0.0) -> np.ndarray:
    """Exact gradient of the log density of ``prior`` convolved with ``N(0, eps^2 I)``.

    Mixture scores take real ``(..., d)`` points; complex input is read as
    2D points ``(re, im)`` when ``d == 2`` and the score is returned complex.
    """
    if isinstance(prior, GaussianPrior):
        return -(np.asarray(x) - prior.mean) / (prior.variance + eps ** 2)
    if isinstance(prior, GaussianMixture):
        as_complex = np.iscomplexobj(x)
        pts = np.stack([np.real(x), np.imag(x)], axis=-1) if as_complex else np.asarray(x, dtype=np.float64)
        if as_complex and prior.means.shape[1] != 2:
            raise ValueError("complex points need a 2D mixture")
        var = prior.stds ** 2 + eps ** 2
        diff = pts[..., None, :] - prior.means                 # (..., K, d)
        d = prior.means.shape[1]
        logc = np.log(prior.weights) - 0.5 * d * np.log(var) - 0.5 * np.sum(diff ** 2, -1) / var
        resp = np.exp(logc - logsumexp(logc, axis=-1, keepdims=True))
        score = -np.sum(resp[..., None] * diff / var[:, None], axis=-2)
        return score[..., 0] + 1j * score[..., 1] if as_complex else score
    raise TypeError(f"unsupported prior {type(prior).__name__}")


def _normal_operator(maps: np.ndarray, lines: np.ndarray):
    maps = maps.astype(np.complex128)
    keep = lines.astype(np.float64)

    def gram(x):
        k = fft2c(maps * x[None]) * keep
        return np.sum(np.conj(maps) * ifft2c(k), axis=0)

    def adjoint(y):
        return np.sum(np.conj(maps) * ifft2c(y.astype(np.complex128) * keep), axis=0)

    return gram, adjoint


def gaussian_posterior(prior: GaussianPrior, y, maps, lines, gamma: float, tol: float = 1e-10):
    """Posterior mean for ``y = P F S x + n`` under a Gaussian prior.

    Solves ``(A^*A / gamma^2 + I / var) m = A^* y / gamma^2 + mean / var`` by
    conjugate gradients. Returns ``(mean, precision)`` with ``precision`` a
    scipy ``LinearOperator`` on flattened images.
    """
    maps = np.asarray(maps)
    lines = np.asarray(lines, dtype=bool)
    shape = maps.shape[-2:]
    n = shape[0] * shape[1]
    gram, adjoint = _normal_operator(maps, lines)
    g2, var = gamma ** 2, prior.variance

    def matvec(v):
        x = v.reshape(shape)
        return (gram(x) / g2 + x / var).reshape(-1)

    precision = LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=np.complex128)
    prior_mean = np.broadcast_to(np.asarray(prior.mean, dtype=np.complex128), shape)
    rhs = (adjoint(np.asarray(y)) / g2 + prior_mean / var).reshape(-1)
    if not np.any(rhs):
        return np.zeros(shape, dtype=np.complex128), precision
    sol, info = cg(precision, rhs, rtol=tol, atol=0.0, maxiter=10 * n)
    resid = np.linalg.norm(matvec(sol) - rhs) / np.linalg.norm(rhs)
    if info != 0 or resid > 10 * tol:
        raise ConvergenceError(f"CG stopped with relative residual {resid:.3e} (info={info})")
    return sol.reshape(shape), precision


def mc_kl(q_mean, q_std, prior_std: float, n: int, stream: RandomStream,
          prior_mean: float = 0.0, chunk: int = 1 << 18) -> float:
    """Monte Carlo ``E_q[log q - log p]`` for diagonal Gaussians, from ``n`` draws."""
    mu = np.atleast_1d(np.asarray(q_mean, dtype=np.float64))
    sd = np.atleast_1d(np.asarray(q_std, dtype=np.float64))
    total, done = 0.0, 0
    while done < n:
        m = min(chunk, n - done)
        z = stream.gaussian((m, mu.size), dtype=np.float64)
        theta = mu + sd * z
        log_q = -0.5 * z ** 2 - np.log(sd)
        log_p = -0.5 * ((theta - prior_mean) / prior_std) ** 2 - math.log(prior_std)
        total += float(np.sum(log_q - log_p))
        done += m
    return total / n


@dataclass(frozen=True)
class AffineScoreFit:
    a_dsm: float
    b_dsm: float
    a_esm: float
    b_esm: float
    se_a_dsm: float
    se_b_dsm: float
    n: int


def _lstsq(design: np.ndarray, target: np.ndarray):
    gram = design.T @ design
    if np.linalg.cond(gram) > 1e12:
        raise np.linalg.LinAlgError("degenerate normal equations")
    coef = np.linalg.solve(gram, design.T @ target)
    resid = target - design @ coef
    dof = max(target.size - design.shape[1], 1)
    cov = np.linalg.inv(gram) * (resid @ resid) / dof
    return coef, np.sqrt(np.diag(cov))


def affine_dsm_oracle(eps: float, n: int, stream: RandomStream, data_ppf=ndtri,
                      perturbed_score=None, sampling: str = "sobol") -> AffineScoreFit:
    """Fit ``s(x) = a x + b`` by denoising and by explicit score matching.

    Data ``x`` come from the quantile function ``data_ppf``; ``x~ = x + eps z``.
    The denoising fit minimizes ``E |eps s(x~) + z|^2``; the explicit fit
    minimizes ``E |s(x~) - grad log q_eps(x~)|^2`` with ``perturbed_score``
    (defaults to the standard normal's ``-x / (1 + eps^2)``), both over the
    same ``x~``.

    ``sampling="sobol"`` draws ``(x, z)`` from a scrambled Sobol sequence and
    pairs every ``z`` with ``-z`` (at least ``n`` points in total);
    ``"iid"`` uses ``n`` plain pseudo-random draws.
    """
    if perturbed_score is None:
        perturbed_score = lambda xt, e: -xt / (1.0 + e ** 2)
    if sampling == "sobol":
        m = max(1, math.ceil(math.log2(max(n // 2, 1))))
        seed = int(stream.integers(0, 2 ** 62))
        u = qmc.Sobol(d=2, scramble=True, seed=seed).random_base2(m)
        x = data_ppf(u[:, 0])
        z = ndtri(u[:, 1])
        x, z = np.concatenate([x, x]), np.concatenate([z, -z])
    elif sampling == "iid":
        x = data_ppf(stream.uniform(n))
        z = stream.gaussian(n, dtype=np.float64)
    else:
        raise ValueError("sampling must be 'sobol' or 'iid'")
    x_tilde = x + eps * z
    design = np.stack([x_tilde, np.ones_like(x_tilde)], axis=1)
    (a_dsm, b_dsm), (se_a, se_b) = _lstsq(eps * design, -z)
    (a_esm, b_esm), _ = _lstsq(design, perturbed_score(x_tilde, eps))
    return AffineScoreFit(float(a_dsm), float(b_dsm), float(a_esm), float(b_esm),
                          float(se_a), float(se_b), int(x.size))
