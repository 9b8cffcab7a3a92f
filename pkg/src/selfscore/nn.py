"""Small functional network substrate on top of torch.

Networks are plain ``dict[str, Tensor]`` parameter maps fed to pure functions,
which keeps weight sharing across unrolled iterations, Bayesian weight
substitution, and finite-difference checking straightforward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import DimensionError
from .numerics import RandomStream

Params = dict[str, torch.Tensor]


@dataclass(frozen=True)
class ConvArch:
    """Layer widths ``(in, hidden..., out)`` of a same-padded conv stack."""

    widths: tuple[int, ...]
    kernel: int = 3

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("a conv stack needs at least input and output widths")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def shapes(self, prefix: str = "") -> dict[str, tuple[int, ...]]:
        out = {}
        for i, (cin, cout) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out[f"{prefix}{i}.weight"] = (cout, cin, self.kernel, self.kernel)
            out[f"{prefix}{i}.bias"] = (cout,)
        return out


def init_conv_params(arch: ConvArch, stream: RandomStream, prefix: str = "",
                     last_scale: float = 1.0) -> Params:
    """He-normal weights and zero biases; the final layer is scaled by ``last_scale``."""
    params = {}
    for i, (name, shape) in enumerate(arch.shapes(prefix).items()):
        if name.endswith(".bias"):
            params[name] = torch.zeros(shape)
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in)
        if i // 2 == arch.n_layers - 1:
            std *= last_scale
        params[name] = torch.from_numpy(stream.gaussian(shape) * np.float32(std))
    return params


def conv_stack(params: Params, x: torch.Tensor, arch: ConvArch, prefix: str = "",
               linear: bool = False) -> torch.Tensor:
    """ReLU between layers, linear output layer; ``linear=True`` drops all ReLUs."""
    if x.shape[-3] != arch.widths[0]:
        raise DimensionError(f"expected {arch.widths[0]} input channels, got {x.shape[-3]}")
    pad = arch.kernel // 2
    for i in range(arch.n_layers):
        x = F.conv2d(x, params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"], padding=pad)
        if i < arch.n_layers - 1 and not linear:
            x = F.relu(x)
    return x


@dataclass
class ForwardCache:
    inputs: torch.Tensor
    params: Params
    output: torch.Tensor
    consumed: bool = False


def conv_net_forward(params: Params, x: torch.Tensor, arch: ConvArch, prefix: str = "",
                     linear: bool = False) -> tuple[torch.Tensor, ForwardCache]:
    leaf_x = x.detach().requires_grad_(True)
    leaf_p = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    with torch.enable_grad():
        out = conv_stack(leaf_p, leaf_x, arch, prefix, linear)
    return out.detach(), ForwardCache(leaf_x, leaf_p, out)


def conv_net_backward(cache: ForwardCache, cotangent: torch.Tensor) -> tuple[Params, torch.Tensor]:
    """Vector-Jacobian product of a cached forward pass; a cache is single-use."""
    if cache.consumed:
        raise RuntimeError("stale forward cache: each cache supports one backward pass")
    names = list(cache.params)
    grads = torch.autograd.grad(cache.output, [cache.inputs] + [cache.params[n] for n in names],
                                cotangent, allow_unused=True)
    cache.consumed = True
    x_bar = grads[0]
    out = {}
    for n, g in zip(names, grads[1:]):
        out[n] = torch.zeros_like(cache.params[n]) if g is None else g
    return out, x_bar


class BayesianWeights:
    """Mean-field Gaussian weights, spread ``softplus(rho)``."""

    def __init__(self, mean: Params, rho: Params):
        if mean.keys() != rho.keys():
            raise ValueError("mean and rho must name the same tensors")
        for k in mean:
            if mean[k].shape != rho[k].shape:
                raise DimensionError(f"shape mismatch for {k}")
        self.mean = mean
        self.rho = rho

    @classmethod
    def from_params(cls, params: Params, init_spread: float) -> "BayesianWeights":
        rho0 = float(np.log(np.expm1(init_spread)))
        return cls({k: v.clone() for k, v in params.items()},
                   {k: torch.full_like(v, rho0) for k, v in params.items()})

    @property
    def sigma(self) -> Params:
        return {k: F.softplus(r) for k, r in self.rho.items()}

    def tensors(self) -> list[torch.Tensor]:
        return [self.mean[k] for k in self.mean] + [self.rho[k] for k in self.rho]

    def requires_grad_(self, flag: bool = True) -> "BayesianWeights":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def kl_divergence(self, prior_std: float) -> torch.Tensor:
        """Exact KL(q || N(0, prior_std^2 I)), summed over all weights."""
        total = 0.0
        for k in self.mean:
            mu, sigma = self.mean[k], F.softplus(self.rho[k])
            total = total + kl_gaussian(mu, sigma, prior_std)
        return total


def kl_gaussian(mu, sigma, prior_std):
    """Closed-form KL between diagonal Gaussians, prior centered at zero.

    Works elementwise on numpy or torch inputs and returns the sum.
    """
    lib = torch if isinstance(sigma, torch.Tensor) else np
    var_ratio = (mu ** 2 + sigma ** 2) / (2.0 * prior_std ** 2)
    return (var_ratio - lib.log(sigma / prior_std) - 0.5).sum()


def sample_bayesian(bw: BayesianWeights, stream: RandomStream | None = None,
                    noise: Params | None = None) -> tuple[Params, Params]:
    """Reparameterized draw ``theta = mu + sigma * eps``; returns ``(theta, eps)``."""
    if noise is None:
        if stream is None:
            raise ValueError("need a stream or explicit noise")
        noise = {k: torch.from_numpy(stream.gaussian(tuple(v.shape))).to(v.dtype) for k, v in bw.mean.items()}
    sigma = bw.sigma
    theta = {k: bw.mean[k] + sigma[k] * noise[k] for k in bw.mean}
    return theta, noise


def make_optimizer(tensors, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(list(tensors), lr=lr, betas=betas, eps=eps)


@dataclass
class EmaState:
    shadow: Params
    rate: float = 0.999

    @classmethod
    def of(cls, params: Params, rate: float = 0.999) -> "EmaState":
        return cls({k: v.detach().clone() for k, v in params.items()}, rate)


def ema_update(ema: EmaState, params: Params, rate: float | None = None) -> EmaState:
    """``shadow <- rate * shadow + (1 - rate) * params`` in place; returns ``ema``.

    ``rate`` overrides ``ema.rate`` for this one update.
    """
    rate = ema.rate if rate is None else rate
    with torch.no_grad():
        for k, v in params.items():
            if ema.shadow[k].shape != v.shape:
                raise DimensionError(f"EMA shadow shape mismatch for {k}")
            if rate == 1.0:
                continue
            ema.shadow[k] = rate * ema.shadow[k] + (1.0 - rate) * v.detach()
    return ema


def finite_difference_check(loss_fn: Callable[[Params], torch.Tensor], params: Params,
                            step: float = 1e-4, max_entries: int | None = 64,
                            stream: RandomStream | None = None) -> dict[str, float]:
    """Relative error between autograd and central differences, per tensor.

    Runs in float64. For tensors with more than ``max_entries`` elements a
    random subset of entries is probed.
    """
    p64 = {k: v.detach().double().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(p64)
    grads = torch.autograd.grad(loss, list(p64.values()), allow_unused=True)
    stream = stream or RandomStream(0, 0)
    errors = {}
    for (name, tensor), g in zip(p64.items(), grads):
        g = torch.zeros_like(tensor) if g is None else g
        flat = tensor.detach().reshape(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort(stream.choice(idx.size, max_entries))
        numeric = np.empty(idx.size)
        for j, e in enumerate(idx):
            vals = []
            for sgn in (1.0, -1.0):
                probe = {k: v.detach() for k, v in p64.items()}
                bumped = flat.clone()
                bumped[e] += sgn * step
                probe[name] = bumped.reshape(tensor.shape)
                with torch.no_grad():
                    vals.append(float(loss_fn(probe)))
            numeric[j] = (vals[0] - vals[1]) / (2 * step)
        analytic = g.detach().reshape(-1).numpy()[idx]
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
        errors[name] = float(np.linalg.norm(analytic - numeric) / scale)
    return errors
