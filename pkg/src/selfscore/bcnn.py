"""Self-supervised Bayesian unrolled reconstruction network.

The network alternates an image-domain residual conv module and a k-space
residual conv module, each followed by a hard projection onto the measured
lines, for a fixed number of recursions with shared weights. The last layer
of both modules carries mean-field Gaussian weights trained by minimizing a
variational bound on paired measurements ``(y, y_sub)``: the network sees
``y_sub`` and must explain the zero-filled image of ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive, check_records
from .exceptions import DimensionError
from .mri import CoilSensitivities, MultiCoilKSpace, zero_filled_combine
from .nn import (BayesianWeights, ConvArch, Params, conv_stack, init_conv_params,
                 make_optimizer, sample_bayesian)
from .numerics import RandomStream, fft2c, ifft2c

MODULES = ("img", "ksp")
DATA_TERMS = ("image", "kspace")


@dataclass(frozen=True)
class FNetArch:
    recursions: int = 10
    layers: int = 5
    filters: int = 32
    bayesian_last: bool = True

    def __post_init__(self):
        if self.recursions < 1 or self.layers < 1 or self.filters < 1:
            raise ValueError("recursions, layers and filters must be >= 1")

    def module(self, n_coils: int) -> ConvArch:
        width = 2 * n_coils
        return ConvArch((width,) + (self.filters,) * (self.layers - 1) + (width,))

    def bayesian_names(self) -> list[str]:
        if not self.bayesian_last:
            return []
        last = self.layers - 1
        return [f"{m}.{last}.{p}" for m in MODULES for p in ("weight", "bias")]


def to_channels(z: torch.Tensor) -> torch.Tensor:
    """Complex ``(..., C, H, W)`` to real ``(..., 2C, H, W)``, re/im interleaved per coil."""
    r = torch.view_as_real(z)                       # (..., C, H, W, 2)
    r = r.movedim(-1, -3)                           # (..., C, 2, H, W)
    return r.reshape(*r.shape[:-4], 2 * r.shape[-4], *r.shape[-2:])


def from_channels(r: torch.Tensor) -> torch.Tensor:
    c2 = r.shape[-3]
    r = r.reshape(*r.shape[:-3], c2 // 2, 2, *r.shape[-2:]).movedim(-3, -1)
    return torch.view_as_complex(r.contiguous())


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    a = np.ascontiguousarray(a)
    return torch.from_numpy(a if a.flags.writeable else a.copy())


def f_apply(theta: Params, y_data, lines, maps, arch: FNetArch, return_kspace: bool = False):
    """Run the unrolled network on measured k-space ``y_data`` (zero off ``lines``).

    Returns the coil-combined image, or ``(image, kspace)`` when
    ``return_kspace`` is set, where ``kspace`` is the per-coil k-space right
    after the last data-consistency projection.
    """
    y = _as_tensor(y_data)
    maps = _as_tensor(maps)
    if y.shape[-3:] != maps.shape[-3:]:
        raise DimensionError(f"k-space {tuple(y.shape)} does not match sensitivities {tuple(maps.shape)}")
    keep = 1.0 - _as_tensor(np.asarray(lines, dtype=np.float32)).to(y.real.dtype)
    net = arch.module(y.shape[-3])
    k = y
    x = ifft2c(k)
    for _ in range(arch.recursions):
        x = x + from_channels(conv_stack(theta, to_channels(x), net, "img."))
        k = fft2c(x)
        k = k + from_channels(conv_stack(theta, to_channels(k), net, "ksp."))
        k = keep * k + y
        x = ifft2c(k)
    img = torch.sum(torch.conj(maps) * x, dim=-3)
    return (img, k) if return_kspace else img


@dataclass
class ElboTerms:
    loss: torch.Tensor
    data: torch.Tensor
    kl: torch.Tensor


def elbo_loss(bw: BayesianWeights, det: Params, batch, arch: FNetArch, gamma2: float = 1.0,
              prior_std: float = 1.0, stream: RandomStream | None = None, n_total: int | None = None,
              data_term: str = "image", noise: list[Params] | None = None) -> ElboTerms:
    """Single-sample Monte Carlo estimate of the variational objective on ``batch``.

    ``batch`` holds records with ``.pair`` and ``.sens``. Each element gets its
    own weight draw. With ``n_total`` the KL term is scaled by
    ``len(batch) / n_total`` so that summing over an epoch recovers the
    full-dataset objective once.
    """
    batch = check_records(batch, "batch")
    if data_term not in DATA_TERMS:
        raise ValueError(f"data_term must be one of {DATA_TERMS}")
    # measurements follow the parameter precision (float64 under gradient checks)
    real = next(iter(bw.mean.values())).dtype
    cplx = torch.complex128 if real == torch.float64 else torch.complex64
    as_c = lambda a: _as_tensor(a).to(cplx)
    data = 0.0
    for j, rec in enumerate(batch):
        eps = None if noise is None else noise[j]
        sampled, _ = sample_bayesian(bw, stream, eps)
        theta = {**det, **sampled}
        pair, maps = rec.pair, as_c(rec.sens.maps)
        out = f_apply(theta, as_c(pair.y_sub.data), pair.submask.lines, maps, arch)
        if data_term == "image":
            resid = out - as_c(zero_filled_combine(pair.y, rec.sens))
        else:
            lines = _as_tensor(pair.y.mask.lines.astype(np.float32)).to(real)
            resid = fft2c(out[..., None, :, :] * maps) * lines - as_c(pair.y.data)
        data = data + torch.sum(resid.real ** 2 + resid.imag ** 2)
    data = data / (2.0 * gamma2 ** 2)
    kl = bw.kl_divergence(prior_std)
    weight = 1.0 if n_total is None else len(batch) / n_total
    return ElboTerms(data + weight * kl, data, kl)


class BayesianUnrolledNet(BaseEstimator):
    """Estimator wrapper: ``fit`` on paired records, ``predict``/``sample`` on measurements."""

    def __init__(self, recursions=10, layers=5, filters=32, gamma2=1.0, prior_std=1.0,
                 epochs=200, lr=1e-4, batch_size=1, data_term="image", init_spread=1e-3,
                 last_scale=0.1, seed=0, verbose=False):
        self.recursions = recursions
        self.layers = layers
        self.filters = filters
        self.gamma2 = gamma2
        self.prior_std = prior_std
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.data_term = data_term
        self.init_spread = init_spread
        self.last_scale = last_scale
        self.seed = seed
        self.verbose = verbose

    @property
    def arch(self) -> FNetArch:
        return FNetArch(self.recursions, self.layers, self.filters)

    def _init(self, n_coils: int, stream: RandomStream):
        arch = self.arch
        net = arch.module(n_coils)
        params = {}
        for m in MODULES:
            params.update(init_conv_params(net, stream, f"{m}.", last_scale=self.last_scale))
        bayes = set(arch.bayesian_names())
        self.det_ = {k: v for k, v in params.items() if k not in bayes}
        self.bayes_ = BayesianWeights.from_params({k: params[k] for k in params if k in bayes},
                                                  self.init_spread)
        self.n_coils_ = n_coils

    def fit(self, records):
        records = check_records(records)
        check_positive(self.gamma2, "gamma2")
        check_positive(self.prior_std, "prior_std")
        stream = RandomStream(self.seed, 0)
        self._init(records[0].sens.n_coils, stream)
        tensors = list(self.det_.values()) + self.bayes_.tensors()
        for t in tensors:
            t.requires_grad_(True)
        opt = make_optimizer(tensors, lr=self.lr)
        self.history_ = []
        n = len(records)
        for epoch in range(self.epochs):
            order = stream.permutation(n)
            sums = np.zeros(3)
            for start in range(0, n, self.batch_size):
                batch = [records[i] for i in order[start:start + self.batch_size]]
                terms = elbo_loss(self.bayes_, self.det_, batch, self.arch, self.gamma2,
                                  self.prior_std, stream, n_total=n, data_term=self.data_term)
                opt.zero_grad()
                terms.loss.backward()
                opt.step()
                sums += [terms.loss.item(), terms.data.item(), terms.kl.item()]
            n_batches = -(-n // self.batch_size)
            row = {"epoch": epoch, "loss": sums[0] / n_batches,
                   "data": sums[1] / n_batches, "kl": sums[2] / n_batches}
            self.history_.append(row)
            if self.verbose:
                print(f"bcnn epoch {epoch}: loss={row['loss']:.4f} data={row['data']:.4f} kl={row['kl']:.1f}")
        for t in tensors:
            t.requires_grad_(False)
        return self

    def _theta(self, stream: RandomStream | None) -> Params:
        if stream is None:
            sampled = self.bayes_.mean
        else:
            sampled, _ = sample_bayesian(self.bayes_, stream)
        return {**self.det_, **sampled}

    def predict(self, y: MultiCoilKSpace, sens: CoilSensitivities) -> np.ndarray:
        """Network output at the posterior-mean weights."""
        check_is_fitted(self, "det_")
        with torch.no_grad():
            return f_apply(self._theta(None), y.data, y.mask.lines, sens.maps, self.arch).numpy()

    def sample(self, y: MultiCoilKSpace, sens: CoilSensitivities, n_samples: int,
               stream: RandomStream) -> list[np.ndarray]:
        """``n_samples`` outputs, each under an independent weight draw."""
        check_is_fitted(self, "det_")
        out = []
        with torch.no_grad():
            for _ in range(n_samples):
                out.append(f_apply(self._theta(stream), y.data, y.mask.lines, sens.maps, self.arch).numpy())
        return out

    def get_weights(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "det_")
        w = {"bcnn.arch": np.array([self.recursions, self.layers, self.filters, self.n_coils_], dtype=np.float32)}
        w.update({f"bcnn.det.{k}": v.detach().numpy() for k, v in self.det_.items()})
        w.update({f"bcnn.mu.{k}": v.detach().numpy() for k, v in self.bayes_.mean.items()})
        w.update({f"bcnn.rho.{k}": v.detach().numpy() for k, v in self.bayes_.rho.items()})
        return w

    @classmethod
    def from_weights(cls, weights: dict[str, np.ndarray], **params) -> "BayesianUnrolledNet":
        k, layers, filters, n_coils = (int(v) for v in weights["bcnn.arch"])
        model = cls(recursions=k, layers=layers, filters=filters, **params)
        grab = lambda tag: {n[len(tag):]: torch.from_numpy(np.array(v)) for n, v in weights.items() if n.startswith(tag)}
        model.det_ = grab("bcnn.det.")
        model.bayes_ = BayesianWeights(grab("bcnn.mu."), grab("bcnn.rho."))
        model.n_coils_ = n_coils
        return model


def sample_f_of_y(model: BayesianUnrolledNet, y: MultiCoilKSpace, sens: CoilSensitivities,
                  n_samples: int, stream: RandomStream) -> list[np.ndarray]:
    """Perturbation centers for score training: ``f_theta(y)`` on the full measurement."""
    return model.sample(y, sens, n_samples, stream)
