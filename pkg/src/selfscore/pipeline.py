"""End-to-end desk experiment: data, BCNN, score training, reconstruction, metrics.

Each stage takes a :class:`~selfscore.io.RunConfig` and an integer seed and is
deterministic given both. Stream ids are fixed per stage so that stages can
be rerun in isolation (for instance from the command line) with identical
results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bcnn import BayesianUnrolledNet
from .io import RunConfig
from .metrics import MetricsReport, evaluate
from .mri import MultiCoilKSpace, CoilSensitivities, ssos, zero_filled_combine
from .numerics import RandomStream
from .phantom import DatasetRecord, PhantomSpec, build_dataset
from .sampler import SamplerConfig, reconstruct
from .score import NoiseConditionalScoreNet

# Stream ids used by the stages below (datasets use ids 0..n_train+n_test-1).
CENTER_STREAM = 1 << 20


def make_records(cfg: RunConfig, seed: int, split: str = "train", mask_kind: str | None = None) -> list[DatasetRecord]:
    """``train`` or ``test`` records; test ids follow the training ids."""
    d = cfg.data
    if split == "train":
        n, first = d.n_train, 0
        kind = mask_kind or d.mask_kind
    elif split == "test":
        n, first = d.n_test, d.n_train
        kind = mask_kind or d.test_mask_kind
    else:
        raise ValueError("split must be 'train' or 'test'")
    return build_dataset(n, PhantomSpec(d.height, d.width), n_coils=d.n_coils, mask_kind=kind,
                         acceleration=d.acceleration, acs=d.acs, gamma=d.noise,
                         keep_fraction=d.keep_fraction, sub_acs=d.sub_acs, seed=seed, first_id=first)


def train_bcnn(cfg: RunConfig, records, seed: int, verbose: bool = False) -> BayesianUnrolledNet:
    b = cfg.bcnn
    model = BayesianUnrolledNet(recursions=b.recursions, layers=b.layers, filters=b.filters,
                                gamma2=b.gamma2, prior_std=b.prior_std, epochs=b.epochs, lr=b.lr,
                                batch_size=b.batch_size, data_term=b.data_term,
                                init_spread=b.init_spread, last_scale=b.last_scale,
                                seed=seed, verbose=verbose)
    return model.fit(records)


def score_centers(bcnn: BayesianUnrolledNet, records, n_centers: int, seed: int) -> np.ndarray:
    """``n_centers`` weight draws of ``f_theta(y)`` per record, stacked ``(N * n_centers, H, W)``."""
    out = []
    for i, rec in enumerate(records):
        stream = RandomStream(seed, CENTER_STREAM + i)
        out.extend(bcnn.sample(rec.pair.y, rec.sens, n_centers, stream))
    return np.stack(out).astype(np.complex64)


def train_score(cfg: RunConfig, centers, seed: int, verbose: bool = False) -> NoiseConditionalScoreNet:
    s = cfg.score
    model = NoiseConditionalScoreNet(filters=s.filters, blocks=s.blocks, sigma_min=s.sigma_min,
                                     sigma_max=s.sigma_max, n_levels=s.n_levels, epochs=s.epochs,
                                     batch_size=s.batch_size, lr=s.lr, ema_rate=s.ema_rate,
                                     ema_warmup=s.ema_warmup, seed=seed, verbose=verbose)
    return model.fit(centers)


def sampler_config(cfg: RunConfig, seed: int) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(step_scale=s.step_scale, n_steps=s.n_steps, noise_scale=cfg.data.noise,
                         data_sign=s.data_sign, init=s.init, final_denoise=s.final_denoise, seed=seed)


def reconstruct_one(score: NoiseConditionalScoreNet, y: MultiCoilKSpace, sens: CoilSensitivities,
                    cfg: RunConfig, seed: int) -> np.ndarray:
    image, _ = reconstruct(score, y, sens, score.schedule_, sampler_config(cfg, seed), cfg.sampler.n_samples)
    return image


def magnitude(x, sens: CoilSensitivities) -> np.ndarray:
    """SSoS of the coil images ``S x``: the magnitude image that gets scored."""
    return ssos(sens.maps * np.asarray(x)[None])


def score_report(images, records) -> MetricsReport:
    report = MetricsReport()
    for x, rec in zip(images, records):
        report.add(evaluate(magnitude(x, rec.sens), np.abs(rec.truth)))
    return report


def zero_filled(records) -> list[np.ndarray]:
    return [zero_filled_combine(r.pair.y, r.sens) for r in records]


@dataclass
class ExperimentResult:
    """Median PSNRs (dB) and per-slice reports of one end-to-end run."""

    reports: dict[str, MetricsReport] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def median_psnr(self, key: str) -> float:
        return self.reports[key].median("psnr_db")

    def summary(self) -> str:
        rows = [f"{k}: median PSNR {self.median_psnr(k):.3f} dB" for k in self.reports]
        rows += [f"time {k}: {v:.1f} s" for k, v in self.seconds.items()]
        return "\n".join(rows)


def run_experiment(cfg: RunConfig, seed: int, supervised: bool = True,
                   log: Callable[[str], None] | None = None) -> ExperimentResult:
    """Self-score pipeline on random and uniform test masks, plus the supervised reference.

    Report keys: ``zf_random``, ``selfscore_random``, ``zf_uniform``,
    ``selfscore_uniform`` and, with ``supervised``, ``supervised_random``.
    The supervised pool repeats every truth ``n_centers`` times so that both
    score models see the same number of centers and optimizer steps.
    """
    log = log or (lambda msg: None)
    res = ExperimentResult()
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        res.seconds[name] = now - clock
        clock = now
        log(f"{name} done in {res.seconds[name]:.1f} s")

    train = make_records(cfg, seed, "train")
    tests = {"random": make_records(cfg, seed, "test"),
             "uniform": make_records(cfg, seed, "test", mask_kind="uniform")}
    lap("data")
    bcnn = train_bcnn(cfg, train, seed)
    lap("bcnn")
    centers = score_centers(bcnn, train, cfg.bcnn.n_centers, seed)
    selfscore = train_score(cfg, centers, seed)
    lap("selfscore")
    models = {"selfscore": selfscore}
    if supervised:
        truths = np.stack([r.truth for r in train]).astype(np.complex64)
        models["supervised"] = train_score(cfg, np.repeat(truths, cfg.bcnn.n_centers, axis=0), seed)
        lap("supervised")
    for kind, records in tests.items():
        res.reports[f"zf_{kind}"] = score_report(zero_filled(records), records)
        for name, model in models.items():
            if name == "supervised" and kind != "random":
                continue
            images = [reconstruct_one(model, r.pair.y, r.sens, cfg, seed) for r in records]
            res.reports[f"{name}_{kind}"] = score_report(images, records)
            log(f"{name}_{kind}: median PSNR {res.median_psnr(f'{name}_{kind}'):.3f} dB")
        lap(f"reconstruct_{kind}")
    return res
