import math

import numpy as np
import pytest

from selfscore.mri import CoilSensitivities, MultiCoilKSpace, apply_A, gen_mask
from selfscore.numerics import RandomStream
from selfscore.sampler import (
    REFERENCE_STEP,
    SamplerConfig,
    langevin_cond,
    langevin_uncond,
    reconstruct,
    step_size,
)
from selfscore.score import NoiseConditionalScoreNet, NoiseSchedule, make_schedule, schedule_preset


def neg_identity(x, level):
    return -x


def problem(n=8, gamma=0.1, seed=0):
    stream = RandomStream(seed, 0)
    sens = CoilSensitivities(np.ones((1, n, n), np.complex64))
    mask = gen_mask("uniform", n, 2, acs=2)
    x = stream.gaussian((n, n), complex=True)
    y = apply_A(x, sens, mask) + gamma * stream.gaussian((1, n, n), complex=True) * mask.lines
    return MultiCoilKSpace(y.astype(np.complex64), mask), sens


class TestStepSize:
    def test_top_level_is_step_scale(self):
        s = make_schedule(0.1, 5, 6)
        assert step_size(SamplerConfig(step_scale=0.3), s, 5) == 0.3

    def test_full_schedule_bottom_level(self):
        s = schedule_preset("full")
        eta = step_size(SamplerConfig(step_scale=2e-5), s, 0)
        assert math.isclose(eta, 2e-5 * (0.0066 / 50) ** 2, rel_tol=1e-12)

    def test_nondecreasing(self):
        s = make_schedule(0.01, 16, 32)
        etas = [step_size(SamplerConfig(step_scale=1.0), s, i) for i in range(32)]
        assert all(a <= b for a, b in zip(etas, etas[1:]))

    def test_default_scale_puts_reference_step_at_bottom(self):
        s = make_schedule(0.01, 16, 32)
        assert math.isclose(step_size(SamplerConfig(), s, 0), REFERENCE_STEP, rel_tol=1e-12)

    def test_bad_index(self):
        with pytest.raises(IndexError):
            step_size(SamplerConfig(), make_schedule(0.1, 1, 3), 3)

    @pytest.mark.parametrize("kw", [dict(step_scale=0.0), dict(n_steps=0), dict(data_sign="plus"),
                                    dict(init="ones")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


class TestUnconditional:
    def test_zero_score_single_step_is_scaled_noise(self):
        single = NoiseSchedule(np.array([1.0]))
        cfg = SamplerConfig(step_scale=0.04, n_steps=1)
        z = np.array([[[0.5 - 2j, 1.25 + 0.5j]]], np.complex64)
        trace = langevin_uncond(lambda x, i: np.zeros_like(x), single, cfg, (1, 2),
                                x_init=np.zeros((1, 2), np.complex64), noise=[z])
        np.testing.assert_array_equal(trace.final, np.float32(0.2) * z[0])

    def test_fixed_seed_is_bit_identical(self):
        s = make_schedule(0.1, 2.0, 4)
        cfg = SamplerConfig(step_scale=0.5, n_steps=3, seed=9)
        a = langevin_uncond(neg_identity, s, cfg, (4, 4), keep_snapshots=True)
        b = langevin_uncond(neg_identity, s, cfg, (4, 4), keep_snapshots=True)
        np.testing.assert_array_equal(a.final, b.final)
        assert len(a.snapshots) == 4
        for u, v in zip(a.snapshots, b.snapshots):
            np.testing.assert_array_equal(u, v)

    def test_different_seeds_differ(self):
        s = make_schedule(0.1, 2.0, 4)
        a = langevin_uncond(neg_identity, s, SamplerConfig(step_scale=0.5, seed=1), (4, 4))
        b = langevin_uncond(neg_identity, s, SamplerConfig(step_scale=0.5, seed=2), (4, 4))
        assert not np.array_equal(a.final, b.final)

    def test_callback_sees_every_step(self):
        seen = []
        langevin_uncond(neg_identity, make_schedule(0.1, 1.0, 3), SamplerConfig(n_steps=2), (2, 2),
                        callback=lambda i, t, x: seen.append((i, t)))
        assert seen == [(2, 0), (2, 1), (1, 0), (1, 1), (0, 0), (0, 1)]

    def test_standard_normal_target_short_run(self):
        cfg = SamplerConfig(step_scale=0.01, n_steps=20_000, seed=3)
        trace = langevin_uncond(neg_identity, NoiseSchedule(np.array([1.0])), cfg, (64,), complex=False)
        # Final states of 64 independent chains after many mixing times.
        assert abs(np.mean(trace.final)) < 0.5
        assert 0.5 < np.var(trace.final) < 1.6

    def test_zero_filled_init_is_rejected(self):
        with pytest.raises(ValueError):
            langevin_uncond(neg_identity, make_schedule(0.1, 1.0, 2), SamplerConfig(init="zero-filled"), (2, 2))


class TestConditional:
    def test_huge_gamma_matches_unconditional(self):
        y, sens = problem()
        s = make_schedule(0.1, 2.0, 3)
        x0 = RandomStream(5, 0).gaussian((8, 8), complex=True)
        cond = langevin_cond(neg_identity, y, sens, s, SamplerConfig(step_scale=0.3, noise_scale=1e15, seed=4),
                             x_init=x0)
        uncond = langevin_uncond(neg_identity, s, SamplerConfig(step_scale=0.3, seed=4), (8, 8), x_init=x0,
                                 stream=RandomStream(4, 0))
        np.testing.assert_array_equal(cond.final, uncond.final)

    def test_residual_log_and_csv(self):
        y, sens = problem()
        cfg = SamplerConfig(step_scale=0.1, n_steps=2, noise_scale=0.1)
        trace = langevin_cond(neg_identity, y, sens, make_schedule(0.1, 1.0, 2), cfg)
        assert [(lv, t) for lv, t, _ in trace.residuals] == [(1, 0), (1, 1), (0, 0), (0, 1)]
        lines = trace.residual_csv().split("\n")
        assert lines[0] == "level,step,residual"
        assert lines[1].startswith("1,0,")
        assert lines[-1] == ""
        assert float(lines[4].split(",")[2]) == pytest.approx(trace.residuals[3][2], rel=1e-8)

    def test_data_term_pulls_towards_measurements(self):
        y, sens = problem(gamma=0.01)
        s = make_schedule(0.01, 1.0, 8)
        cfg = SamplerConfig(step_scale=0.5, n_steps=10, noise_scale=0.01, init="zero-filled")
        trace = langevin_cond(neg_identity, y, sens, s, cfg)
        assert np.all(np.isfinite(trace.final))
        assert trace.residuals[-1][2] < trace.residuals[0][2] + 1.0

    def test_fixed_seed_is_bit_identical(self):
        y, sens = problem()
        s = make_schedule(0.1, 2.0, 3)
        cfg = SamplerConfig(step_scale=0.2, n_steps=2, seed=8)
        np.testing.assert_array_equal(langevin_cond(neg_identity, y, sens, s, cfg).final,
                                      langevin_cond(neg_identity, y, sens, s, cfg).final)


class TestReconstruct:
    def test_single_sample_equals_one_chain(self):
        y, sens = problem()
        s = make_schedule(0.1, 2.0, 3)
        cfg = SamplerConfig(step_scale=0.2, n_steps=2, seed=6)
        image, traces = reconstruct(neg_identity, y, sens, s, cfg, n_samples=1)
        chain = langevin_cond(neg_identity, y, sens, s, cfg, RandomStream(6, 0))
        np.testing.assert_array_equal(image, chain.final)
        assert len(traces) == 1

    def test_mean_of_chains(self):
        y, sens = problem()
        s = make_schedule(0.1, 2.0, 3)
        cfg = SamplerConfig(step_scale=0.2, n_steps=2, seed=6)
        image, traces = reconstruct(neg_identity, y, sens, s, cfg, n_samples=3)
        np.testing.assert_allclose(image, np.mean([t.final for t in traces], axis=0), atol=1e-6)
        assert not np.array_equal(traces[0].final, traces[1].final)

    def test_with_trained_model(self):
        data = RandomStream(1, 0).gaussian((4, 8, 8), complex=True)
        model = NoiseConditionalScoreNet(filters=4, blocks=1, epochs=1, n_levels=3, sigma_max=1.0).fit(data)
        y, sens = problem()
        cfg = SamplerConfig(step_scale=0.1, n_steps=2)
        a, _ = reconstruct(model, y, sens, model.schedule_, cfg)
        b, _ = reconstruct(model, y, sens, model.schedule_, cfg)
        np.testing.assert_array_equal(a, b)
        assert a.dtype == np.complex64 and a.shape == (8, 8)

    def test_needs_a_sample(self):
        y, sens = problem()
        with pytest.raises(ValueError):
            reconstruct(neg_identity, y, sens, make_schedule(0.1, 1, 2), SamplerConfig(), n_samples=0)
