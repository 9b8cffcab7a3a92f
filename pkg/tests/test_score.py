import numpy as np
import pytest
import torch

from selfscore.exceptions import DimensionError
from selfscore.numerics import RandomStream
from selfscore.score import (
    NoiseConditionalScoreNet,
    NoiseSchedule,
    ScoreArch,
    dsm_loss,
    dsm_loss_selfsup,
    dsm_loss_supervised,
    init_score_params,
    make_schedule,
    schedule_preset,
    score_apply,
)

TINY = ScoreArch(filters=4, blocks=1)


def tiny_params(seed=0, dtype=torch.float32):
    params = init_score_params(TINY, RandomStream(seed, 0), tail_scale=1.0)
    return {k: v.to(dtype) for k, v in params.items()}


class TestSchedule:
    def test_full_preset_endpoints_are_exact(self):
        s = schedule_preset("full")
        assert len(s) == 266
        assert s[0] == 0.0066 and s[-1] == 50.0

    def test_two_levels_are_just_the_endpoints(self):
        np.testing.assert_array_equal(make_schedule(0.5, 2.0, 2).levels, [0.5, 2.0])

    def test_constant_ratio(self):
        s = make_schedule(0.01, 16, 32)
        ratios = s.levels[1:] / s.levels[:-1]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)
        assert abs(s[15] / s[14] - s[1] / s[0]) <= 1e-9 * s[1] / s[0]

    def test_geometric_formula(self):
        s = make_schedule(0.01, 16, 32)
        i = np.arange(32)
        np.testing.assert_allclose(s.levels, 0.01 * 1600 ** (i / 31), rtol=1e-9)

    @pytest.mark.parametrize("args", [(1.0, 0.5, 4), (0.0, 1.0, 4), (0.1, 1.0, 1)])
    def test_bad_arguments(self, args):
        with pytest.raises(ValueError):
            make_schedule(*args)

    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([1.0, 1.0, 2.0]))

    def test_bad_level(self):
        with pytest.raises(IndexError):
            make_schedule(0.1, 1, 4).check_level(4)


class TestScoreApply:
    def test_zero_weights_give_zero_score(self):
        params = {k: torch.zeros_like(v) for k, v in tiny_params().items()}
        s = make_schedule(0.1, 10, 5)
        x = RandomStream(0, 0).gaussian((8, 8), complex=True)
        for i in range(len(s)):
            assert not np.any(score_apply(params, x, i, s, TINY))

    def test_level_scaling(self):
        s = make_schedule(0.1, 10, 5)
        params = tiny_params()
        x = RandomStream(1, 0).gaussian((8, 8), complex=True)
        out2 = score_apply(params, x, 2, s, TINY)
        out4 = score_apply(params, x, 4, s, TINY)
        np.testing.assert_allclose(out2, out4 * s[4] / s[2], rtol=1e-5, atol=1e-7)

    def test_deterministic(self):
        s = make_schedule(0.1, 10, 5)
        params = tiny_params()
        x = RandomStream(2, 0).gaussian((8, 8), complex=True)
        np.testing.assert_array_equal(score_apply(params, x, 1, s, TINY), score_apply(params, x, 1, s, TINY))

    def test_batch_matches_single(self):
        s = make_schedule(0.1, 10, 5)
        params = tiny_params()
        x = RandomStream(3, 0).gaussian((3, 8, 8), complex=True)
        batch = score_apply(params, x, 0, s, TINY)
        np.testing.assert_allclose(batch[1], score_apply(params, x[1], 0, s, TINY), rtol=1e-5, atol=1e-5)

    def test_errors(self):
        s = make_schedule(0.1, 10, 5)
        with pytest.raises(IndexError):
            score_apply(tiny_params(), np.zeros((8, 8), np.complex64), 5, s, TINY)
        with pytest.raises(DimensionError):
            score_apply(tiny_params(), np.zeros(8, np.complex64), 0, s, TINY)


class TestDsmLoss:
    def test_perfect_net_has_zero_loss(self, monkeypatch):
        import selfscore.score as mod

        centers = RandomStream(0, 0).gaussian((4, 6, 6), complex=True)
        noise = RandomStream(1, 0).gaussian((4, 6, 6), complex=True)
        monkeypatch.setattr(mod, "scaled_net", lambda p, x, a: -torch.from_numpy(noise))
        loss = dsm_loss({}, centers, make_schedule(0.1, 1, 3), TINY, RandomStream(2, 0), noise=noise)
        assert loss.item() == 0.0

    def test_zero_net_loss_is_hw_on_average(self):
        params = {k: torch.zeros_like(v) for k, v in tiny_params().items()}
        centers = np.zeros((512, 8, 8), np.complex64)
        loss = dsm_loss(params, centers, make_schedule(0.1, 1, 3), TINY, RandomStream(3, 0))
        # |z|^2 / 2 has mean HW = 64 and standard deviation 8 per image.
        assert abs(loss.item() - 64) < 5 * 8 / np.sqrt(512)

    def test_selfsup_equals_supervised(self):
        truths = RandomStream(4, 0).gaussian((3, 8, 8), complex=True)
        s = make_schedule(0.1, 4, 6)
        a = dsm_loss_selfsup(tiny_params(), truths, s, TINY, RandomStream(5, 0))
        b = dsm_loss_supervised(tiny_params(), truths, s, TINY, RandomStream(5, 0))
        assert a.item() == b.item()

    def test_empty_centers(self):
        with pytest.raises(ValueError):
            dsm_loss(tiny_params(), np.zeros((0, 4, 4), np.complex64), make_schedule(0.1, 1, 2), TINY,
                     RandomStream(0, 0))

    def test_gradient_matches_central_differences(self):
        stream = RandomStream(6, 0)
        centers = torch.from_numpy(stream.gaussian((2, 5, 5), complex=True)).to(torch.complex128)
        noise = torch.from_numpy(stream.gaussian((2, 5, 5), complex=True)).to(torch.complex128)
        levels = np.array([0, 2])
        sched = make_schedule(0.1, 2, 3)
        params = tiny_params(dtype=torch.float64)
        for v in params.values():
            v.requires_grad_(True)
        dsm_loss(params, centers, sched, TINY, stream, levels=levels, noise=noise).backward()
        probe = RandomStream(7, 0)
        h = 1e-6
        for name in ("head.weight", "block0.conv1.bias", "tail.weight"):
            direction = torch.from_numpy(probe.gaussian(tuple(params[name].shape), dtype=np.float64))
            analytic = float(torch.sum(params[name].grad * direction))
            with torch.no_grad():
                vals = []
                for sign in (1, -1):
                    trial = dict(params)
                    trial[name] = params[name] + sign * h * direction
                    vals.append(dsm_loss(trial, centers, sched, TINY, stream, levels=levels, noise=noise).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-8), name


class TestEstimator:
    @staticmethod
    def data():
        return RandomStream(8, 0).gaussian((6, 8, 8), complex=True) * np.float32(0.3)

    def test_zero_epochs_keep_initialization(self):
        model = NoiseConditionalScoreNet(filters=4, blocks=1, epochs=0, seed=3).fit(self.data())
        init = init_score_params(model.arch, RandomStream(3, 0))
        for k, v in init.items():
            assert torch.equal(model.params_[k], v)
            assert torch.equal(model.ema_.shadow[k], v)

    def test_fixed_seed_gives_identical_weights(self):
        kw = dict(filters=4, blocks=1, epochs=2, batch_size=4, n_levels=4, seed=5)
        a = NoiseConditionalScoreNet(**kw).fit(self.data()).get_weights()
        b = NoiseConditionalScoreNet(**kw).fit(self.data()).get_weights()
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_ema_differs_from_raw_after_training(self):
        model = NoiseConditionalScoreNet(filters=4, blocks=1, epochs=2, batch_size=2, n_levels=4).fit(self.data())
        x = self.data()[0]
        assert not np.array_equal(model.score(x, 0), model.score(x, 0, use_ema=False))

    def test_weights_round_trip(self):
        model = NoiseConditionalScoreNet(filters=4, blocks=1, epochs=1, n_levels=7, seed=1).fit(self.data())
        clone = NoiseConditionalScoreNet.from_weights(model.get_weights())
        np.testing.assert_array_equal(clone.schedule_.levels, model.schedule_.levels)
        x = self.data()[1]
        for level in (0, 6):
            np.testing.assert_array_equal(clone.score(x, level), model.score(x, level))

    def test_training_lowers_loss(self):
        data = np.repeat(self.data()[:1], 16, axis=0)
        model = NoiseConditionalScoreNet(filters=8, blocks=1, epochs=15, batch_size=8, lr=1e-3,
                                         sigma_min=0.1, sigma_max=1.0, n_levels=4).fit(data)
        assert np.mean(model.history_[-3:]) < model.history_[0]

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            NoiseConditionalScoreNet(epochs=0).fit(np.zeros((4, 4), np.complex64))
