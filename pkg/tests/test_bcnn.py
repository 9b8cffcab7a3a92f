import numpy as np
import pytest
import torch

from selfscore.bcnn import (BayesianUnrolledNet, FNetArch, elbo_loss, f_apply, from_channels,
                            sample_f_of_y, to_channels)
from selfscore.mri import zero_filled_combine
from selfscore.nn import BayesianWeights, finite_difference_check
from selfscore.numerics import RandomStream, fft2c

ARCH = FNetArch(recursions=2, layers=3, filters=4)


def fitted(records, **kw):
    params = dict(recursions=2, layers=3, filters=4, epochs=1, lr=1e-3, gamma2=0.1, seed=0)
    params.update(kw)
    return BayesianUnrolledNet(**params).fit(records)


def test_channel_interleaving():
    z = torch.tensor([[[[1 + 2j]]], [[[3 + 4j]]]], dtype=torch.complex64).reshape(2, 1, 1)
    r = to_channels(z)
    assert r.reshape(-1).tolist() == [1, 2, 3, 4]
    assert torch.equal(from_channels(r), z)


def test_arch_validation_and_names():
    with pytest.raises(ValueError):
        FNetArch(recursions=0)
    assert FNetArch(layers=5).bayesian_names() == ["img.4.weight", "img.4.bias", "ksp.4.weight", "ksp.4.bias"]
    assert FNetArch(bayesian_last=False).bayesian_names() == []
    assert FNetArch(filters=8, layers=3).module(4).widths == (8, 8, 8, 8)


def test_zero_weights_reproduce_zero_filled(small_records):
    rec = small_records[0]
    net = ARCH.module(rec.sens.n_coils)
    theta = {f"{m}.{k}": torch.zeros(s) for m in ("img", "ksp") for k, s in net.shapes().items()}
    out = f_apply(theta, rec.pair.y.data, rec.pair.y.mask.lines, rec.sens.maps, ARCH).numpy()
    np.testing.assert_allclose(out, zero_filled_combine(rec.pair.y, rec.sens), atol=1e-6)


def test_data_consistency_is_exact(small_records):
    rec = small_records[1]
    model = fitted(small_records[:1])
    theta = model._theta(RandomStream(0, 0))
    with torch.no_grad():
        _, k = f_apply(theta, rec.pair.y_sub.data, rec.pair.submask.lines, rec.sens.maps, ARCH, return_kspace=True)
    lines = torch.from_numpy(np.array(rec.pair.submask.lines))
    assert torch.equal(k[..., lines], torch.from_numpy(np.array(rec.pair.y_sub.data))[..., lines])


def test_output_shape_mismatch(small_records):
    rec = small_records[0]
    with pytest.raises(Exception):
        f_apply({}, rec.pair.y.data, rec.pair.y.mask.lines, rec.sens.maps[:1], ARCH)


def test_kl_part_of_loss(small_records):
    model = fitted(small_records[:1], epochs=0)
    bw = BayesianWeights({"w": torch.tensor([0.5])}, {"w": torch.tensor([float(np.log(np.expm1(0.1)))])})
    assert float(bw.kl_divergence(1.0)) == pytest.approx(1.932585, abs=1e-5)
    terms = elbo_loss(model.bayes_, model.det_, small_records[:1], model.arch, 0.1, 1.0, RandomStream(1, 0))
    flat_mu = torch.cat([v.reshape(-1) for v in model.bayes_.mean.values()])
    flat_sd = torch.cat([v.reshape(-1) for v in model.bayes_.sigma.values()])
    want = 0.5 * (flat_mu ** 2 + flat_sd ** 2).sum() - torch.log(flat_sd).sum() - 0.5 * flat_mu.numel()
    assert float(terms.kl) == pytest.approx(float(want), rel=1e-5)


def test_prior_equal_posterior_has_no_kl():
    bw = BayesianWeights({"w": torch.zeros(5)}, {"w": torch.full((5,), float(np.log(np.expm1(0.3))))})
    assert float(bw.kl_divergence(0.3)) == pytest.approx(0.0, abs=1e-6)


def test_kl_weight_scales_with_batch_fraction(small_records):
    model = fitted(small_records[:1], epochs=0)
    noise = [{k: torch.zeros_like(v) for k, v in model.bayes_.mean.items()}] * 2
    a = elbo_loss(model.bayes_, model.det_, small_records[:2], model.arch, 0.1, 1.0, n_total=8, noise=noise)
    assert float(a.loss) == pytest.approx(float(a.data + a.kl * 2 / 8), rel=1e-6)


def test_loss_rejects_bad_inputs(small_records):
    model = fitted(small_records[:1], epochs=0)
    with pytest.raises(ValueError):
        elbo_loss(model.bayes_, model.det_, [], model.arch)
    with pytest.raises(ValueError):
        elbo_loss(model.bayes_, model.det_, small_records[:1], model.arch, data_term="both",
                  stream=RandomStream(0, 0))


@pytest.mark.parametrize("data_term", ["image", "kspace"])
def test_elbo_gradients_finite_differences(small_records, data_term):
    rec = small_records[:1]
    arch = FNetArch(recursions=1, layers=2, filters=2)
    model = BayesianUnrolledNet(recursions=1, layers=2, filters=2, epochs=0, init_spread=0.05, seed=3).fit(rec)
    eps = [{k: torch.from_numpy(RandomStream(9, j).gaussian(tuple(v.shape))).double()
            for j, (k, v) in enumerate(model.bayes_.mean.items())}]
    names_mu = list(model.bayes_.mean)

    def loss(p):
        bw = BayesianWeights({k: p["mu." + k] for k in names_mu}, {k: p["rho." + k] for k in names_mu})
        det = {k: p["det." + k] for k in model.det_}
        return elbo_loss(bw, det, rec, arch, 0.5, 1.0, noise=eps, data_term=data_term).loss

    params = {**{"mu." + k: v for k, v in model.bayes_.mean.items()},
              **{"rho." + k: v for k, v in model.bayes_.rho.items()},
              **{"det." + k: v for k, v in model.det_.items()}}
    # float64 with a small step keeps the probes clear of ReLU kinks
    errors = finite_difference_check(loss, params, step=1e-6, max_entries=12)
    assert max(errors.values()) <= 1e-3, errors


def test_training_reduces_data_term():
    from selfscore.phantom import PhantomSpec, build_dataset
    records = build_dataset(20, PhantomSpec(16, 16, n_ellipses=3), n_coils=2, acs=2, seed=4)
    model = BayesianUnrolledNet(recursions=2, layers=3, filters=8, epochs=5, lr=1e-3, gamma2=0.1,
                                data_term="kspace", seed=0).fit(records)
    assert model.history_[-1]["data"] < model.history_[0]["data"]


def test_training_is_deterministic_and_lr_zero_is_identity(small_records):
    a = fitted(small_records, epochs=2)
    b = fitted(small_records, epochs=2)
    assert [r["loss"] for r in a.history_] == [r["loss"] for r in b.history_]
    frozen = fitted(small_records, epochs=1, lr=0.0)
    init = fitted(small_records, epochs=0)
    for k in init.det_:
        assert torch.equal(frozen.det_[k], init.det_[k])
    for k in init.bayes_.mean:
        assert torch.equal(frozen.bayes_.mean[k], init.bayes_.mean[k])


def test_get_params_round_trip():
    model = BayesianUnrolledNet(filters=8, lr=3e-4)
    assert model.get_params()["filters"] == 8
    assert model.set_params(filters=4).filters == 4


def test_predict_requires_fit(small_records):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        BayesianUnrolledNet().predict(small_records[0].pair.y, small_records[0].sens)


def test_samples_spread_and_collapse(small_records):
    rec = small_records[0]
    model = fitted(small_records[:2], init_spread=0.05)
    draws = sample_f_of_y(model, rec.pair.y, rec.sens, 16, RandomStream(2, 0))
    spread = np.std(np.stack(draws), axis=0)
    assert np.all(np.isfinite(spread)) and spread.max() > 0
    again = sample_f_of_y(model, rec.pair.y, rec.sens, 16, RandomStream(2, 0))
    assert all(np.array_equal(a, b) for a, b in zip(draws, again))
    for k in model.bayes_.rho:
        model.bayes_.rho[k] = torch.full_like(model.bayes_.rho[k], -200.0)
    flat = sample_f_of_y(model, rec.pair.y, rec.sens, 3, RandomStream(2, 0))
    assert all(np.array_equal(flat[0], f) for f in flat)
    np.testing.assert_array_equal(flat[0], model.predict(rec.pair.y, rec.sens))


def test_weights_round_trip(small_records):
    rec = small_records[0]
    model = fitted(small_records[:2])
    clone = BayesianUnrolledNet.from_weights(model.get_weights())
    np.testing.assert_array_equal(clone.predict(rec.pair.y, rec.sens), model.predict(rec.pair.y, rec.sens))
