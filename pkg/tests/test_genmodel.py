import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import xlogy
from sklearn.base import clone

from genint import ndcore as nd
from genint._validation import one_hot
from genint.exceptions import DimensionError, ValidationError
from genint.genmodel import CVAE, elbo_loss, reparameterize, sample_truncated_gaussian, train_cvae


def _reference_elbo(x, x_hat, mean, logvar, beta):
    recon = -(xlogy(x, x_hat) + xlogy(1 - x, 1 - x_hat)).sum()
    var = np.exp(logvar)
    kl = 0.5 * (var + mean**2 - 1 - logvar).sum()
    return recon + beta * kl


def test_elbo_matches_reference():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(3, 8))
    x_hat = rng.uniform(0.05, 0.95, size=(3, 8))
    mean, logvar = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    report = elbo_loss(x, x_hat, mean, logvar, beta=0.5)
    assert report.total == pytest.approx(_reference_elbo(x, x_hat, mean, logvar, 0.5), rel=1e-10)
    assert report.per_item == pytest.approx(report.total / 3)


def test_elbo_perfect_binary_reconstruction_at_prior_is_zero():
    x = np.array([[0.0, 1.0, 1.0]])
    report = elbo_loss(x, x, np.zeros((1, 2)), np.zeros((1, 2)))
    assert report.total == pytest.approx(0.0, abs=1e-5)


def test_elbo_rejects_pixels_outside_unit_interval():
    with pytest.raises(ValidationError):
        elbo_loss(np.array([[1.5]]), np.array([[0.5]]), np.zeros((1, 1)), np.zeros((1, 1)))


def test_elbo_shape_mismatch():
    with pytest.raises(DimensionError):
        elbo_loss(np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 1)), np.zeros((1, 1)))


def test_reparameterize_arrays_and_shapes():
    out = reparameterize(np.ones(3), np.log(np.full(3, 4.0)), np.array([0.0, 1.0, -1.0]))
    np.testing.assert_allclose(out, [1.0, 3.0, -1.0])
    with pytest.raises(DimensionError):
        reparameterize(np.ones(3), np.ones(2), np.ones(3))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 3.0), st.integers(0, 1000))
def test_truncated_draws_respect_the_bound(t, seed):
    v = sample_truncated_gaussian(4, t, 200, seed)
    assert v.shape == (200, 4)
    assert np.all(np.abs(v) <= t)


def test_truncated_draws_follow_truncnorm():
    v = sample_truncated_gaussian(1, 1.0, 20_000, 0).ravel()
    assert stats.kstest(v, stats.truncnorm(-1, 1).cdf).pvalue > 0.001


def test_truncation_must_be_positive():
    with pytest.raises(ValidationError):
        sample_truncated_gaussian(2, 0.0, 3, 0)


def test_negative_elbo_gradients_in_double_precision():
    rng = np.random.default_rng(1)
    model = CVAE(latent_dim=2, hidden_units=5, n_classes=3)
    params = {k: v.astype(np.float64) for k, v in model._init_params(6, rng).items()}
    x = rng.uniform(size=(4, 6))
    y1h = one_hot(np.array([0, 1, 2, 1]), 3, dtype=np.float64)
    noise = rng.normal(size=(4, 2))
    report = nd.finite_difference_check(lambda p: model.negative_elbo(p, x, y1h, noise), params, step=1e-6)
    assert report.passed, report


def test_training_lowers_held_out_negative_elbo(tiny_colored):
    untrained = CVAE(latent_dim=4, hidden_units=24, epochs=0).fit(tiny_colored.images, tiny_colored.labels)
    trained = CVAE(latent_dim=4, hidden_units=24, epochs=10, batch_size=32, learning_rate=3e-3)
    trained.fit(tiny_colored.images, tiny_colored.labels, tiny_colored.images, tiny_colored.labels)
    before = untrained.score_elbo(tiny_colored.images, tiny_colored.labels).per_item
    after = trained.score_elbo(tiny_colored.images, tiny_colored.labels).per_item
    assert after < before
    assert [r["epoch"] for r in trained.history_] == list(range(1, 11))
    assert "val_neg_elbo" in trained.history_[-1]


def test_decode_range_and_shapes(tiny_cvae):
    out = tiny_cvae.decode(np.zeros((3, 4)), [0, 5, 9])
    assert out.shape == (3, tiny_cvae.n_features_in_)
    assert np.all((out > 0) & (out < 1))
    with pytest.raises(DimensionError):
        tiny_cvae.decode(np.zeros((3, 5)), [0, 1, 2])
    with pytest.raises(ValidationError):
        tiny_cvae.decode(np.full((1, 4), np.nan), [0])


def test_encode_shapes(tiny_cvae, tiny_colored):
    mean, logvar = tiny_cvae.encode(tiny_colored.images[:5], tiny_colored.labels[:5])
    assert mean.shape == logvar.shape == (5, 4)
    np.testing.assert_array_equal(tiny_cvae.transform(tiny_colored.images[:5], tiny_colored.labels[:5]), mean)


def test_training_is_deterministic(tiny_colored):
    a = CVAE(latent_dim=3, hidden_units=8, epochs=2).fit(tiny_colored.images, tiny_colored.labels)
    b = CVAE(latent_dim=3, hidden_units=8, epochs=2).fit(tiny_colored.images, tiny_colored.labels)
    for k in a.params_:
        assert a.params_[k].tobytes() == b.params_[k].tobytes()


def test_save_load_round_trip(tmp_path, tiny_cvae, tiny_colored):
    tiny_cvae.save(tmp_path / "m")
    back = CVAE.load(tmp_path / "m")
    h = np.random.default_rng(0).normal(size=(4, 4))
    assert back.decode(h, [1, 2, 3, 4]).tobytes() == tiny_cvae.decode(h, [1, 2, 3, 4]).tobytes()
    assert back.get_params() == tiny_cvae.get_params()


def test_estimator_contract(tiny_colored):
    model = CVAE(latent_dim=3, epochs=1)
    assert clone(model).get_params() == model.get_params()
    with pytest.raises(ValidationError):
        CVAE().fit(tiny_colored.images * 2, tiny_colored.labels)
    with pytest.raises(ValidationError):
        CVAE().fit(tiny_colored.images, tiny_colored.labels + 10)


def test_train_cvae_wrapper(tiny_colored):
    model = train_cvae(tiny_colored, {"latent_dim": 2, "hidden_units": 4, "epochs": 1})
    assert model.params_["mu_W"].shape == (4, 2)
