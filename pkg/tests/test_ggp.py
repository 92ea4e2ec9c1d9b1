import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gengap import ggp
from gengap.ggp import GgpExample, GgpModel
from gengap.margin_sig import SignatureMatrix

from gradcheck import max_rel_error, numeric_grad


def _sig(rows, lam=0.5):
    return SignatureMatrix(np.asarray(rows, dtype=np.float64), lam)


def _random_examples(n, lam=0.5, seed=0, depth_range=(1, 4), label_fn=None):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        depth = int(rng.integers(depth_range[0], depth_range[1] + 1))
        rows = np.sort(rng.uniform(-lam, lam, size=(depth + 2, 5)), axis=1)
        sig = _sig(rows, lam)
        label = label_fn(sig) if label_fn else float(rng.normal())
        out.append(GgpExample(sig, label, net_id=i))
    return out


def test_aggregate_sum_example():
    np.testing.assert_array_equal(
        ggp.aggregate_sum(_sig([[1, 2, 3, 4, 5], [0, 0, 0, 0, 1]])), [1, 2, 3, 4, 6])


def test_linear_fit_recovers_exact_linear_data():
    w, c = np.array([0.3, -0.2, 0.1, 0.05, -0.4]), 0.07
    ex = _random_examples(30, label_fn=lambda s: float(ggp.aggregate_sum(s) @ w + c))
    model = ggp.fit_linear(ex)
    np.testing.assert_allclose(model.params["coef"], w, atol=1e-10)
    assert model.params["intercept"][0] == pytest.approx(c, abs=1e-10)
    for e in ex[:5]:
        assert ggp.predict(model, e.signature) == pytest.approx(e.label, abs=1e-8)


def test_linear_fit_on_constant_labels_is_the_constant():
    ex = _random_examples(20, label_fn=lambda s: 0.25)
    model = ggp.fit_linear(ex)
    preds = ggp.predict_many(model, [e.signature for e in ex])
    np.testing.assert_allclose(preds, 0.25, atol=1e-10)


def test_zero_coefficient_model_predicts_intercept():
    model = GgpModel("linear", 0.5, {"coef": np.zeros(5), "intercept": np.array([0.1])})
    for e in _random_examples(4):
        assert ggp.predict(model, e.signature) == pytest.approx(0.1)


def test_linear_fit_needs_enough_examples():
    with pytest.raises(ValueError):
        ggp.fit_linear(_random_examples(5))


def test_linear_fit_flags_rank_deficiency():
    sig = _sig(np.full((3, 5), 0.1))
    ex = [GgpExample(sig, float(i)) for i in range(8)]
    model = ggp.fit_linear(ex)
    assert model.meta["rank_deficient"]


def _normal_equations(X, y):
    A = np.hstack([X, np.ones((len(y), 1))])
    return np.linalg.solve(A.T @ A, A.T @ y)


def test_ols_matches_normal_equations_on_random_systems():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        rows = rng.normal(size=(50, 5))
        y = rng.normal(size=50)
        ex = [GgpExample(_sig(np.vstack([r, np.zeros((1, 5))])), float(v))
              for r, v in zip(rows, y)]
        model = ggp.fit_linear(ex)
        ref = _normal_equations(rows, y)
        got = np.concatenate([model.params["coef"], model.params["intercept"]])
        worst = max(worst, float(np.max(np.abs(got - ref))))
    assert worst < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 5), st.floats(-1e-3, 1e-3).filter(lambda d: d != 0))
def test_ols_perturbation_never_lowers_training_error(seed, coord, delta):
    ex = _random_examples(25, seed=seed)
    model = ggp.fit_linear(ex)
    X, y = ggp._design(ex)
    beta = np.concatenate([model.params["coef"], model.params["intercept"]])
    A = np.hstack([X, np.ones((len(y), 1))])
    base = np.mean((A @ beta - y) ** 2)
    moved = beta.copy()
    moved[coord] += delta
    assert np.mean((A @ moved - y) ** 2) >= base - 1e-12


def test_lambda_mismatch_is_a_configuration_error():
    model = ggp.fit_linear(_random_examples(10, lam=0.5))
    with pytest.raises(ggp.ConfigurationError):
        ggp.predict(model, _random_examples(1, lam=2.5)[0].signature)
    with pytest.raises(ggp.ConfigurationError):
        ggp.fit_dnn(_random_examples(10, lam=0.5), "dataset_independent", steps=1)
    with pytest.raises(ggp.ConfigurationError):
        ggp.fit_linear(_random_examples(5, lam=0.5) + _random_examples(5, lam=2.5))


def test_step_budgets():
    assert ggp.DNN_STEPS == {"dataset_dependent": 5000, "dataset_independent": 25000}
    assert ggp.RNN_STEPS == {"dataset_dependent": 2500, "dataset_independent": 25000}
    assert ggp.MODE_LAMBDA == {"dataset_dependent": 0.5, "dataset_independent": 2.5}


def test_dnn_learns_a_constant():
    ex = _random_examples(64, label_fn=lambda s: 0.3)
    model = ggp.fit_dnn(ex, "dataset_dependent", seed=1)
    preds = ggp.predict_many(model, [e.signature for e in ex])
    assert np.sqrt(np.mean((preds - 0.3) ** 2)) < 1e-2
    assert np.max(np.abs(preds - 0.3)) < 2e-2


def test_fitting_is_deterministic():
    ex = _random_examples(40, seed=3)
    a = ggp.fit_dnn(ex, "dataset_dependent", seed=5, steps=200)
    b = ggp.fit_dnn(ex, "dataset_dependent", seed=5, steps=200)
    np.testing.assert_array_equal(a.params["theta"], b.params["theta"])
    c = ggp.fit_rnn(ex, "dataset_dependent", seed=5, steps=50)
    d = ggp.fit_rnn(ex, "dataset_dependent", seed=5, steps=50)
    np.testing.assert_array_equal(c.params["theta"], d.params["theta"])


@pytest.mark.parametrize("family", ["linear", "dnn"])
def test_sum_models_ignore_row_order(family):
    ex = _random_examples(30, seed=4)
    model = ggp.fit(family, ex, "dataset_dependent", seed=0, steps=200)
    rng = np.random.default_rng(0)
    for e in ex[:10]:
        rows = e.signature.rows[rng.permutation(len(e.signature))]
        assert ggp.predict(model, _sig(rows)) == pytest.approx(
            ggp.predict(model, e.signature), abs=1e-12)


def test_rnn_is_order_sensitive():
    ex = _random_examples(30, seed=5, depth_range=(2, 4))
    model = ggp.fit_rnn(ex, "dataset_dependent", seed=0, steps=100)
    sig = ex[0].signature
    flipped = _sig(sig.rows[::-1])
    assert ggp.predict(model, sig) != pytest.approx(ggp.predict(model, flipped), abs=1e-9)


def test_rnn_accepts_any_depth_and_padding_is_inert():
    model = ggp.RecurrentRegressor.init(7)
    rng = np.random.default_rng(1)
    short = _sig(rng.uniform(-0.5, 0.5, size=(2, 5)))
    long = _sig(rng.uniform(-0.5, 0.5, size=(8, 5)))
    gm = GgpModel("rnn", 0.5, {"theta": model.theta})
    alone = ggp.predict(gm, short)
    batched = ggp.predict_many(gm, [short, long])
    assert batched[0] == pytest.approx(alone, abs=1e-14)


def test_rnn_backprop_through_time_matches_finite_differences():
    model = ggp.RecurrentRegressor.init(3)
    rng = np.random.default_rng(2)
    model.theta[:] += rng.normal(scale=0.1, size=model.theta.size)
    sigs = [_sig(rng.uniform(-0.5, 0.5, size=(n, 5))) for n in (2, 4, 3, 6)]
    seqs, lengths = ggp.pad_signatures(sigs)
    y = rng.normal(size=4)
    _, analytic = model.loss_and_grad(seqs, lengths, y)
    numeric = numeric_grad(lambda: model.loss_and_grad(seqs, lengths, y)[0], model.theta)
    cell = model.cell_size
    # the recurrent cell is smooth, so plain float64 differences suffice there
    assert max_rel_error(analytic[:cell], numeric[:cell], floor=1e-6) < 1e-4
    np.testing.assert_allclose(analytic, numeric, atol=1e-7)


def test_unknown_family_is_rejected():
    with pytest.raises(ValueError):
        ggp.fit("svm", _random_examples(10), "dataset_dependent")


@pytest.mark.parametrize("family", ["linear", "dnn", "rnn"])
def test_model_save_load_round_trip(tmp_path, family):
    ex = _random_examples(20, seed=6)
    model = ggp.fit(family, ex, "dataset_dependent", seed=0, steps=20)
    path = tmp_path / f"{family}.json"
    model.save(path)
    back = GgpModel.load(path)
    sigs = [e.signature for e in ex]
    np.testing.assert_array_equal(ggp.predict_many(model, sigs), ggp.predict_many(back, sigs))
    assert back.lam == model.lam and back.family == family
