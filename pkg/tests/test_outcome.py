import numpy as np
import pytest

from conftest import max_rel_error, numeric_grad
from gcfn import nn, outcome, vde
from gcfn.errors import ConfigError, DomainError
from gcfn.outcome import EffectCurve, OutcomeModel
from gcfn.simgen import Dataset, ScenarioSpec, generate
from gcfn.vde import VdeConfig, VdeModel


def _net_identity_plus(table):
    """Outcome net computing f(t, k) = t + table[k] for table entries >= 0."""
    k = len(table)
    w1 = np.zeros((3, 1 + k))
    w1[0, 0], w1[1, 0] = 1.0, -1.0
    w1[2, 1:] = table
    net = nn.MlpParams([w1, np.eye(3), np.array([[1.0, -1.0, 1.0]])], [np.zeros(3)] * 2 + [np.zeros(1)])
    return OutcomeModel(net, k)


def _net_constant_table(table):
    k = len(table)
    w1 = np.zeros((1, 1 + k))
    w1[0, 1:] = table
    net = nn.MlpParams([w1, np.eye(1), np.eye(1)], [np.zeros(1)] * 3)
    return OutcomeModel(net, k)


def test_hand_built_net_values():
    m = _net_identity_plus([0.0, 2.0])
    np.testing.assert_allclose(m.predict_all([-1.0, 0.5]), [[-1.0, 1.0], [0.5, 2.5]], atol=1e-15)


def test_effect_is_t_when_f_ignores_category():
    m = _net_identity_plus([0.0, 0.0, 0.0])
    grid = outcome.default_grid()
    np.testing.assert_allclose(outcome.estimate_effect(m, [0.2, 0.3, 0.5], grid).tau_hat, grid, atol=1e-14)


def test_two_category_mixture_hand_value():
    # 0.25 * 0 + 0.75 * 4 = 3
    m = _net_constant_table([0.0, 4.0])
    tau = outcome.estimate_effect(m, [0.25, 0.75], outcome.default_grid()).tau_hat
    np.testing.assert_allclose(tau, 3.0, atol=1e-14)


def test_one_hot_marginal_picks_category(rng):
    m = outcome.init_outcome(4, 8, rng)
    grid = np.linspace(-1, 1, 9)
    tau = outcome.estimate_effect(m, [0, 0, 1.0, 0], grid).tau_hat
    np.testing.assert_allclose(tau, m.predict(grid, 2), atol=1e-14)


def test_effect_linear_in_marginal(rng):
    m = outcome.init_outcome(5, 8, rng)
    grid = np.linspace(-1, 1, 20)
    for _ in range(10):
        q1, q2 = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        a = rng.random()
        mixed = outcome.estimate_effect(m, a * q1 + (1 - a) * q2, grid).tau_hat
        parts = a * outcome.estimate_effect(m, q1, grid).tau_hat + (1 - a) * outcome.estimate_effect(m, q2, grid).tau_hat
        np.testing.assert_allclose(mixed, parts, atol=1e-12)


def test_marginal_must_be_probability(rng):
    m = outcome.init_outcome(2, 4, rng)
    with pytest.raises(DomainError):
        outcome.estimate_effect(m, [0.7, 0.7], [0.0])
    with pytest.raises(ConfigError):
        outcome.estimate_effect(m, [1.0], [0.0])


@pytest.mark.parametrize("partially_linear", [False, True])
def test_objective_gradient(partially_linear, rng):
    k = 3
    m = outcome.init_outcome(k, 5, rng, partially_linear)
    params = m.params()
    for leaf in nn.tree_leaves(params):
        leaf += rng.normal(scale=0.1, size=leaf.shape)
    t, y = rng.normal(size=4), rng.normal(size=4)
    q = rng.dirichlet(np.ones(k), size=4)
    _, grads = outcome.objective(params, k, partially_linear, t, y, q)
    num = numeric_grad(lambda: outcome.objective(params, k, partially_linear, t, y, q, with_grad=False)[0], params)
    assert max_rel_error(nn.tree_leaves(grads), num) < 1e-4


def test_one_hot_posterior_is_plain_regression(rng):
    k = 3
    m = outcome.init_outcome(k, 5, rng)
    t, y = rng.normal(size=6), rng.normal(size=6)
    ks = np.array([0, 2, 1, 1, 0, 2])
    q = np.eye(k)[ks]
    loss, _ = outcome.objective(m.params(), k, False, t, y, q, with_grad=False)
    assert loss == pytest.approx(np.mean((y - m.predict(t, ks)) ** 2), abs=1e-14)


def test_zero_outcome_fits_zero():
    rng = np.random.default_rng(0)
    t = rng.normal(size=1000)
    q = rng.dirichlet(np.ones(4), size=1000)
    m = outcome.fit_outcome_q(t, np.zeros(1000), q, epochs=30, batch_size=100, seed=0)
    assert np.max(np.abs(m.predict_all(outcome.default_grid()))) < 0.05


def test_partially_linear_recovers_slope():
    rng = np.random.default_rng(1)
    t = rng.normal(size=2000)
    ks = rng.integers(0, 3, size=2000)
    y = 1.5 * t + np.array([0.0, 1.0, -1.0])[ks]
    m = outcome.fit_outcome_q(t, y, np.eye(3)[ks], epochs=60, batch_size=200, seed=0, partially_linear=True)
    assert m.slope == pytest.approx(1.5, abs=0.05)


def _uniform_vde(k):
    cfg = VdeConfig(k_categories=k, hidden=2)
    return VdeModel(cfg, {"enc": nn.zeros_mlp([2, 2, 2, k]), "dec": {"h": np.zeros(k), "g": nn.zeros_mlp([1, 2, 2, 1])},
                          "marg": np.zeros(k)})


def test_marginal_control_examples():
    v = _uniform_vde(4)
    d = Dataset([0.3], [1.0], [0.0])
    np.testing.assert_allclose(outcome.marginal_control(d, v), v.posterior([0.3], [1.0])[0], atol=1e-15)
    # two rows with posteriors [1, 0] and [0, 1]
    cfg = VdeConfig(k_categories=2, hidden=2)
    enc = nn.MlpParams([np.array([[1.0, 0.0], [-1.0, 0.0]]), np.eye(2), np.array([[50.0, -50.0], [-50.0, 50.0]])],
                       [np.zeros(2)] * 3)
    v2 = VdeModel(cfg, {"enc": enc, "dec": {"h": np.zeros(2), "g": nn.zeros_mlp([1, 2, 2, 1])}, "marg": np.zeros(2)})
    d2 = Dataset([10.0, -10.0], [0.0, 0.0], [0.0, 0.0])
    np.testing.assert_allclose(outcome.marginal_control(d2, v2), [0.5, 0.5], atol=1e-12)
    d3 = generate(ScenarioSpec("mult_outcome", n=300, seed=0))
    assert outcome.marginal_control(d3, vde.init_model(VdeConfig(k_categories=6, hidden=4))).sum() == pytest.approx(1.0, abs=1e-9)


def test_uninformative_control_gives_plain_regression():
    # uniform posterior: the mixture collapses to E[y | t] = t + t^3 / sqrt(2) here.
    # A smaller learning rate keeps optimizer noise below the tolerance.
    d = generate(ScenarioSpec("mult_outcome", alpha=1.0, n=5000, seed=0))
    v = _uniform_vde(3)
    m = outcome.fit_outcome(d, v, epochs=200, batch_size=1000, lr=3e-3, seed=0)
    grid = outcome.default_grid()
    tau = outcome.estimate_effect(m, outcome.marginal_control(d, v), grid).tau_hat
    regression = grid + grid**3 / np.sqrt(2)
    assert np.sqrt(np.mean((tau - regression) ** 2)) < 0.05


def test_effect_curve_csv_round_trip(tmp_path):
    c = EffectCurve([0.0, 0.5, 1.0], [1 / 3, 2.0, np.pi], [0.0, 0.5, 1.0])
    c.save(tmp_path / "c.csv")
    back = EffectCurve.load(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.tau_hat, c.tau_hat)
    np.testing.assert_array_equal(back.tau_true, c.tau_true)


def test_model_json_round_trip(rng):
    m = outcome.init_outcome(3, 4, rng)
    back = OutcomeModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.predict_all([0.1, 0.2]), m.predict_all([0.1, 0.2]))


@pytest.mark.slow
def test_additive_scenario_outcome_explains_signal():
    from gcfn.evaluate import split_indices

    d = generate(ScenarioSpec("mult_outcome", alpha=1.0, n=5000, seed=0))
    tr, ho = split_indices(len(d), 0.2, 0)
    train, held = d.subset(tr), d.subset(ho)
    v = vde.train_vde(train, VdeConfig(decoder_structure="additive", kappa=0.1, seed=0))
    m = outcome.fit_outcome(train, v, seed=0)
    q = v.posterior(held.t, held.eps)
    mse = float(np.mean(np.sum(q * (held.y[:, None] - m.predict_all(held.t)) ** 2, axis=1)))
    assert mse < 0.9 * held.y.var()
