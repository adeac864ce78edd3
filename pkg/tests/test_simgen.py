import hashlib
import json
import math

import numpy as np
import pytest

from gcfn import simgen
from gcfn.errors import DataError, DomainError, ParseError
from gcfn.simgen import ScenarioSpec, generate


def test_mult_outcome_moments():
    n = 100_000
    d = generate(ScenarioSpec("mult_outcome", n=n, seed=1))
    assert abs(d.t.mean()) < 3 / math.sqrt(n)
    assert abs(d.t.var() - 1.0) < 0.05


def test_mult_treatment_t_uncorrelated_with_eps():
    n = 100_000
    d = generate(ScenarioSpec("mult_treatment", n=n, seed=2))
    assert abs(np.corrcoef(d.t, d.eps)[0, 1]) < 3 / math.sqrt(n)


@pytest.mark.parametrize("kind", ["mult_outcome", "mult_treatment", "semi", "cfn_violation"])
def test_confounder_independent_of_instrument(kind):
    n = 20_000
    d = generate(ScenarioSpec(kind, n=n, seed=3))
    assert abs(np.corrcoef(d.z, d.eps)[0, 1]) < 3 / math.sqrt(n)


def test_semi_mask_fraction():
    n, rho = 50_000, 0.05
    d = generate(ScenarioSpec("semi", rho=rho, n=n, seed=4))
    assert abs(d.m.mean() - rho) < 3 * math.sqrt(rho * (1 - rho) / n)
    # z retained for evaluation even where hidden
    assert np.all(np.isfinite(d.z))


def test_noise_variance_is_a_variance():
    d = generate(ScenarioSpec("mult_treatment", alpha=0.0, n=200_000, seed=5))
    resid = d.y - d.t
    assert abs(resid.var() - 0.1) < 0.003
    assert d.metadata["noise_variance"] == 0.1


def test_generation_formulas_hold_rowwise():
    d = generate(ScenarioSpec("mult_outcome", alpha=2.0, n=50, seed=6))
    np.testing.assert_allclose(d.t, (d.z + d.eps) / math.sqrt(2), rtol=0, atol=1e-15)
    d = generate(ScenarioSpec("semi", n=50, seed=6))
    np.testing.assert_array_equal(d.t, d.eps * d.z)


def test_true_effects():
    assert simgen.true_effect_fn(ScenarioSpec("mult_outcome"))(0.5) == 0.5
    assert simgen.true_effect_fn(ScenarioSpec("cfn_violation", alpha=1.0))(0.0) == 1.0
    assert simgen.true_effect_fn(ScenarioSpec("semi"))(-1.0) == -1.0
    with pytest.raises(DomainError):
        simgen.true_effect_fn(ScenarioSpec("counterexample"))


def test_unknown_kind_and_bad_n():
    with pytest.raises(DomainError):
        ScenarioSpec("nonsense")
    with pytest.raises(DomainError):
        ScenarioSpec("semi", n=0)


def test_counterexample_hand_rows():
    a = np.array([0.3, 0.8])
    b = np.array([0.4, 0.9])
    s = a + b
    c = np.where(s > 1, s - 1, s)
    np.testing.assert_allclose(c, [0.7, 0.7], atol=1e-15)


def test_counterexample_uniform_and_invertible():
    n = 100_000
    a, b, c = simgen.generate_counterexample(n, seed=7)
    for x in (0.25, 0.5, 0.75):
        assert abs(np.mean(c < x) - x) < 3 / math.sqrt(n)
    np.testing.assert_array_equal(simgen.invert_counterexample(a, c), b)


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_same_spec_gives_identical_csv(tmp_path):
    spec = ScenarioSpec("semi", n=300, seed=11)
    simgen.save_csv(generate(spec), tmp_path / "a.csv")
    simgen.save_csv(generate(spec), tmp_path / "b.csv")
    assert _digest(tmp_path / "a.csv") == _digest(tmp_path / "b.csv")


def test_csv_round_trip_is_bit_exact(tmp_path, rng):
    d = simgen.Dataset(rng.normal(size=1000), rng.normal(size=1000), rng.normal(size=1000) * 1e-7,
                       rng.normal(size=1000) * 1e9, (rng.random(1000) < 0.3).astype(int), {"seed": 1})
    p = tmp_path / "d.csv"
    simgen.save_csv(d, p)
    back = simgen.load_csv(p)
    for col in ("t", "eps", "y", "z", "m"):
        np.testing.assert_array_equal(getattr(back, col), getattr(d, col))
    assert back.metadata == {"seed": 1}
    assert json.loads(simgen.meta_path(p).read_text()) == {"seed": 1}


def test_missing_column_is_named(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,eps,z,m\n1,2,3,1\n")
    with pytest.raises(ParseError, match="'y'"):
        simgen.load_csv(p)


def test_bad_row_reports_line_number(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,eps,y,z,m\n1,2,3,4,1\n1,2,oops,4,1\n")
    with pytest.raises(ParseError, match="line 3"):
        simgen.load_csv(p)


def test_dataset_invariants():
    with pytest.raises(DataError):
        simgen.Dataset([1.0, np.nan], [0.0, 0.0], [0.0, 0.0])
    with pytest.raises(DataError):
        simgen.Dataset([1.0], [0.0], [0.0], None, [1])
    with pytest.raises(DataError):
        simgen.Dataset([1.0], [0.0], [0.0], [0.0], [2])
