import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flmm.basis import Penalty, SplineBasis, difference_penalty, eval_basis, solve_penalized_ls
from flmm.fdata import from_arrays
from flmm.meanfit import (
    ConfoundingWarning,
    MeanModel,
    MeanTerm,
    SmallSampleWarning,
    fit_mean,
    parse_terms,
    predict_mean,
)


def scatter(n=400, seed=0, noise=0.1, f=lambda t: np.sin(2 * t) + t):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1, n)
    return from_arrays(np.arange(n) // 5, t, f(t) + noise * rng.standard_normal(n), np.arange(n) // 20,
                       domain=(0, 1))


def two_level_data(n=600, seed=1):
    rng = np.random.default_rng(seed)
    t = np.tile(np.linspace(0, 1, n // 2), 2)
    x = np.repeat([0.0, 1.0], n // 2)
    f0 = np.sin(2 * np.pi * t)
    f1 = 1 + np.cos(np.pi * t)
    y = f0 + x * f1 + 0.02 * rng.standard_normal(n)
    cs = from_arrays(np.repeat([0, 1], n // 2), t, y, [0] * n, covariates=x[:, None],
                     covariate_names=("x",), domain=(0, 1))
    return cs, f0[: n // 2], f1[: n // 2], t[: n // 2]


def test_parse_terms():
    terms = parse_terms("t + t:order + t:order:stress")
    assert [t.name for t in terms] == ["t", "t:order", "t:order:stress"]
    assert parse_terms("t:a")[0] == MeanTerm()
    with pytest.raises(ValueError):
        parse_terms("order")


def test_constant_response():
    cs = scatter(f=lambda t: np.full_like(t, 4.2), noise=0.0)
    m = fit_mean(cs)
    g = np.linspace(0, 1, 201)
    assert np.max(np.abs(predict_mean(m, g) - 4.2)) < 1e-6


def test_varying_coefficients_recovered():
    cs, f0, f1, t = two_level_data()
    m = fit_mean(cs, "t + t:x")
    est = m.term_curves(t)
    for true, e in zip((f0, f1), est):
        assert np.linalg.norm(e - true) / np.linalg.norm(true) < 0.05


def test_predict_zero_coefficients():
    b = SplineBasis(8)
    m = MeanModel((MeanTerm(), MeanTerm(("a",))), (b, b), (np.zeros(8), np.zeros(8)), np.zeros(2), 3, ("a",))
    np.testing.assert_array_equal(predict_mean(m, np.linspace(0, 1, 11), [2.0]), 0.0)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_predict_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    b0, b1, b2 = SplineBasis(8), SplineBasis(6), SplineBasis(5)
    coefs = tuple(rng.standard_normal(b.n_basis) for b in (b0, b1, b2))
    terms = (MeanTerm(), MeanTerm(("a",)), MeanTerm(("a", "b")))
    m = MeanModel(terms, (b0, b1, b2), coefs, np.ones(3), 3, ("a", "b"))
    t = rng.uniform(0, 1, 17)
    x = rng.standard_normal(2)
    direct = (
        eval_basis(b0, t) @ coefs[0]
        + x[0] * (eval_basis(b1, t) @ coefs[1])
        + x[0] * x[1] * (eval_basis(b2, t) @ coefs[2])
    )
    np.testing.assert_allclose(predict_mean(m, t, x), direct, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(predict_mean(m, t, {"a": x[0], "b": x[1]}), direct, rtol=1e-12, atol=1e-12)
    # x = 0 isolates the intercept
    np.testing.assert_allclose(predict_mean(m, t, [0.0, 0.0]), eval_basis(b0, t) @ coefs[0], atol=1e-14)


def test_predict_outside_domain():
    m = fit_mean(scatter())
    with pytest.raises(ValueError):
        predict_mean(m, [1.5])


def test_unknown_covariate():
    with pytest.raises(KeyError):
        fit_mean(scatter(), "t + t:nope")


def test_constant_covariate_warns():
    cs = scatter()
    cs = from_arrays(cs.curve, cs.t, cs.y, cs.g1[cs.curve], covariates=np.ones((cs.n_points, 1)),
                     covariate_names=("c",), domain=(0, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.warns(ConfoundingWarning):
            fit_mean(cs, "t + t:c", lambdas=[1.0, 1.0])


def test_small_sample_warns():
    cs = from_arrays([0] * 5, np.linspace(0, 1, 5), np.arange(5.0), [0] * 5)
    with pytest.warns(SmallSampleWarning):
        fit_mean(cs, lambdas=[1.0])


def test_pooled_smoothing_equivalence():
    cs = scatter()
    m = fit_mean(cs)
    x = eval_basis(SplineBasis(8, cs.domain), cs.t)
    ref = solve_penalized_ls(x, cs.y, [Penalty(slice(0, 8), difference_penalty(8, 3))])
    np.testing.assert_allclose(m.coefs[0], ref.coef, atol=1e-12)


def test_duplicated_data_same_mean():
    cs = scatter(seed=4)
    lam = 0.37
    m1 = fit_mean(cs, lambdas=[lam])
    dup = from_arrays(
        np.r_[cs.curve, cs.curve + cs.n_curves], np.r_[cs.t, cs.t], np.r_[cs.y, cs.y],
        np.r_[cs.g1[cs.curve], cs.g1[cs.curve]], domain=cs.domain,
    )
    # the criterion doubles, so the equivalent smoothing parameter doubles too
    m2 = fit_mean(dup, lambdas=[2 * lam])
    g = np.linspace(0, 1, 50)
    np.testing.assert_allclose(predict_mean(m2, g), predict_mean(m1, g), atol=1e-8)
