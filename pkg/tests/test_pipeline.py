import warnings

import numpy as np
import pytest

from flmm.pipeline import DivergenceWarning, PipelineOptions, fit_flmm, iterate
from flmm.sim import dense_exact_scenario, generate, rrmse_function, sparse_scenario


@pytest.fixture(scope="module")
def small_state():
    cs, truth = generate(sparse_scenario(n_g1=8, n_g2=8, n_rep=2), seed=4)
    return fit_flmm(cs, n_components={"B": 2, "C": 2, "E": 2}), truth


def test_fit_produces_all_parts(small_state):
    state, _ = small_state
    assert state.prediction is not None and state.famm is None
    assert state.eigen.n_components == {"B": 2, "C": 2, "E": 2}
    assert state.prediction.fitted.shape == state.cs.y.shape


def test_unknown_predict_method(small_state):
    state, _ = small_state
    with pytest.raises(ValueError):
        fit_flmm(state.cs, predict="bayes")


def test_level_truncation():
    cs, _ = generate(sparse_scenario(n_g1=8, n_g2=8, n_rep=2), seed=4)
    state = fit_flmm(cs, PipelineOptions(level=0.5))
    assert state.eigen.level == 0.5
    assert sum(state.eigen.n_components.values()) >= 1


def test_zero_iterations_is_identity(small_state):
    state, _ = small_state
    assert iterate(state, max_iters=0) is state


def test_infinite_tolerance_runs_one_pass(small_state):
    state, _ = small_state
    out = iterate(state, max_iters=5, tol=np.inf)
    assert out.iterations == 1 and len(out.history) == 1
    assert out.options == state.options


def test_iteration_does_not_hurt_noiseless_mean():
    cfg = dense_exact_scenario(n_g1=12, n_g2=12, n_rep=2, points=10)
    errs0, errs1 = [], []
    for seed in range(3):
        cs, truth = generate(cfg, seed)
        state = fit_flmm(cs, n_components={"B": 2, "C": 1, "E": 2})
        grid = state.eigen.grid
        true = truth.term_curves(grid)["t"]
        errs0.append(rrmse_function(true, state.mean.term_curves(grid)[0]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DivergenceWarning)
            it = iterate(state, max_iters=3, tol=1e-6)
        errs1.append(rrmse_function(true, it.mean.term_curves(grid)[0]))
    assert np.mean(errs1) <= np.mean(errs0) * 1.001


def test_divergence_warning(monkeypatch, small_state):
    import flmm.pipeline as pl

    state, _ = small_state
    calls = {"n": 0}
    real = pl._mean_grid

    def growing(mean, grid):
        # report a mean that moves further on every call
        calls["n"] += 1
        return real(mean, grid) * 2.0 ** (calls["n"] ** 2)

    monkeypatch.setattr(pl, "_mean_grid", growing)
    with pytest.warns(DivergenceWarning):
        out = iterate(state, max_iters=10, tol=1e-12)
    assert out.iterations == 3
