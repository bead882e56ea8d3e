import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

import flmm.predict as predict_mod
from flmm.basis import Penalty, solve_penalized_ls
from flmm.covfit import fit_covariances
from flmm.eigen import EigenSystem, ProcessEigen, cell_grid, decompose
from flmm.fdata import center_responses, from_arrays
from flmm.meanfit import fit_mean
from flmm.predict import (
    BlupSystem,
    ProcessBlock,
    build_blup_system,
    eblup_direct,
    fit_famm,
    predict_eblup,
    solve_weights,
)
from flmm.sim import eigenfunction, generate, sparse_scenario

from conftest import toy_crossed

GRID = cell_grid(0.0, 1.0, 100)
FUNS = {"B": ["legendre0", "legendre1"], "C": ["legendre2"], "E": ["sin2pi", "cos2pi"]}


def known_system(n_components, values=None, sigma2=0.1):
    procs = {}
    for p, names in FUNS.items():
        phi = np.column_stack([eigenfunction(n, GRID) for n in names])
        nu = np.asarray(values[p] if values else [2.0, 1.0][: len(names)])
        procs[p] = ProcessEigen(nu, phi)
    return EigenSystem(GRID, GRID[1] - GRID[0], procs, n_components, sigma2, None, (0.0, 1.0))


def random_system(seed, n_points=30, n_weights=8, sigma2=0.3):
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((n_points, n_weights))
    phi[rng.uniform(size=phi.shape) < 0.3] = 0.0
    g = rng.uniform(0.1, 3.0, n_weights)
    block = ProcessBlock("E", 0, n_weights, 1)
    return BlupSystem(sp.csr_matrix(phi), g, sigma2, (block,), {}), rng.standard_normal(n_points)


def indicator_phi(cs, es, design="crossed"):
    """Brute-force [Phi^B | Phi^C | Phi^E] from level indicators."""
    ids = {"B": cs.point_g1, "C": cs.point_g2, "E": cs.curve}
    n_lev = {"B": cs.n_g1, "C": cs.n_g2, "E": cs.n_curves}
    blocks = []
    for p in ("B", "C", "E") if design == "crossed" else ("B", "E"):
        n = es.n_components[p]
        for level in range(n_lev[p]):
            for k in range(n):
                f = np.interp(cs.t, es.grid, es.functions(p)[:, k])
                blocks.append(np.where(ids[p] == level, f, 0.0))
    return np.column_stack(blocks)


class TestBlupSystem:
    def test_single_curve(self):
        t = np.array([0.1, 0.4, 0.8])
        cs = from_arrays([0, 0, 0], t, [1.0, 2.0, 3.0], [0] * 3, [0] * 3, domain=(0, 1))
        es = known_system({"B": 1, "C": 0, "E": 1})
        sys = build_blup_system(cs, es, "crossed")
        phi = sys.phi.toarray()
        assert phi.shape == (3, 2)
        np.testing.assert_allclose(phi[:, 0], np.interp(t, GRID, es.functions("B")[:, 0]))
        np.testing.assert_allclose(phi[:, 1], np.interp(t, GRID, es.functions("E")[:, 0]))

    def test_crossed_layout_matches_indicators(self):
        cs = toy_crossed(2, 2, 1, points=(3, 5))
        es = known_system({"B": 2, "C": 1, "E": 2})
        sys = build_blup_system(cs, es, "crossed")
        np.testing.assert_allclose(sys.phi.toarray(), indicator_phi(cs, es), atol=1e-15)
        assert sys.n_weights == 2 * 2 + 2 * 1 + cs.n_curves * 2
        np.testing.assert_allclose(sys.g, np.r_[np.tile([2.0, 1.0], 2), np.tile([2.0], 2),
                                                np.tile([2.0, 1.0], cs.n_curves)])

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2), st.integers(0, 1),
           st.integers(0, 2))
    @settings(max_examples=30, deadline=None)
    def test_column_count(self, i, j, h, nb, nc, ne):
        if nb + nc + ne == 0:
            return
        cs = toy_crossed(i, j, h, points=(1, 3))
        es = known_system({"B": nb, "C": nc, "E": ne})
        sys = build_blup_system(cs, es, "crossed")
        assert sys.n_weights == i * nb + j * nc + cs.n_curves * ne

    def test_no_components(self):
        cs = toy_crossed()
        with pytest.raises(ValueError):
            build_blup_system(cs, known_system({"B": 0, "C": 0, "E": 0}), "crossed")


class TestEblup:
    def test_zero_response(self):
        sys, y = random_system(0)
        res = predict_eblup(sys, np.zeros_like(y))
        np.testing.assert_array_equal(res.xi["E"], 0.0)

    @given(st.integers(0, 100_000), st.sampled_from([0.01, 0.3, 2.0]))
    @settings(max_examples=40, deadline=None)
    def test_matches_direct_form(self, seed, sigma2):
        sys, y = random_system(seed, sigma2=sigma2)
        a = solve_weights(sys, y)
        b = eblup_direct(sys, y)
        assert np.linalg.norm(a - b) <= 1e-8 * np.linalg.norm(b)

    def test_displayed_variant_differs(self):
        # (sigma^2 G + Phi'Phi)^{-1} Phi'y is not the predictor unless G = I
        sys, y = random_system(7)
        phi = sys.phi.toarray()
        display = np.linalg.solve(sys.sigma2 * np.diag(sys.g) + phi.T @ phi, phi.T @ y)
        direct = eblup_direct(sys, y)
        assert np.linalg.norm(display - direct) > 1e-3 * np.linalg.norm(direct)
        assert np.linalg.norm(solve_weights(sys, y) - direct) <= 1e-10 * np.linalg.norm(direct)

    @given(st.integers(0, 100_000))
    @settings(max_examples=40, deadline=None)
    def test_shrinkage_in_sigma2(self, seed):
        sys, y = random_system(seed)
        norms = []
        for s2 in [0.0, 1e-3, 0.01, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0]:
            xi = solve_weights(sys, y, s2)
            norms.append(xi @ (xi / sys.g))
        assert all(b <= a * (1 + 1e-9) + 1e-14 for a, b in zip(norms, norms[1:]))

    def test_shrinkage_euclidean_with_equal_variances(self):
        sys, y = random_system(3)
        sys = BlupSystem(sys.phi, np.full(sys.n_weights, 0.7), 0.3, sys.blocks, {})
        norms = [np.linalg.norm(solve_weights(sys, y, s2)) for s2 in np.geomspace(1e-4, 1e3, 30)]
        assert np.all(np.diff(norms) <= 1e-12)

    def test_sigma2_zero_is_least_squares(self):
        sys, y = random_system(5)
        ref = np.linalg.lstsq(sys.phi.toarray(), y, rcond=None)[0]
        np.testing.assert_allclose(solve_weights(sys, y, 0.0), ref, atol=1e-9)

    def test_sparse_route_matches_dense(self, monkeypatch):
        cs, _ = generate(sparse_scenario(n_g1=6, n_g2=5, n_rep=2), seed=2)
        es = known_system({"B": 2, "C": 1, "E": 2}, sigma2=0.05)
        sys = build_blup_system(cs, es, "crossed")
        dense = solve_weights(sys, cs.y)
        dense0 = solve_weights(sys, cs.y, 0.0)
        monkeypatch.setattr(predict_mod, "_DENSE_LIMIT", 10)
        np.testing.assert_allclose(solve_weights(sys, cs.y), dense, rtol=1e-9, atol=1e-11)
        # lsqr reaches the same least-squares fit (weights may differ in the null space)
        phi = sys.phi
        np.testing.assert_allclose(phi @ solve_weights(sys, cs.y, 0.0), phi @ dense0, atol=1e-6)

    def test_dimension_and_finiteness(self):
        sys, y = random_system(0)
        with pytest.raises(ValueError):
            predict_eblup(sys, y[:-1])
        bad = y.copy()
        bad[0] = np.nan
        with pytest.raises(ValueError):
            predict_eblup(sys, bad)

    def test_fitted_is_mean_plus_effects(self):
        cs = toy_crossed(3, 3, 2)
        es = known_system({"B": 2, "C": 1, "E": 1})
        sys = build_blup_system(cs, es, "crossed")
        mean = np.linspace(-1, 1, cs.n_points)
        res = predict_eblup(sys, cs.y, mean, es)
        np.testing.assert_allclose(res.fitted, mean + sum(res.point_effects.values()), atol=1e-14)
        np.testing.assert_allclose(res.random_points, sys.phi @ solve_weights(sys, cs.y), atol=1e-12)
        assert res.grid_curves["B"].shape == (3, GRID.size)


@pytest.fixture(scope="module")
def sparse_fit():
    cs, _ = generate(sparse_scenario(n_g1=8, n_g2=8, n_rep=2), seed=11)
    mean = fit_mean(cs)
    cov = fit_covariances(center_responses(cs, mean))
    es = decompose(cov, n_components={"B": 2, "C": 2, "E": 2})
    return cs, mean, es


class TestFamm:
    def test_no_components_reduces_to_mean_fit(self, sparse_fit):
        cs, mean, es = sparse_fit
        famm = fit_famm(cs, es.with_components({"B": 0, "C": 0, "E": 0}))
        np.testing.assert_allclose(np.concatenate(famm.mean.coefs), np.concatenate(mean.coefs), atol=1e-8)

    def test_sum_to_zero(self, sparse_fit):
        cs, _, es = sparse_fit
        famm = fit_famm(cs, es)
        for p, curves in famm.prediction.grid_curves.items():
            assert np.max(np.abs(curves.sum(axis=0))) < 1e-6
        assert set(famm.fpc_lambdas) == {"B", "C", "E"}

    def test_bands_symmetric(self, sparse_fit):
        cs, _, es = sparse_fit
        famm = fit_famm(cs, es)
        grid, est, lo, hi = famm.bands["t"]
        np.testing.assert_allclose(est - lo, hi - est, atol=1e-12)
        assert np.all(hi > lo)

    def test_weight_blocks_alone_equal_eblup(self, sparse_fit):
        cs, mean, es = sparse_fit
        y = center_responses(cs, mean).y
        sys = build_blup_system(cs, es, "crossed")
        pens = [Penalty(b.cols, sp.diags(np.tile(1.0 / es.values(b.process), b.n_levels)), es.sigma2)
                for b in sys.blocks]
        joint = solve_penalized_ls(sys.phi, y, pens)
        eblup = solve_weights(sys, y)
        np.testing.assert_allclose(joint.coef, eblup, rtol=1e-8, atol=1e-10)

    def test_famm_close_to_eblup(self, sparse_fit):
        cs, mean, es = sparse_fit
        famm = fit_famm(cs, es)
        sys = build_blup_system(cs, es, "crossed")
        eblup = predict_eblup(sys, center_responses(cs, mean).y, mean.predict_points(cs))
        rel = np.linalg.norm(famm.prediction.fitted - eblup.fitted) / np.linalg.norm(eblup.fitted)
        assert rel < 0.1
