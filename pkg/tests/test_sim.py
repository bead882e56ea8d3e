import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import flmm.sim as sim
from flmm.pipeline import PipelineOptions
from flmm.sim import (
    BASIS_FUNCTIONS,
    MEAN_FUNCTIONS,
    PRESETS,
    ScenarioConfig,
    center_decorrelate,
    dense_exact_scenario,
    eigenfunction,
    fri_scenario,
    generate,
    rrmse_function,
    rrmse_scalar,
    rrmse_surface,
    rrmse_vector,
    run_study,
    sparse_scenario,
)


class TestGenerate:
    def test_sparse_sizes(self):
        cfg = sparse_scenario()
        cs, truth = generate(cfg)
        assert cs.n_curves == cfg.n_curves == 4800
        assert set(np.unique(cs.points_per_curve)) <= set(range(3, 11))
        assert truth.xi["B"].shape == (40, 2) and truth.xi["E"].shape == (4800, 2)

    def test_centered_decorrelated_weights(self):
        cs, truth = generate(sparse_scenario(n_g1=12, n_g2=9, n_rep=2), seed=3)
        for p, w in truth.xi.items():
            nu = truth.eigenvalues(p)
            np.testing.assert_allclose(w.mean(axis=0), 0.0, atol=1e-12)
            np.testing.assert_allclose(w.T @ w / w.shape[0], np.diag(nu), atol=1e-10)

    def test_no_effects_no_noise(self):
        cfg = sparse_scenario(n_g1=3, n_g2=3, n_rep=1, processes={}, sigma2=0.0)
        cs, _ = generate(cfg)
        np.testing.assert_array_equal(cs.y, MEAN_FUNCTIONS["sin_plus_t"](cs.t))

    def test_responses_follow_truth(self):
        cfg = sparse_scenario(n_g1=4, n_g2=3, n_rep=2, sigma2=0.0)
        cs, truth = generate(cfg, seed=9)
        expect = np.sin(cs.t) + cs.t
        ids = {"B": cs.point_g1, "C": cs.point_g2, "E": cs.curve}
        for p in "BCE":
            phi = truth.process_functions(p, cs.t)
            expect = expect + np.sum(phi * truth.xi[p][ids[p]], axis=1)
        np.testing.assert_allclose(cs.y, expect, atol=1e-12)

    def test_fri_covariates(self):
        cs, truth = generate(fri_scenario())
        assert cs.covariate_names == ("x1", "x2", "x3", "x4")
        assert cs.n_g1 == 9 and cs.n_curves == 9 * 16 * 2

    def test_seed_determinism(self):
        a, _ = generate(sparse_scenario(n_g1=3, n_g2=3), seed=5)
        b, _ = generate(sparse_scenario(n_g1=3, n_g2=3), seed=5)
        np.testing.assert_array_equal(a.y, b.y)

    @pytest.mark.parametrize("names", [["legendre0", "legendre1", "legendre2", "legendre3"],
                                       ["sin2pi", "cos2pi", "sin4pi", "cos4pi", "legendre0"]])
    @pytest.mark.parametrize("domain", [(0.0, 1.0), (-1.0, 2.0)])
    def test_families_orthonormal(self, names, domain):
        t = np.linspace(*domain, 10_000)
        f = np.array([eigenfunction(n, t, domain) for n in names])
        gram = np.array([[np.trapezoid(a * b, t) for b in f] for a in f])
        np.testing.assert_allclose(gram, np.eye(len(names)), atol=1e-4)


class TestConfig:
    def test_ascending_eigenvalues_rejected(self):
        with pytest.raises(ValueError, match="descending"):
            sparse_scenario(processes={"B": {"functions": ["legendre0", "legendre1"], "eigenvalues": [1, 2]}})

    @pytest.mark.parametrize("bad", [dict(points=(0, 3)), dict(points=(5, 3)), dict(sigma2=-1.0),
                                     dict(design="nested"), dict(mean={"t:x": "zero"})])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            sparse_scenario(**bad)

    def test_fri_rejects_word_process(self):
        with pytest.raises(ValueError):
            fri_scenario(processes={"C": {"functions": ["legendre0"], "eigenvalues": [1.0]}})

    def test_dict_round_trip(self):
        for make in PRESETS.values():
            cfg = make()
            assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.as_dict()))) == cfg

    def test_preset_with_overrides(self):
        cfg = ScenarioConfig.from_dict({"preset": "sparse", "n_g1": 5})
        assert cfg.n_g1 == 5 and cfg.n_g2 == 40


class TestMetrics:
    def test_simple_values(self):
        assert rrmse_scalar(2.0, 1.0) == 0.5

    def test_eigenfunction_flip(self):
        f = np.sin(np.linspace(0, 3, 50))
        assert rrmse_function(f, -f, flip=True) == 0.0
        assert rrmse_function(f, -f) == pytest.approx(2.0)

    @given(st.integers(0, 100_000), st.integers(1, 50))
    @settings(max_examples=50, deadline=None)
    def test_direct_summation(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        num = sum((x - y) ** 2 for x, y in zip(a, b)) / n
        den = sum(x * x for x in a) / n
        assert rrmse_vector(a, b) == pytest.approx(math.sqrt(num / den), rel=1e-12)
        m1, m2 = rng.standard_normal((3, n)), rng.standard_normal((3, n))
        num = sum((x - y) ** 2 for x, y in zip(m1.ravel(), m2.ravel())) / m1.size
        den = sum(x * x for x in m1.ravel()) / m1.size
        assert rrmse_surface(m1, m2) == pytest.approx(math.sqrt(num / den), rel=1e-12)

    def test_zero_denominator(self):
        with pytest.raises(ZeroDivisionError):
            rrmse_vector(np.zeros(3), np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rrmse_vector(np.ones(3), np.ones(4))


class TestStudy:
    def test_same_seed_same_report(self):
        cfg = sparse_scenario(n_g1=5, n_g2=5, n_rep=2)
        a = run_study(cfg, n_replicates=2)
        b = run_study(cfg, n_replicates=2)
        assert a.to_json() == b.to_json()
        assert all(v >= 0 and np.isfinite(v) for v in a.averages.values())

    def test_workers_do_not_change_results(self):
        cfg = sparse_scenario(n_g1=5, n_g2=5, n_rep=2)
        assert run_study(cfg, n_replicates=2, workers=2).to_json() == run_study(cfg, n_replicates=2).to_json()

    def test_failures_recorded(self, monkeypatch):
        real = sim.run_replicate

        def flaky(cfg, options, r):
            if r == 1:
                raise RuntimeError("boom")
            return real(cfg, options, r)

        monkeypatch.setattr(sim, "run_replicate", flaky)
        rep = run_study(sparse_scenario(n_g1=5, n_g2=5, n_rep=2), n_replicates=3)
        assert rep.n_ok == 2 and len(rep.failures) == 1
        assert rep.failures[0]["replicate"] == 1 and "boom" in rep.failures[0]["error"]
        assert rep.per_replicate[1] is None

    def test_fixed_truncation_uses_true_counts(self):
        rep = run_study(sparse_scenario(n_g1=5, n_g2=5, n_rep=2), n_replicates=1)
        assert rep.options["n_components"] == {"B": 2, "C": 2, "E": 2}
        lvl = run_study(sparse_scenario(n_g1=5, n_g2=5, n_rep=2), n_replicates=1, truncation="level")
        assert lvl.options["n_components"] is None

    def test_near_oracle_regime(self):
        rep = run_study(dense_exact_scenario(), n_replicates=3)
        assert rep.n_ok == 3
        errs = {k: v for k, v in rep.averages.items() if k != "sigma2_abs"}
        assert max(errs.values()) < 0.05, errs
        assert rep.averages["sigma2_abs"] < 0.05

    def test_weight_adjustment_helps_eigenvalues(self):
        cfg = sparse_scenario(n_g1=12, n_g2=12, n_rep=2)
        with_adj = run_study(cfg, n_replicates=8)
        without = run_study(replace(cfg, center_decorrelate=False), n_replicates=8)

        def nu_avg(rep):
            return np.mean([v for k, v in rep.averages.items() if k.startswith("nu")])

        assert nu_avg(with_adj) <= nu_avg(without)

    def test_report_files(self, tmp_path):
        rep = run_study(sparse_scenario(n_g1=5, n_g2=5, n_rep=2), n_replicates=1)
        rep.write(tmp_path)
        rows = (tmp_path / "rrmse_table.csv").read_text().splitlines()
        assert rows[0].startswith("process,K,phi1")
        assert [r.split(",")[0] for r in rows[1:]] == ["B", "C", "E"]
        assert json.loads((tmp_path / "report.json").read_text())["n_ok"] == 1


def test_center_decorrelate_needs_enough_levels():
    with pytest.raises(ValueError):
        center_decorrelate(np.ones((2, 2)), np.ones(2))


def test_sigma2_absolute_when_noiseless():
    rep = run_study(dense_exact_scenario(n_g1=6, n_g2=6), n_replicates=1)
    assert "sigma2_abs" in rep.averages and "sigma2" not in rep.averages
