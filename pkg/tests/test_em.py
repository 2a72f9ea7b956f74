import numpy as np
import pytest
from scipy.special import logit

from helpers import fd_gradient, fd_jacobian, random_instance, rel_err
from ordinal_lvm.em import (
    FitConfig,
    align_solution,
    expected_score,
    expected_scores,
    fit,
    initial_params,
    item_hessian,
    item_objective,
    m_step,
)
from ordinal_lvm.geometry import find_mode, score_components
from ordinal_lvm.integration import ApproximationMethod, e_step, expectation_fla, log_marginal_lik
from ordinal_lvm.model import ItemParams, ModelParams, OrdinalDataset
from ordinal_lvm.simulation import ScenarioSpec, generate, sample_responses, symmetric_population


def dataset_from(params, n, seed):
    rng = np.random.default_rng(seed)
    y = sample_responses(params, rng.standard_normal((n, params.q)), rng)
    return OrdinalDataset(y, params.categories)


@pytest.fixture(scope="module")
def small_problem():
    rng = np.random.default_rng(0)
    params, _ = random_instance(rng, p=5, c=4, q=2, loading=(0.5, 1.5))
    return params, dataset_from(params, 80, 1)


# -- objective and derivatives ---------------------------------------------------------------------


@pytest.mark.parametrize("method", ["laplace", "fla", "gh", "agh-mode", "agh-mean"])
def test_item_objective_gradient(small_problem, method):
    params, data = small_problem
    post, _ = e_step(params, data, ApproximationMethod(method, 5))
    for i in (0, 3):
        it = params.items[i]
        y = data.responses[:, i]
        v0 = np.concatenate((it.thresholds + 0.1, it.loadings * 0.9))
        k = it.thresholds.size

        def f(v):
            return item_objective(v[:k], v[k:], y, post)[0]

        _, g_tau, g_alpha = item_objective(v0[:k], v0[k:], y, post)
        assert rel_err(np.concatenate((g_tau, g_alpha)), fd_gradient(f, v0)) < 1e-6


def test_item_hessian_matches_gradient_differences(small_problem):
    params, data = small_problem
    post, _ = e_step(params, data, ApproximationMethod("agh-mode", 5))
    it = params.items[2]
    y = data.responses[:, 2]
    k = it.thresholds.size
    v0 = np.concatenate((it.thresholds, it.loadings))

    def g(v):
        _, gt, ga = item_objective(v[:k], v[k:], y, post)
        return np.concatenate((gt, ga))

    assert rel_err(item_hessian(v0[:k], v0[k:], y, post), fd_jacobian(g, v0)) < 1e-6


def test_fla_objective_gradient_is_fla_expected_score(small_problem):
    params, data = small_problem
    post, _ = e_step(params, data, ApproximationMethod("fla"))
    total = expected_scores(params, data, post)
    direct = [np.zeros(it.n_params) for it in params.items]
    for row in data.responses[:15]:
        for i in range(params.p):
            direct[i] += expected_score(params, row, i, ApproximationMethod("fla"))
    sub = OrdinalDataset(data.responses[:15], data.categories)
    post15, _ = e_step(params, sub, ApproximationMethod("fla"))
    for a, b in zip(expected_scores(params, sub, post15), direct):
        np.testing.assert_allclose(a, b, atol=1e-9)
    assert len(total) == params.p


def test_expected_score_assembly_from_components():
    rng = np.random.default_rng(2)
    params, y = random_instance(rng, p=6, q=2)
    geo = find_mode(params, y)
    for i in range(params.p):
        comps = score_components(params, y, i)
        got = expected_score(params, y, i, ApproximationMethod("fla"))
        c = params.items[i].n_categories
        for comp in comps["A1"]:
            assert got[comp.s - 1] == pytest.approx(
                expectation_fla(params, y, geo, comp) - sum(
                    expectation_fla(params, y, geo, a2) for a2 in comps["A2"] if a2.s == comp.s
                ),
                abs=1e-12,
            )
        for comp in comps["A3"]:
            assert got[c - 1 + comp.coord] == pytest.approx(-expectation_fla(params, y, geo, comp), abs=1e-12)


def test_expected_score_zero_loadings_loading_block_vanishes():
    params = ModelParams.from_arrays([[-1.0, 0.3, 1.2]] * 4, np.zeros((4, 2)))
    y = np.array([1, 4, 2, 3])
    for method in ("laplace", "fla", "gh", "agh-mode"):
        for i in range(4):
            s = expected_score(params, y, i, ApproximationMethod(method, 7))
            np.testing.assert_allclose(s[3:], 0.0, atol=1e-12)


def test_fla_expected_score_close_to_quadrature_with_many_items():
    rng = np.random.default_rng(0)
    diffs = []
    for _ in range(10):
        base, y0 = random_instance(rng, p=5, q=1)
        params = ModelParams.from_arrays(base.thresholds() * 4, np.tile(base.loading_matrix, (4, 1)))
        y = np.tile(y0, 4)
        for i in range(5):
            fla = expected_score(params, y, i, ApproximationMethod("fla"))
            ref = expected_score(params, y, i, ApproximationMethod("agh-mode", 81))
            diffs.append(np.max(np.abs(fla - ref)))
    assert np.median(diffs) < 1e-3


# -- M-step -------------------------------------------------------------------------------------------


def test_m_step_closed_form_thresholds_without_loadings():
    rng = np.random.default_rng(3)
    n = 500
    y = np.column_stack([rng.integers(1, 5, n), rng.integers(1, 3, n)])
    data = OrdinalDataset(y, np.array([4, 2]))
    mask = np.ones((2, 1), dtype=bool)
    start = ModelParams.from_arrays([[-2.0, 0.0, 2.0], [1.0]], np.zeros((2, 1)), mask)
    for method in ("fla", "gh"):
        post, _ = e_step(start, data, ApproximationMethod(method, 5))
        new, failed = m_step(start, data, post, FitConfig(method=ApproximationMethod(method, 5)))
        assert not failed
        for i, it in enumerate(new.items):
            c = it.n_categories
            freq = np.cumsum(np.bincount(y[:, i], minlength=c + 1)[1:])[:-1] / n
            np.testing.assert_allclose(it.thresholds, logit(freq), atol=1e-7)
            assert np.all(it.loadings == 0.0)


def test_single_binary_item_reduces_to_logistic_intercept():
    y = np.array([[1]] * 30 + [[2]] * 70)
    data = OrdinalDataset(y, np.array([2]))
    res = fit(data, 1, FitConfig(), mask=np.ones((1, 1), dtype=bool))
    assert res.converged
    assert res.params.items[0].thresholds[0] == pytest.approx(logit(0.3), abs=1e-7)


def test_mask_and_ordering_hold_in_every_iterate():
    params = symmetric_population()
    data = dataset_from(params, 150, 4)
    cfg = FitConfig(max_iter=1)
    current = initial_params(data, 2)
    for _ in range(15):
        res = fit(data, 2, cfg, init=current)
        current = res.params
        assert current.loading_matrix[0, 1] == 0.0
        for it in current.items:
            assert np.all(np.diff(it.thresholds) >= 1e-6)


# -- whole fits ---------------------------------------------------------------------------------------


def test_fit_without_loadings_matches_independence_model():
    # With no true loadings the likelihood is nearly flat in alpha, so the
    # estimates need not be near zero; what must hold is that the fit adds
    # little likelihood over independence and reproduces the marginal logits.
    params = ModelParams.from_arrays([[-1.0, 0.0, 1.0]] * 5, np.zeros((5, 1)))
    data = dataset_from(params, 1000, 5)
    res = fit(data, 1, FitConfig())
    assert res.valid
    ll_fit = log_marginal_lik(res.params, data, ApproximationMethod("gh", 41))
    ll_indep = 0.0
    for i, it in enumerate(res.params.items):
        counts = np.bincount(data.responses[:, i], minlength=5)[1:]
        ll_indep += np.sum(counts * np.log(counts / data.n))
        np.testing.assert_allclose(it.thresholds, logit(np.cumsum(counts)[:-1] / data.n), atol=0.1)
    # chi-square(5) 0.999 quantile is about 20.5
    assert -1e-6 < 2 * (ll_fit - ll_indep) < 20.5


def test_fit_is_deterministic_and_a_fixed_point():
    spec = ScenarioSpec(symmetric_population(), n=200, replicates=1, seed=11)
    data = generate(spec, 0)
    cfg = FitConfig(tol=1e-6, loglik_tol=1e-9, max_iter=3000)
    res = fit(data, 2, cfg)
    again = fit(data, 2, cfg)
    assert res.valid
    np.testing.assert_array_equal(res.params.free_vector(), again.params.free_vector())
    refit = fit(data, 2, cfg, init=res.params)
    assert np.max(np.abs(refit.params.free_vector() - res.params.free_vector())) < 1e-4
    # stationarity: per-observation expected score is tiny at the estimate
    post, _ = e_step(res.params, data, cfg.method)
    worst = max(np.max(np.abs(g)) for g in expected_scores(res.params, data, post))
    assert worst / data.n < 1e-5


def test_quadrature_em_log_likelihood_increases():
    rng = np.random.default_rng(6)
    params, _ = random_instance(rng, p=5, c=4, q=1, loading=(0.5, 1.5))
    data = dataset_from(params, 150, 7)
    res = fit(data, 1, FitConfig(method=ApproximationMethod("gh", 21), max_iter=60))
    assert np.all(np.diff(res.loglik_trace) >= -1e-8)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(tol=0.0)
    with pytest.raises(ValueError):
        FitConfig(init="spectral")
    with pytest.raises(ValueError):
        fit(OrdinalDataset(np.array([[1, 2]]), np.array([2, 2])), 0)


def test_invalid_fit_is_flagged_not_raised():
    # all responses in the extreme categories push loadings to the boundary
    y = np.array([[1, 1, 1], [2, 2, 2]] * 40)
    res = fit(OrdinalDataset(y, np.array([2, 2, 2])), 1, FitConfig(max_iter=200))
    assert not res.valid
    assert res.diagnostic


# -- alignment ----------------------------------------------------------------------------------------


def test_align_solution():
    rng = np.random.default_rng(8)
    params, _ = random_instance(rng, p=5, q=2)
    assert np.array_equal(align_solution(params, params).loading_matrix, params.loading_matrix)
    flipped = ModelParams.from_arrays(params.thresholds(), params.loading_matrix * np.array([-1.0, 1.0]))
    np.testing.assert_array_equal(align_solution(flipped, params).loading_matrix, params.loading_matrix)
    for _ in range(20):
        noisy = params.loading_matrix * rng.choice([-1.0, 1.0], 2) + rng.normal(scale=0.3, size=(5, 2))
        cand = ModelParams.from_arrays(params.thresholds(), noisy)
        before = np.sum((cand.loading_matrix - params.loading_matrix) ** 2)
        after = np.sum((align_solution(cand, params).loading_matrix - params.loading_matrix) ** 2)
        assert after <= before + 1e-12


def test_item_params_replace_keeps_mask():
    it = ItemParams(np.array([0.0, 1.0]), np.array([0.5, 0.0]), fixed=np.array([False, True]))
    assert it.replace(loadings=np.array([0.7, 0.0])).fixed.tolist() == [False, True]
