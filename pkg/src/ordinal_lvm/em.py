"""Full-information maximum likelihood by EM.

Each iteration finds the posterior summaries of every pattern (E-step) and
then, item by item, solves the expected score equations by Newton-Raphson
(M-step). The E-step output is kept as a linear functional over functions of
``z`` -- posterior weights at nodes for the quadrature methods, a
mode/shift/covariance triple for Laplace and FLA -- so that the expected
complete-data log-likelihood of an item can be re-evaluated at trial
parameters during the inner Newton solve.

Thresholds are optimised as ``(tau_1, log(tau_2 - tau_1 - gap_min), ...)``
so every iterate stays strictly ordered.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit

from .geometry import ModeConfig, find_mode, score_components
from .integration import (
    ApproximationMethod,
    EStepState,
    PointPosterior,
    QuadraturePosterior,
    e_step,
    expectation_fla,
    gauss_hermite,
    quadrature_pass,
)
from .geometry import _ridged_cholesky
from .model import (
    LINK,
    LOG_PROB_FLOOR,
    MIN_THRESHOLD_GAP,
    ItemParams,
    ModelParams,
    OrdinalDataset,
    complete_data_score,
    default_constraint_mask,
)

log = logging.getLogger(__name__)

MAX_ABS_LOADING = 25.0


@dataclass(frozen=True)
class FitConfig:
    method: ApproximationMethod = field(default_factory=lambda: ApproximationMethod("fla"))
    max_iter: int = 500
    tol: float = 1e-4
    loglik_tol: float = 1e-6
    mstep_tol: float = 1e-8
    mstep_max_iter: int = 50
    init: str = "empirical"
    seed: int = 0
    mode_tol: float = 1e-8
    mode_max_iter: int = 100
    max_abs_loading: float = MAX_ABS_LOADING

    def __post_init__(self):
        if min(self.tol, self.loglik_tol, self.mstep_tol, self.mode_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if min(self.max_iter, self.mstep_max_iter, self.mode_max_iter) < 1:
            raise ValueError("iteration limits must be at least 1")
        if self.init not in ("empirical", "random"):
            raise ValueError(f"unknown init policy {self.init!r}")

    @property
    def mode_config(self) -> ModeConfig:
        return ModeConfig(tol=self.mode_tol, max_iter=self.mode_max_iter)


@dataclass
class FitResult:
    params: ModelParams
    loglik: float
    iterations: int
    converged: bool
    valid: bool
    loglik_trace: list[float]
    change_trace: list[float]
    seconds: float
    diagnostic: str = ""


# ---------------------------------------------------------------------------
# Expected complete-data log-likelihood of one item
# ---------------------------------------------------------------------------


def _item_bounds(tau, y):
    ext = np.concatenate(([-np.inf], tau, [np.inf]))
    return ext[y], ext[y - 1]


def item_objective(tau, alpha, y, posterior):
    """Expected complete-data log-likelihood of one item and its gradient.

    ``y`` is the item's response column. Returns ``(Q, grad_tau, grad_alpha)``;
    the gradient is the expected score summed over observations.
    """
    tau = np.asarray(tau, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    c = tau.size + 1
    upper, lower = _item_bounds(tau, y)
    up_idx = y - 1
    lo_idx = np.maximum(y - 2, 0)
    if isinstance(posterior, QuadraturePosterior):
        z, w = posterior.nodes, posterior.weights
        lin = z @ alpha
        eu, el = upper[:, None] - lin, lower[:, None] - lin
        gu, gl = LINK.cdf(eu), LINK.cdf(el)
        log_pi = np.maximum(LINK.log_interval(eu, el), LOG_PROB_FLOOR)
        pi = np.exp(log_pi)
        q_val = float(np.sum(w * log_pi))
        s_up = np.sum(w * LINK.density(gu) / pi, axis=1)
        s_lo = np.sum(w * LINK.density(gl) / pi, axis=1)
        g_alpha = -np.einsum("nm,nm,nma->a", w, 1.0 - gu - gl, z)
    else:
        zh, dlt, cov = posterior.mode, posterior.shift, posterior.cov
        lin = zh @ alpha
        eu, el = upper - lin, lower - lin
        gu, gl = LINK.cdf(eu), LINK.cdf(el)
        log_pi = np.maximum(LINK.log_interval(eu, el), LOG_PROB_FLOOR)
        pi = np.exp(log_pi)
        du, dl = LINK.density(gu), LINK.density(gl)
        eu_, el_ = LINK.density_slope(gu), LINK.density_slope(gl)
        r = 1.0 - gu - gl
        big_d, big_e = du + dl, eu_ + el_
        ad = dlt @ alpha
        va = cov @ alpha
        ava = va @ alpha
        q_val = float(np.sum(log_pi - r * ad - 0.5 * big_d * ava))
        # FLA expectations of A1, A2, A3 (Laplace when shift and cov vanish)
        s_up = du / pi + du * ad - 0.5 * eu_ * ava
        s_lo = dl / pi - dl * ad + 0.5 * el_ * ava
        ea3 = r[:, None] * (zh + dlt) + (big_d * ad)[:, None] * zh + big_d[:, None] * va - 0.5 * (big_e * ava)[:, None] * zh
        g_alpha = -ea3.sum(axis=0)
    g_tau = np.bincount(up_idx, s_up, minlength=c)[: c - 1] - np.bincount(lo_idx, np.where(y >= 2, s_lo, 0.0), minlength=c)[: c - 1]
    return q_val, g_tau, g_alpha


# ---------------------------------------------------------------------------
# Reparameterisation
# ---------------------------------------------------------------------------


def _to_rho(item: ItemParams) -> np.ndarray:
    tau = item.thresholds
    gaps = np.maximum(np.diff(tau) - MIN_THRESHOLD_GAP, 1e-300)
    return np.concatenate(([tau[0]], np.log(gaps), item.loadings[~item.fixed]))


def _from_rho(rho, item: ItemParams):
    k = item.n_categories - 1
    inc = np.exp(rho[1:k]) + MIN_THRESHOLD_GAP
    tau = rho[0] + np.concatenate(([0.0], np.cumsum(inc)))
    alpha = np.zeros(item.q)
    alpha[~item.fixed] = rho[k:]
    return tau, alpha, inc


def item_hessian(tau, alpha, y, posterior):
    """Analytic Hessian of :func:`item_objective` for node-weight posteriors.

    With ``u = tau_y - alpha'z`` and ``v = tau_{y-1} - alpha'z`` the log
    category probability has ``l_u = d_u/pi``, ``l_v = -d_l/pi``,
    ``l_uu = e_u/pi - l_u^2``, ``l_vv = -e_l/pi - l_v^2``, ``l_uv = -l_u l_v``.
    """
    tau = np.asarray(tau, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    c = tau.size + 1
    q = alpha.size
    z, w = posterior.nodes, posterior.weights
    upper, lower = _item_bounds(tau, y)
    lin = z @ alpha
    eu, el = upper[:, None] - lin, lower[:, None] - lin
    gu, gl = LINK.cdf(eu), LINK.cdf(el)
    pi = np.exp(np.maximum(LINK.log_interval(eu, el), LOG_PROB_FLOOR))
    lu = LINK.density(gu) / pi
    lv = -LINK.density(gl) / pi
    luu = LINK.density_slope(gu) / pi - lu**2
    lvv = -LINK.density_slope(gl) / pi - lv**2
    luv = -lu * lv
    up = y - 1
    lo = np.maximum(y - 2, 0)
    h_tt = np.zeros((c, c))
    np.add.at(h_tt, (up, up), np.sum(w * luu, axis=1))
    np.add.at(h_tt, (lo, lo), np.sum(w * lvv, axis=1))
    cross = np.sum(w * luv, axis=1)
    np.add.at(h_tt, (up, lo), cross)
    np.add.at(h_tt, (lo, up), cross)
    h_ta = np.zeros((c, q))
    np.add.at(h_ta, up, -np.einsum("nm,nma->na", w * (luu + luv), z))
    np.add.at(h_ta, lo, -np.einsum("nm,nma->na", w * (luv + lvv), z))
    h_aa = np.einsum("nm,nma,nmb->ab", w * (luu + 2 * luv + lvv), z, z)
    k = c - 1
    hess = np.zeros((k + q, k + q))
    hess[:k, :k] = h_tt[:k, :k]
    hess[:k, k:] = h_ta[:k]
    hess[k:, :k] = h_ta[:k].T
    hess[k:, k:] = h_aa
    return hess


def _rho_hessian(rho, item, y, posterior):
    """Analytic Hessian in the reparameterised space (quadrature posteriors)."""
    tau, alpha, inc = _from_rho(rho, item)
    k = tau.size
    _, g_tau, _ = item_objective(tau, alpha, y, posterior)
    full = item_hessian(tau, alpha, y, posterior)
    free = np.concatenate((np.ones(k, dtype=bool), ~item.fixed))
    full = full[np.ix_(free, free)]
    jac = np.eye(full.shape[0])
    ex = inc - MIN_THRESHOLD_GAP
    for s in range(1, k):
        jac[:k, s] = 0.0
        jac[s:k, s] = ex[s - 1]
    jac[:k, 0] = 1.0
    hess = jac.T @ full @ jac
    tail = np.cumsum(g_tau[::-1])[::-1]
    hess[np.arange(1, k), np.arange(1, k)] += tail[1:] * ex
    return 0.5 * (hess + hess.T)


def _objective_rho(rho, item, y, posterior):
    tau, alpha, inc = _from_rho(rho, item)
    if not np.all(np.isfinite(tau)):
        return -np.inf, np.full(rho.size, np.nan)
    q_val, g_tau, g_alpha = item_objective(tau, alpha, y, posterior)
    k = tau.size
    # d tau_m / d rho_s = exp(rho_s) for m >= s
    tail = np.cumsum(g_tau[::-1])[::-1]
    grad = np.concatenate(([tail[0]], tail[1:] * (inc - MIN_THRESHOLD_GAP), g_alpha[~item.fixed]))
    return q_val, grad


def _fd_hessian(grad_fn, rho, g0):
    k = rho.size
    h = 1e-5 * np.maximum(1.0, np.abs(rho))
    hess = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h[j]
        hess[:, j] = (grad_fn(rho + e) - grad_fn(rho - e)) / (2.0 * h[j])
    if not np.all(np.isfinite(hess)):
        hess = np.where(np.isfinite(hess), hess, 0.0)
    return 0.5 * (hess + hess.T)


def solve_item(item: ItemParams, y, posterior, tol=1e-8, max_iter=50):
    """Maximise one item's expected complete-data log-likelihood.

    Newton-Raphson with a finite-difference Hessian of the analytic expected
    score, ridge when the Hessian is not negative definite, and step halving
    on the objective. Returns ``(item, converged, failed)``.
    """
    n = y.shape[0]
    rho = _to_rho(item)
    fval, grad = _objective_rho(rho, item, y, posterior)
    converged = False
    for _ in range(max_iter):
        if np.max(np.abs(grad)) / n < tol:
            converged = True
            break
        if isinstance(posterior, QuadraturePosterior):
            hess = _rho_hessian(rho, item, y, posterior)
        else:
            hess = _fd_hessian(lambda r: _objective_rho(r, item, y, posterior)[1], rho, grad)
        neg = -hess
        lam = 0.0
        eye = np.eye(rho.size)
        scale = max(1e-8, np.max(np.abs(np.diag(neg))))
        while True:
            try:
                chol = np.linalg.cholesky(neg + lam * eye)
                break
            except np.linalg.LinAlgError:
                lam = 1e-4 * scale if lam == 0.0 else 2.0 * lam
                if lam > 1e12 * scale:
                    chol = np.sqrt(scale) * eye
                    break
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        step_len = 1.0
        accepted = False
        for _h in range(30):
            trial = rho + step_len * step
            f_new, g_new = _objective_rho(trial, item, y, posterior)
            if np.isfinite(f_new) and f_new >= fval - 1e-12 * (1.0 + abs(fval)):
                accepted = True
                break
            step_len *= 0.5
        if not accepted:
            # no ascent left at machine precision
            converged = np.max(np.abs(grad)) / n < 1e-5
            break
        moved = np.max(np.abs(trial - rho))
        rho, fval, grad = trial, f_new, g_new
        _, alpha_now, _ = _from_rho(rho, item)
        if not np.all(np.isfinite(rho)) or np.max(np.abs(alpha_now), initial=0.0) > 1e3:
            tau, alpha, _ = _from_rho(np.nan_to_num(rho), item)
            return item, False, True
        if moved < tol:
            converged = True
            break
    tau, alpha, _ = _from_rho(rho, item)
    return ItemParams(tau, alpha, item.fixed), converged, False


def m_step(params: ModelParams, dataset: OrdinalDataset, posterior, config: FitConfig = FitConfig()):
    """Solve the expected score equations of every item.

    Returns ``(params, failed)``; ``failed`` is true when an inner Newton
    diverged (the item is then left at its previous value).
    """
    items = []
    failed = False
    for i, item in enumerate(params.items):
        new, _, bad = solve_item(item, dataset.responses[:, i], posterior, config.mstep_tol, config.mstep_max_iter)
        failed |= bad
        items.append(item if bad else new)
    return ModelParams(tuple(items)), failed


# ---------------------------------------------------------------------------
# Expected scores
# ---------------------------------------------------------------------------


def expected_score(params: ModelParams, pattern, item: int, method: ApproximationMethod,
                   state=None, mode_config: ModeConfig = ModeConfig()) -> np.ndarray:
    """Posterior expectation of the complete-data score of one item for one pattern.

    FLA assembles the score from FLA expectations of the ``A`` components;
    quadrature methods integrate the whole score at the nodes; Laplace
    evaluates it at the mode. ``state`` is the :class:`AghMeanState` of the
    pattern for ``agh-mean``.
    """
    pattern = np.asarray(pattern)
    it = params.items[item]
    y = int(pattern[item])
    c = it.n_categories
    if method.tag in ("laplace", "fla"):
        geo = find_mode(params, pattern, config=mode_config)
        if method.tag == "laplace":
            return complete_data_score(it, y, geo.mode)
        comps = score_components(params, pattern, item)
        out = np.zeros(it.n_params)
        for comp in comps["A1"]:
            out[comp.s - 1] += expectation_fla(params, pattern, geo, comp)
        for comp in comps["A2"]:
            out[comp.s - 1] -= expectation_fla(params, pattern, geo, comp)
        for comp in comps["A3"]:
            out[c - 1 + comp.coord] = -expectation_fla(params, pattern, geo, comp)
        return out
    q = params.q
    rule = gauss_hermite(method.points, q)
    if method.tag == "gh":
        center, chol = np.zeros(q), np.eye(q)
    elif method.tag == "agh-mode":
        geo = find_mode(params, pattern, config=mode_config)
        center, chol = geo.mode, np.linalg.cholesky(np.linalg.inv(geo.sigma))
    else:
        if state is None:
            raise ValueError("agh-mean needs a per-pattern state")
        center, chol = state.mean[0], state.chol()[0]
    z, post, _ = quadrature_pass(params, pattern[None, :], rule, center[None, :], chol[None])
    scores = np.array([complete_data_score(it, y, zk) for zk in z[0]])
    if method.tag == "agh-mean":
        state.refresh(z, post)
    return post[0] @ scores


def expected_scores(params: ModelParams, dataset: OrdinalDataset, posterior) -> list[np.ndarray]:
    """Summed expected score of every item, thresholds then loadings."""
    out = []
    for i, it in enumerate(params.items):
        _, g_tau, g_alpha = item_objective(it.thresholds, it.loadings, dataset.responses[:, i], posterior)
        out.append(np.concatenate((g_tau, g_alpha)))
    return out


def _take(posterior, rows):
    if isinstance(posterior, QuadraturePosterior):
        return QuadraturePosterior(posterior.nodes[rows], posterior.weights[rows],
                                   posterior.log_marginal[rows], posterior.converged[rows])
    return PointPosterior(posterior.mode[rows], posterior.shift[rows], posterior.cov[rows],
                          posterior.sigma[rows], posterior.log_marginal[rows], posterior.converged[rows])


def observation_scores(params: ModelParams, dataset: OrdinalDataset, posterior) -> list[np.ndarray]:
    """Expected score of every item for every observation: one ``(n, c_i - 1 + q)`` array per item."""
    out = []
    for i, it in enumerate(params.items):
        y = dataset.responses[:, i]
        rows = []
        for k in range(dataset.n):
            _, g_tau, g_alpha = item_objective(it.thresholds, it.loadings, y[k : k + 1], _take(posterior, slice(k, k + 1)))
            rows.append(np.concatenate((g_tau, g_alpha)))
        out.append(np.array(rows))
    return out


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def initial_params(dataset: OrdinalDataset, q: int, mask=None, policy: str = "empirical", seed: int = 0) -> ModelParams:
    """Thresholds from logits of empirical cumulative frequencies; loadings 0.5."""
    p = dataset.p
    mask = default_constraint_mask(p, q) if mask is None else np.asarray(mask, dtype=bool)
    n = dataset.n
    thresholds = []
    for i in range(p):
        c = int(dataset.categories[i])
        counts = np.bincount(dataset.responses[:, i], minlength=c + 1)[1 : c + 1]
        cum = np.cumsum(counts)[:-1] / n
        cum = np.clip(cum, 0.5 / n, 1.0 - 0.5 / n)
        tau = logit(cum)
        for s in range(1, tau.size):
            tau[s] = max(tau[s], tau[s - 1] + 1e-3)
        thresholds.append(tau)
    if policy == "random":
        rng = np.random.default_rng(seed)
        loadings = rng.uniform(0.3, 1.0, size=(p, q))
    else:
        loadings = np.full((p, q), 0.5)
    return ModelParams.from_arrays(thresholds, loadings, mask)


def _max_change(a: ModelParams, b: ModelParams) -> float:
    return float(np.max(np.abs(a.free_vector() - b.free_vector())))


def _all_params_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([np.concatenate((it.thresholds, it.loadings)) for it in params.items])


def fit(dataset: OrdinalDataset, q: int, config: FitConfig = FitConfig(), mask=None,
        init: ModelParams | None = None) -> FitResult:
    """Run EM to convergence. Never raises on numerical trouble; see ``FitResult.valid``."""
    start = time.perf_counter()
    if q < 1:
        raise ValueError("latent dimension must be at least 1")
    params = init if init is not None else initial_params(dataset, q, mask, config.init, config.seed)
    if params.q != q or params.p != dataset.p:
        raise ValueError("initial parameters do not match the dataset and q")
    if np.any(params.categories != dataset.categories):
        raise ValueError("initial parameters have the wrong category counts")
    state = EStepState()
    ll_trace: list[float] = []
    ch_trace: list[float] = []
    converged = False
    failed = False
    diagnostic = ""
    iterations = 0
    for it in range(1, config.max_iter + 1):
        iterations = it
        try:
            post, state = e_step(params, dataset, config.method, state, config.mode_config)
            ll = float(post.log_marginal.sum())
            new_params, bad = m_step(params, dataset, post, config)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            failed, diagnostic = True, f"iteration {it}: {exc}"
            break
        if not np.isfinite(ll):
            failed, diagnostic = True, f"iteration {it}: non-finite log-likelihood"
            break
        if bad:
            failed, diagnostic = True, f"iteration {it}: inner Newton diverged"
        change = _max_change(params, new_params)
        prev = ll_trace[-1] if ll_trace else None
        ll_trace.append(ll)
        ch_trace.append(change)
        params = new_params
        if failed:
            break
        if np.max(np.abs(params.loading_matrix)) > 10 * config.max_abs_loading:
            diagnostic = f"iteration {it}: loadings diverging"
            break
        if change < config.tol and prev is not None and abs(ll - prev) < config.loglik_tol:
            converged = True
            break
    try:
        post, state = e_step(params, dataset, config.method, state, config.mode_config)
        final_ll = float(post.log_marginal.sum())
    except (np.linalg.LinAlgError, ValueError) as exc:
        final_ll, failed = float("nan"), True
        diagnostic = diagnostic or f"final evaluation: {exc}"
    if not np.all(np.isfinite(_all_params_vector(params))) or not np.isfinite(final_ll):
        failed = True
        diagnostic = diagnostic or "non-finite estimates"
    small = bool(np.max(np.abs(params.loading_matrix)) <= config.max_abs_loading)
    valid = converged and small and not failed
    if not converged and not diagnostic:
        diagnostic = f"no convergence in {config.max_iter} iterations"
    elif converged and not small:
        diagnostic = "loading above the validity bound"
    return FitResult(
        params=params,
        loglik=final_ll,
        iterations=iterations,
        converged=converged,
        valid=valid,
        loglik_trace=ll_trace,
        change_trace=ch_trace,
        seconds=time.perf_counter() - start,
        diagnostic=diagnostic,
    )


def align_solution(fitted: ModelParams, reference: ModelParams) -> ModelParams:
    """Flip loading columns to best match ``reference`` (exhaustive over signs)."""
    lf = fitted.loading_matrix
    lr = reference.loading_matrix
    best, best_d = None, np.inf
    for signs in itertools.product((1.0, -1.0), repeat=fitted.q):
        cand = lf * np.asarray(signs)[None, :]
        d = float(np.sum((cand - lr) ** 2))
        if d < best_d - 1e-15:
            best, best_d = np.asarray(signs), d
    items = tuple(
        ItemParams(it.thresholds, np.where(it.fixed, 0.0, it.loadings * best), it.fixed)
        for it in fitted.items
    )
    return ModelParams(items)
