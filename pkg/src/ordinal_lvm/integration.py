"""Posterior expectations and marginal likelihoods under five approximations.

``laplace``   plug-in value at the posterior mode.
``fla``       fully exponential Laplace: ``A(zhat) - tr(Sigma^{-1} dSigma/dt) / 2``.
``gh``        Gauss-Hermite against the prior, ratio of weighted sums.
``agh-mode``  GH nodes centred at the mode, scaled by ``chol(Sigma^{-1})``.
``agh-mean``  GH nodes centred at the previous posterior mean and covariance,
              refreshed from each quadrature pass.

The per-pattern functions below are the reference surface. The EM uses the
batched :func:`e_step`, which returns the same expectations in a form that can
be re-evaluated at new item parameters during the M-step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .geometry import (
    LOG_2PI,
    ModeConfig,
    PosteriorGeometry,
    _ridged_cholesky,
    batch_modes,
    dsigma_dt,
    find_mode,
)
from .model import ModelParams, OrdinalDataset, point_terms

METHOD_TAGS = ("laplace", "fla", "gh", "agh-mode", "agh-mean")


@dataclass(frozen=True)
class ApproximationMethod:
    tag: str
    points: int = 5

    def __post_init__(self):
        tag = self.tag.lower().replace("_", "-")
        if tag not in METHOD_TAGS:
            raise ValueError(f"unknown method {self.tag!r}; choose from {METHOD_TAGS}")
        if self.points < 1:
            raise ValueError("need at least one quadrature point")
        object.__setattr__(self, "tag", tag)

    @property
    def is_quadrature(self) -> bool:
        return self.tag in ("gh", "agh-mode", "agh-mean")

    def label(self) -> str:
        return f"{self.tag}({self.points})" if self.is_quadrature else self.tag


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product GH rule for expectations against N(0, I_q).

    ``nodes`` is ``(K**q, q)`` and ``weights`` sums to one.
    """

    nodes: np.ndarray
    weights: np.ndarray
    points: int

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]


@lru_cache(maxsize=None)
def gauss_hermite(points: int, dim: int) -> QuadratureRule:
    x, w = hermegauss(points)
    w = w / np.sqrt(2.0 * np.pi)
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes, weights, points)


# ---------------------------------------------------------------------------
# Quadrature core
# ---------------------------------------------------------------------------


def _log_abs_det_chol(chol: np.ndarray) -> np.ndarray:
    return np.log(np.abs(np.diagonal(chol, axis1=-2, axis2=-1))).sum(axis=-1)


def place_nodes(rule: QuadratureRule, center: np.ndarray, chol: np.ndarray):
    """Nodes ``center + chol x`` and log importance ratios ``log phi(z)/phi_N(z)``."""
    x = rule.nodes
    z = center[:, None, :] + np.einsum("nab,mb->nma", chol, x)
    log_ratio = (
        -0.5 * np.einsum("nma,nma->nm", z, z)
        + 0.5 * np.einsum("ma,ma->m", x, x)[None, :]
        + _log_abs_det_chol(chol)[:, None]
    )
    return z, np.log(rule.weights)[None, :] + log_ratio


def quadrature_pass(params: ModelParams, responses, rule: QuadratureRule, center, chol):
    """Posterior weights and log marginal likelihood at placed nodes."""
    alpha = params.loading_matrix
    upper, lower = params.bounds(responses)
    z, log_w = place_nodes(rule, center, chol)
    terms = point_terms(alpha, upper, lower, z)
    log_joint = log_w + terms.log_pi.sum(axis=2)
    log_marg = logsumexp(log_joint, axis=1)
    post = np.exp(log_joint - log_marg[:, None])
    return z, post, log_marg


def posterior_moments(nodes: np.ndarray, weights: np.ndarray):
    mean = np.einsum("nm,nma->na", weights, nodes)
    dev = nodes - mean[:, None, :]
    cov = np.einsum("nm,nma,nmb->nab", weights, dev, dev)
    return mean, cov


def adaptive_expectation(log_kernel, funcs, center, chol, rule: QuadratureRule):
    """Generic adaptive GH: ``E[f]`` under the density proportional to ``exp(log_kernel)``.

    ``log_kernel`` and each of ``funcs`` act on an ``(m, q)`` array of points;
    the kernel should *not* include the prior (it is integrated against
    Lebesgue measure). Returns the expectations and the log normaliser.
    """
    center = np.asarray(center, dtype=float)
    chol = np.asarray(chol, dtype=float)
    z = center + rule.nodes @ chol.T
    x = rule.nodes
    log_w = (
        np.log(rule.weights)
        + 0.5 * np.einsum("ma,ma->m", x, x)
        + 0.5 * x.shape[1] * LOG_2PI
        + np.log(np.abs(np.diag(chol))).sum()
        + log_kernel(z)
    )
    lse = logsumexp(log_w)
    w = np.exp(log_w - lse)
    return np.array([w @ np.asarray(f(z), dtype=float) for f in funcs]), float(lse)


# ---------------------------------------------------------------------------
# Per-pattern expectations
# ---------------------------------------------------------------------------


def _eval_component(component, z_points):
    return np.array([component.value(z) for z in z_points])


def expectation_laplace(geometry: PosteriorGeometry, component) -> float:
    return float(component.value(geometry.mode))


def expectation_fla(params: ModelParams, pattern, geometry: PosteriorGeometry, component) -> float:
    if not geometry.converged:
        raise RuntimeError("posterior mode did not converge")
    omega = np.linalg.solve(geometry.sigma, dsigma_dt(params, pattern, geometry, component))
    return float(component.value(geometry.mode) - 0.5 * np.trace(omega))


def _single_pass(params, pattern, component, rule, center, chol):
    z, post, _ = quadrature_pass(params, np.asarray(pattern)[None, :], rule, center[None, :], chol[None, :, :])
    return float(post[0] @ _eval_component(component, z[0])), z[0], post[0]


def expectation_gh(params: ModelParams, pattern, component, rule: QuadratureRule) -> float:
    q = params.q
    return _single_pass(params, pattern, component, rule, np.zeros(q), np.eye(q))[0]


def expectation_agh_mode(params: ModelParams, pattern, geometry: PosteriorGeometry, component, rule: QuadratureRule) -> float:
    chol = np.linalg.cholesky(np.linalg.inv(geometry.sigma))
    return _single_pass(params, pattern, component, rule, geometry.mode, chol)[0]


@dataclass
class AghMeanState:
    """Per-observation posterior mean and covariance carried between passes."""

    mean: np.ndarray
    cov: np.ndarray
    resets: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, n: int, q: int) -> "AghMeanState":
        return cls(np.zeros((n, q)), np.tile(np.eye(q), (n, 1, 1)), np.zeros(n, dtype=int))

    def __post_init__(self):
        if self.resets is None:
            self.resets = np.zeros(self.mean.shape[0], dtype=int)

    def chol(self) -> np.ndarray:
        return _ridged_cholesky(self.cov)

    def refresh(self, nodes, weights, rows=None):
        mean, cov = posterior_moments(nodes, weights)
        rows = np.arange(self.mean.shape[0]) if rows is None else rows
        q = mean.shape[1]
        for k in range(mean.shape[0]):
            ok = np.all(np.isfinite(cov[k])) and np.all(np.linalg.eigvalsh(cov[k]) > 1e-10)
            if ok and np.all(np.isfinite(mean[k])):
                self.mean[rows[k]] = mean[k]
                self.cov[rows[k]] = cov[k]
            else:
                self.mean[rows[k]] = 0.0
                self.cov[rows[k]] = np.eye(q)
                self.resets[rows[k]] += 1


def expectation_agh_mean(params: ModelParams, pattern, component, rule: QuadratureRule, state: AghMeanState) -> float:
    """AGH centred on the state's posterior moments; refreshes ``state`` in place.

    ``state`` describes this one pattern (arrays of leading length 1).
    """
    val, z, post = _single_pass(params, pattern, component, rule, state.mean[0], state.chol()[0])
    state.refresh(z[None], post[None])
    return val


# ---------------------------------------------------------------------------
# Batched E-step
# ---------------------------------------------------------------------------


@dataclass
class PointPosterior:
    """Laplace / FLA posterior summary used as a linear functional.

    For a smooth ``f``, ``E[f] ~= f(mode) + f'(mode).shift + tr(cov f''(mode)) / 2``.
    With ``shift = -cov c / 2`` and ``c_k = tr(cov dSigma/dz_k)`` this is the
    FLA expectation; ``shift = 0, cov = 0`` gives the Laplace plug-in.
    """

    mode: np.ndarray
    shift: np.ndarray
    cov: np.ndarray
    sigma: np.ndarray
    log_marginal: np.ndarray
    converged: np.ndarray


@dataclass
class QuadraturePosterior:
    nodes: np.ndarray
    weights: np.ndarray
    log_marginal: np.ndarray
    converged: np.ndarray


@dataclass
class EStepState:
    """What the E-step carries across EM iterations."""

    modes: np.ndarray | None = None
    agh_mean: AghMeanState | None = None


def laplace_log_marginal(logk: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """log of the Laplace-approximated integral of exp(logk) (normalised prior inside)."""
    q = sigma.shape[-1]
    _, logdet = np.linalg.slogdet(sigma)
    return logk + 0.5 * q * LOG_2PI - 0.5 * logdet


def fla_functional(params: ModelParams, responses, modes: np.ndarray, sigma: np.ndarray):
    """Shift and covariance that turn the FLA formula into a linear functional."""
    alpha = params.loading_matrix
    upper, lower = params.bounds(responses)
    terms = point_terms(alpha, upper, lower, modes[:, None, :])
    cov = np.linalg.inv(sigma)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    ava = np.einsum("ka,nab,kb->nk", alpha, cov, alpha)
    c = -np.einsum("nk,nk,ka->na", ava, terms.curvature_slope[:, 0], alpha)
    shift = -0.5 * np.einsum("nab,nb->na", cov, c)
    return shift, cov


def e_step(params: ModelParams, dataset: OrdinalDataset, method: ApproximationMethod,
           state: EStepState | None = None, mode_config: ModeConfig = ModeConfig()):
    """Posterior summaries of every observation under ``method``.

    Returns ``(posterior, state)``; ``state`` is updated in place when given.
    """
    state = EStepState() if state is None else state
    y = dataset.responses
    n, q = dataset.n, params.q
    if method.tag in ("laplace", "fla", "agh-mode"):
        modes, sigma, logk, _, conv = batch_modes(params, y, state.modes, mode_config)
        state.modes = modes
        if method.tag == "agh-mode":
            rule = gauss_hermite(method.points, q)
            chol = _ridged_cholesky(np.linalg.inv(sigma))
            z, post, log_marg = quadrature_pass(params, y, rule, modes, chol)
            return QuadraturePosterior(z, post, log_marg, conv), state
        log_marg = laplace_log_marginal(logk, sigma)
        if method.tag == "fla":
            shift, cov = fla_functional(params, y, modes, sigma)
        else:
            shift, cov = np.zeros((n, q)), np.zeros((n, q, q))
        return PointPosterior(modes, shift, cov, sigma, log_marg, conv), state
    rule = gauss_hermite(method.points, q)
    if method.tag == "gh":
        z, post, log_marg = quadrature_pass(params, y, rule, np.zeros((n, q)), np.tile(np.eye(q), (n, 1, 1)))
        return QuadraturePosterior(z, post, log_marg, np.ones(n, dtype=bool)), state
    if state.agh_mean is None:
        state.agh_mean = AghMeanState.initial(n, q)
    z, post, log_marg = quadrature_pass(params, y, rule, state.agh_mean.mean, state.agh_mean.chol())
    state.agh_mean.refresh(z, post)
    return QuadraturePosterior(z, post, log_marg, state.agh_mean.resets == 0), state


def log_marginal_lik(params: ModelParams, dataset: OrdinalDataset, method: ApproximationMethod,
                     state: EStepState | None = None) -> float:
    """Observed-data log-likelihood under ``method``.

    Laplace and FLA share the Laplace determinant formula.
    """
    post, _ = e_step(params, dataset, method, state)
    return float(post.log_marginal.sum())


def pattern_geometry(params: ModelParams, pattern, config: ModeConfig = ModeConfig()) -> PosteriorGeometry:
    return find_mode(params, pattern, config=config)
