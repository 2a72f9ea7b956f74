"""Geometry of the (optionally tilted) posterior kernel of one response pattern.

The log kernel is ``log g(y|z) + log h(z) + sum_k t_k A_k(z)`` with ``h`` the
standard normal density. Sign convention, fixed so that Newton ascends the
kernel: ``kernel_gradient`` returns the gradient of the *negative* log kernel,

    S(z) = sum_i alpha_i (1 - gamma_{i,y} - gamma_{i,y-1}) + z - sum_k t_k A_k'(z),

and ``kernel_hessian`` the negative Hessian ``Sigma``. The Newton update is
``z <- z - Sigma^{-1} S``.

Score components of one item ``i`` with observed category ``y``:

* ``A1_{i,y}  = d_y / pi_y``          (score for ``tau_{i,y}``)
* ``A2_{i,y-1} = d_{y-1} / pi_y``     (minus the score for ``tau_{i,y-1}``)
* ``A3_{i,y}  = (1 - gamma_y - gamma_{y-1}) z``  (minus the loading score)

where ``d_s = gamma_s (1 - gamma_s)``. Their z-derivatives collapse to
``A1' = alpha d_y`` and ``A2' = -alpha d_{y-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    LINK,
    PROB_FLOOR,
    ItemParams,
    ModelParams,
    cumulative_prob,
    point_terms,
)

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Score components
# ---------------------------------------------------------------------------


def _gammas(item: ItemParams, z, s: int):
    return cumulative_prob(item, z, s), cumulative_prob(item, z, s - 1)


def a1(item: ItemParams, s: int, z) -> float:
    if not 1 <= s <= item.n_categories - 1:
        raise IndexError(f"A1 defined for s=1..{item.n_categories - 1}, got {s}")
    gs, gprev = _gammas(item, z, s)
    if s == 1:
        return 1.0 - gs
    return (1.0 - gs) * gs / max(gs - gprev, PROB_FLOOR)


def a2(item: ItemParams, s: int, z) -> float:
    if not 1 <= s <= item.n_categories - 1:
        raise IndexError(f"A2 defined for s=1..{item.n_categories - 1}, got {s}")
    gs = cumulative_prob(item, z, s)
    gnext = cumulative_prob(item, z, s + 1)
    return (1.0 - gs) * gs / max(gnext - gs, PROB_FLOOR)


def a3(item: ItemParams, s: int, z) -> np.ndarray:
    if not 1 <= s <= item.n_categories:
        raise IndexError(f"A3 defined for s=1..{item.n_categories}, got {s}")
    gs, gprev = _gammas(item, z, s)
    return (1.0 - gs - gprev) * np.asarray(z, dtype=float)


@dataclass(frozen=True)
class AComponent:
    """One scalar score component as a function of ``z``.

    ``kind`` is ``"A1"``, ``"A2"`` or ``"A3"``. ``s`` follows the indexing of
    :func:`a1`, :func:`a2`, :func:`a3`; A3 is vector valued, so ``coord``
    picks one coordinate. ``index`` is the item's position in the model and
    is informational only.
    """

    kind: str
    item: ItemParams
    s: int
    coord: int | None = None
    index: int | None = None

    def __post_init__(self):
        if self.kind not in ("A1", "A2", "A3"):
            raise ValueError(f"unknown component kind {self.kind!r}")
        if self.kind == "A3" and self.coord is None:
            raise ValueError("A3 components need a coordinate")
        top = self.item.n_categories if self.kind == "A3" else self.item.n_categories - 1
        if not 1 <= self.s <= top:
            raise IndexError(f"{self.kind} defined for s=1..{top}, got {self.s}")

    def value(self, z) -> float:
        if self.kind == "A1":
            return a1(self.item, self.s, z)
        if self.kind == "A2":
            return a2(self.item, self.s, z)
        return float(a3(self.item, self.s, z)[self.coord])

    def gradient(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        alpha = self.item.loadings
        if self.kind == "A1":
            return alpha * LINK.density(cumulative_prob(self.item, z, self.s))
        if self.kind == "A2":
            return -alpha * LINK.density(cumulative_prob(self.item, z, self.s))
        gs, gprev = _gammas(self.item, z, self.s)
        j = self.coord
        grad = z[j] * alpha * (LINK.density(gs) + LINK.density(gprev))
        grad[j] += 1.0 - gs - gprev
        return grad

    def hessian(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        alpha = self.item.loadings
        outer = np.outer(alpha, alpha)
        if self.kind in ("A1", "A2"):
            e = LINK.density_slope(cumulative_prob(self.item, z, self.s))
            return -outer * e if self.kind == "A1" else outer * e
        gs, gprev = _gammas(self.item, z, self.s)
        dsum = LINK.density(gs) + LINK.density(gprev)
        esum = LINK.density_slope(gs) + LINK.density_slope(gprev)
        j = self.coord
        hess = -z[j] * esum * outer
        hess[j, :] += dsum * alpha
        hess[:, j] += dsum * alpha
        return hess


@dataclass(frozen=True)
class ConstantComponent:
    c: float = 1.0

    def value(self, z):
        return float(self.c)

    def gradient(self, z):
        return np.zeros(np.size(z))

    def hessian(self, z):
        k = np.size(z)
        return np.zeros((k, k))


@dataclass(frozen=True)
class LinearComponent:
    """``A(z) = v'z``; with ``v = e_j`` its expectation is the posterior mean."""

    v: np.ndarray

    def value(self, z):
        return float(np.asarray(self.v) @ np.asarray(z, dtype=float))

    def gradient(self, z):
        return np.asarray(self.v, dtype=float).copy()

    def hessian(self, z):
        k = np.size(z)
        return np.zeros((k, k))


def a_gradient(component, z) -> np.ndarray:
    return component.gradient(z)


def a_hessian(component, z) -> np.ndarray:
    return component.hessian(z)


def score_components(params: ModelParams, pattern, i: int) -> dict[str, list]:
    """Components needed for the score of item ``i`` at an observed category."""
    item = params.items[i]
    y = int(pattern[i])
    out = {"A1": [], "A2": [], "A3": []}
    if y <= item.n_categories - 1:
        out["A1"].append(AComponent("A1", item, y, index=i))
    if y >= 2:
        out["A2"].append(AComponent("A2", item, y - 1, index=i))
    out["A3"] = [AComponent("A3", item, y, coord=j, index=i) for j in range(item.q)]
    return out


# ---------------------------------------------------------------------------
# Kernel value, gradient and Hessian for a single pattern
# ---------------------------------------------------------------------------


def _as_tilt(t, components):
    components = tuple(components or ())
    if t is None:
        t = np.zeros(len(components))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.size != len(components):
        raise ValueError("need one tilt per component")
    return t, components


def _terms_single(params: ModelParams, pattern, z):
    upper, lower = params.bounds(np.asarray(pattern)[None, :])
    return point_terms(params.loading_matrix, upper, lower, np.asarray(z, dtype=float)[None, None, :])


def log_kernel(params: ModelParams, pattern, z, t=None, components=()) -> float:
    """log g(y|z) + log h(z) + t'A(z), with normalised ``h``."""
    t, components = _as_tilt(t, components)
    z = np.asarray(z, dtype=float)
    terms = _terms_single(params, pattern, z)
    val = terms.log_pi.sum() - 0.5 * z @ z - 0.5 * z.size * LOG_2PI
    for tk, comp in zip(t, components):
        val += tk * comp.value(z)
    return float(val)


def kernel_gradient(params: ModelParams, pattern, z, t=None, components=()) -> np.ndarray:
    t, components = _as_tilt(t, components)
    z = np.asarray(z, dtype=float)
    terms = _terms_single(params, pattern, z)
    grad = terms.r[0, 0] @ params.loading_matrix + z
    for tk, comp in zip(t, components):
        grad = grad - tk * comp.gradient(z)
    return grad


def kernel_hessian(params: ModelParams, pattern, z, t=None, components=()) -> np.ndarray:
    t, components = _as_tilt(t, components)
    z = np.asarray(z, dtype=float)
    terms = _terms_single(params, pattern, z)
    alpha = params.loading_matrix
    sigma = (alpha.T * terms.curvature[0, 0]) @ alpha + np.eye(z.size)
    for tk, comp in zip(t, components):
        sigma = sigma - tk * comp.hessian(z)
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# Mode finding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModeConfig:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 20
    start: np.ndarray | None = None


@dataclass
class PosteriorGeometry:
    """Mode, negative Hessian and kernel value of one posterior."""

    mode: np.ndarray
    sigma: np.ndarray
    log_kernel: float
    iterations: int
    converged: bool
    grad_norm: float = field(default=0.0)


def _ridged_cholesky(sigma: np.ndarray) -> np.ndarray:
    """Cholesky of each matrix in a batch, ridging the non-PD ones."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(sigma)
    eye = np.eye(sigma.shape[-1])
    for k in range(sigma.shape[0]):
        lam = 1e-4
        mat = sigma[k]
        while True:
            try:
                out[k] = np.linalg.cholesky(mat)
                break
            except np.linalg.LinAlgError:
                if not np.all(np.isfinite(mat)) or lam > 1e12:
                    out[k] = eye
                    break
                mat = sigma[k] + lam * eye
                lam *= 2.0
    return out


def _solve_spd(sigma: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    chol = _ridged_cholesky(sigma)
    mat = chol @ np.swapaxes(chol, 1, 2)
    return np.linalg.solve(mat, rhs[..., None])[..., 0]


def newton_ascent(evaluate, z0: np.ndarray, config: ModeConfig):
    """Safeguarded Newton ascent on a batch of independent concave-ish kernels.

    ``evaluate(z, active)`` returns ``(logk, S, Sigma)`` for the rows
    ``active`` of ``z`` (``S`` the gradient of ``-logk``, ``Sigma`` the
    negative Hessian). Steps are halved until the kernel does not decrease.
    """
    z = np.array(z0, dtype=float, copy=True)
    n = z.shape[0]
    all_rows = np.arange(n)
    logk, grad, sigma = evaluate(z, all_rows)
    iters = np.zeros(n, dtype=int)
    done = np.max(np.abs(grad), axis=1) < config.tol
    for _ in range(config.max_iter):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        step = _solve_spd(sigma[active], grad[active])
        # indefinite tilted Hessians: fall back to a gradient step
        bad = np.einsum("ij,ij->i", step, grad[active]) <= 0
        step[bad] = grad[active][bad]
        lam = np.ones(active.size)
        pending = np.ones(active.size, dtype=bool)
        for _h in range(config.max_halvings + 1):
            rows = active[pending]
            trial = z[rows] - lam[pending, None] * step[pending]
            lk, g, s = evaluate(trial, rows)
            ok = lk >= logk[rows] - 1e-12 * (1.0 + np.abs(logk[rows]))
            acc = rows[ok]
            z[acc], logk[acc], grad[acc], sigma[acc] = trial[ok], lk[ok], g[ok], s[ok]
            idx = np.flatnonzero(pending)
            pending[idx[ok]] = False
            if not pending.any():
                break
            lam[pending] *= 0.5
        iters[active] += 1
        gnorm = np.max(np.abs(grad[active]), axis=1)
        done[active] = gnorm < config.tol
        # line search exhausted: nothing more to gain at machine precision
        done[active[pending]] = True
    gnorm = np.max(np.abs(grad), axis=1)
    converged = gnorm < max(config.tol, 1e-6)
    return z, logk, grad, sigma, iters, converged


def batch_modes(params: ModelParams, responses, start=None, config: ModeConfig = ModeConfig()):
    """Posterior modes of every pattern at ``t = 0``.

    Returns ``(modes, sigma, log_kernel, iterations, converged)`` with arrays
    indexed by observation.
    """
    responses = np.asarray(responses)
    n = responses.shape[0]
    alpha = params.loading_matrix
    q = alpha.shape[1]
    upper, lower = params.bounds(responses)
    eye = np.eye(q)

    def evaluate(z, rows):
        terms = point_terms(alpha, upper[rows], lower[rows], z[:, None, :])
        logk = terms.log_pi[:, 0].sum(axis=1) - 0.5 * np.einsum("ij,ij->i", z, z) - 0.5 * q * LOG_2PI
        grad = terms.r[:, 0] @ alpha + z
        sigma = np.einsum("nk,ka,kb->nab", terms.curvature[:, 0], alpha, alpha) + eye
        return logk, grad, sigma

    z0 = np.zeros((n, q)) if start is None else np.asarray(start, dtype=float)
    z, logk, grad, sigma, iters, conv = newton_ascent(evaluate, z0, config)
    return z, sigma, logk, iters, conv


def find_mode(params: ModelParams, pattern, t=None, components=(), config: ModeConfig = ModeConfig()) -> PosteriorGeometry:
    """Mode of the tilted kernel of one pattern by safeguarded Newton."""
    t, components = _as_tilt(t, components)
    q = params.q
    start = np.zeros(q) if config.start is None else np.asarray(config.start, dtype=float)

    def evaluate(z, rows):
        zz = z[0]
        return (
            np.array([log_kernel(params, pattern, zz, t, components)]),
            kernel_gradient(params, pattern, zz, t, components)[None, :],
            kernel_hessian(params, pattern, zz, t, components)[None, :, :],
        )

    z, logk, grad, sigma, iters, conv = newton_ascent(evaluate, start[None, :], config)
    return PosteriorGeometry(
        mode=z[0],
        sigma=sigma[0],
        log_kernel=float(logk[0]),
        iterations=int(iters[0]),
        converged=bool(conv[0]),
        grad_norm=float(np.max(np.abs(grad[0]))),
    )


# ---------------------------------------------------------------------------
# Tilt derivative of Sigma
# ---------------------------------------------------------------------------


def dsigma_dz_contract(params: ModelParams, pattern, z, v) -> np.ndarray:
    """(dSigma/dz) v at t = 0: ``-sum_i alpha_i alpha_i' (e_y + e_{y-1}) alpha_i'v``."""
    terms = _terms_single(params, pattern, z)
    alpha = params.loading_matrix
    w = -terms.curvature_slope[0, 0] * (alpha @ np.asarray(v, dtype=float))
    return (alpha.T * w) @ alpha


def dsigma_dt(params: ModelParams, pattern, geometry: PosteriorGeometry, component) -> np.ndarray:
    """d Sigma^(t) / dt at the t = 0 mode.

    Chain rule through the tilted mode, with ``dz/dt = Sigma^{-1} A'(z)``
    from the implicit-function theorem, minus the direct ``A''`` term.
    """
    zhat = geometry.mode
    try:
        dz = np.linalg.solve(geometry.sigma, component.gradient(zhat))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular Sigma at the posterior mode") from exc
    out = dsigma_dz_contract(params, pattern, zhat, dz) - component.hessian(zhat)
    return 0.5 * (out + out.T)
