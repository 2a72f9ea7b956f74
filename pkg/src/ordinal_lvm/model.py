"""Proportional-odds measurement model.

Each item ``i`` has ``c_i`` ordered categories. Given the latent vector ``z``
the cumulative probability of responding in category ``s`` or lower is

    gamma_{i,s}(z) = F(tau_{i,s} - alpha_i' z),   s = 1, ..., c_i - 1

with ``F`` the logistic cdf, ``gamma_{i,0} = 0`` and ``gamma_{i,c_i} = 1``.
Category probabilities are successive differences of ``gamma``.

Categories are 1-based everywhere in the public API, matching the data files.
Internally thresholds are padded to ``[-inf, tau_1, ..., tau_{c-1}, +inf]`` so
that the two cumulative probabilities bracketing an observed category can be
gathered with plain indexing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit, log_expit

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))
MIN_THRESHOLD_GAP = 1e-6


# ---------------------------------------------------------------------------
# Link seam
# ---------------------------------------------------------------------------


class LogitLink:
    """Logistic cdf plus the derivative identities the geometry relies on.

    ``density(g)`` is dF/deta written in terms of ``g = F(eta)`` and
    ``density_slope(g)`` is d^2F/deta^2 likewise. Another link would have to
    supply these two as functions of ``eta`` instead.
    """

    name = "logit"

    @staticmethod
    def cdf(eta):
        return expit(eta)

    @staticmethod
    def density(g):
        return g * (1.0 - g)

    @staticmethod
    def density_slope(g):
        # g(1-g)(1-2g) == g(1 - 3g + 2g^2)
        return g * (1.0 - g) * (1.0 - 2.0 * g)

    @staticmethod
    def log_interval(eta_upper, eta_lower):
        """log(F(eta_upper) - F(eta_lower)) without cancellation."""
        eta_upper = np.asarray(eta_upper, dtype=float)
        eta_lower = np.asarray(eta_lower, dtype=float)
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            # mirror into the lower tail when both sit near 1
            flip = (eta_upper + eta_lower) > 0
            a = np.where(flip, -eta_lower, eta_upper)
            b = np.where(flip, -eta_upper, eta_lower)
            la = log_expit(a)
            diff = log_expit(b) - la
            diff = np.where(np.isnan(diff), -np.inf, diff)
            out = la + _log1mexp(diff)
        return out


def _log1mexp(x):
    """log(1 - exp(x)) for x <= 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


LINK = LogitLink()


# ---------------------------------------------------------------------------
# Data and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrdinalDataset:
    """``n`` response patterns over ``p`` ordinal items.

    ``responses`` holds 1-based category labels; ``categories[i]`` is the
    number of categories ``c_i`` of item ``i``.
    """

    responses: np.ndarray
    categories: np.ndarray
    item_names: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.asarray(self.responses)
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
            raise ValueError("responses must be a non-empty n x p matrix")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("responses must be integer category labels")
        y = y.astype(np.int64)
        c = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        if c.shape[0] != y.shape[1]:
            raise ValueError("need one category count per item")
        if np.any(c < 2):
            raise ValueError("every item needs at least two categories")
        if np.any(y < 1) or np.any(y > c[None, :]):
            bad = np.argwhere((y < 1) | (y > c[None, :]))[0]
            raise ValueError(
                f"response {y[bad[0], bad[1]]} at row {bad[0]}, item {bad[1]} "
                f"outside 1..{c[bad[1]]}"
            )
        if self.item_names is not None and len(self.item_names) != y.shape[1]:
            raise ValueError("need one name per item")
        y.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "categories", c)

    @classmethod
    def from_responses(cls, responses, categories=None, item_names=None):
        """Build a dataset, inferring ``c_i`` as the largest observed label."""
        y = np.asarray(responses)
        if categories is None:
            categories = np.maximum(y.max(axis=0), 2)
        return cls(y, np.asarray(categories), None if item_names is None else tuple(item_names))

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def p(self) -> int:
        return self.responses.shape[1]

    def cumulative_indicators(self, i: int) -> np.ndarray:
        """``y*_{i,s}`` for ``s = 1..c_i`` as an ``(n, c_i)`` 0/1 array."""
        s = np.arange(1, self.categories[i] + 1)
        return (self.responses[:, i][:, None] <= s[None, :]).astype(np.int64)

    def subset(self, rows) -> "OrdinalDataset":
        return OrdinalDataset(self.responses[rows], self.categories, self.item_names)


@dataclass(frozen=True)
class ItemParams:
    """Thresholds and loadings of one item.

    ``fixed`` flags loadings constrained to zero (identifiability).
    """

    thresholds: np.ndarray
    loadings: np.ndarray
    fixed: np.ndarray | None = None

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.thresholds, dtype=float)).copy()
        alpha = np.atleast_1d(np.asarray(self.loadings, dtype=float)).copy()
        if tau.ndim != 1 or tau.size < 1:
            raise ValueError("an item needs at least one threshold")
        if not np.all(np.isfinite(tau)) or not np.all(np.isfinite(alpha)):
            raise ValueError("thresholds and loadings must be finite")
        if np.any(np.diff(tau) <= 0):
            raise ValueError(f"thresholds must be strictly increasing, got {tau}")
        fixed = (
            np.zeros(alpha.shape, dtype=bool)
            if self.fixed is None
            else np.asarray(self.fixed, dtype=bool).reshape(alpha.shape).copy()
        )
        if np.any(alpha[fixed] != 0.0):
            raise ValueError("loadings flagged as fixed must be exactly zero")
        for arr in (tau, alpha, fixed):
            arr.setflags(write=False)
        object.__setattr__(self, "thresholds", tau)
        object.__setattr__(self, "loadings", alpha)
        object.__setattr__(self, "fixed", fixed)

    @property
    def n_categories(self) -> int:
        return self.thresholds.size + 1

    @property
    def q(self) -> int:
        return self.loadings.size

    @property
    def n_params(self) -> int:
        return self.thresholds.size + self.loadings.size

    def extended_thresholds(self) -> np.ndarray:
        return np.concatenate(([-np.inf], self.thresholds, [np.inf]))

    def replace(self, thresholds=None, loadings=None) -> "ItemParams":
        return ItemParams(
            self.thresholds if thresholds is None else thresholds,
            self.loadings if loadings is None else loadings,
            self.fixed,
        )


def default_constraint_mask(p: int, q: int) -> np.ndarray:
    """Zero the upper triangle of the first ``q - 1`` loading rows."""
    mask = np.zeros((p, q), dtype=bool)
    for i in range(min(q - 1, p)):
        mask[i, i + 1 :] = True
    return mask


@dataclass(frozen=True)
class ModelParams:
    """Parameters of all ``p`` items; the latent prior is N(0, I_q)."""

    items: tuple[ItemParams, ...]

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise ValueError("need at least one item")
        q = items[0].q
        if any(it.q != q for it in items):
            raise ValueError("all items must share the latent dimension")
        object.__setattr__(self, "items", items)

    @classmethod
    def from_arrays(cls, thresholds: Sequence, loadings, mask=None) -> "ModelParams":
        loadings = np.atleast_2d(np.asarray(loadings, dtype=float))
        p, q = loadings.shape
        if mask is None:
            mask = default_constraint_mask(p, q)
        mask = np.asarray(mask, dtype=bool)
        loadings = np.where(mask, 0.0, loadings)
        return cls(tuple(ItemParams(thresholds[i], loadings[i], mask[i]) for i in range(p)))

    @property
    def p(self) -> int:
        return len(self.items)

    @property
    def q(self) -> int:
        return self.items[0].q

    @property
    def categories(self) -> np.ndarray:
        return np.array([it.n_categories for it in self.items])

    @property
    def constraint_mask(self) -> np.ndarray:
        return np.array([it.fixed for it in self.items])

    @property
    def loading_matrix(self) -> np.ndarray:
        return np.array([it.loadings for it in self.items])

    def thresholds(self) -> list[np.ndarray]:
        return [it.thresholds for it in self.items]

    def padded_thresholds(self) -> np.ndarray:
        """``(p, c_max + 1)`` array ``[-inf, tau_1, ..., +inf, +inf, ...]``."""
        cmax = int(self.categories.max())
        out = np.full((self.p, cmax + 1), np.inf)
        for i, it in enumerate(self.items):
            out[i, : it.n_categories + 1] = it.extended_thresholds()
        return out

    def bounds(self, responses) -> tuple[np.ndarray, np.ndarray]:
        """Thresholds ``tau_{i,y}`` and ``tau_{i,y-1}`` bracketing each response."""
        y = np.asarray(responses, dtype=np.int64)
        tab = self.padded_thresholds()
        cols = np.arange(self.p)
        return tab[cols, y], tab[cols, y - 1]

    def with_item(self, i: int, item: ItemParams) -> "ModelParams":
        items = list(self.items)
        items[i] = item
        return ModelParams(tuple(items))

    def free_vector(self) -> np.ndarray:
        """Thresholds then free loadings, item by item."""
        parts = []
        for it in self.items:
            parts.append(it.thresholds)
            parts.append(it.loadings[~it.fixed])
        return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Single-item operations
# ---------------------------------------------------------------------------


def _check_s(item: ItemParams, s: int, lo: int, hi: int):
    if not lo <= s <= hi:
        raise IndexError(f"category index {s} outside {lo}..{hi}")


def linear_predictor(item: ItemParams, z, s: int) -> float:
    _check_s(item, s, 1, item.n_categories - 1)
    return float(item.thresholds[s - 1] - item.loadings @ np.asarray(z, dtype=float))


def cumulative_prob(item: ItemParams, z, s: int) -> float:
    _check_s(item, s, 0, item.n_categories)
    if s == 0:
        return 0.0
    if s == item.n_categories:
        return 1.0
    return float(LINK.cdf(linear_predictor(item, z, s)))


def category_prob(item: ItemParams, z, s: int) -> float:
    _check_s(item, s, 1, item.n_categories)
    return cumulative_prob(item, z, s) - cumulative_prob(item, z, s - 1)


def _eta_pair(item: ItemParams, z, y: int):
    lin = item.loadings @ np.asarray(z, dtype=float)
    tau = item.extended_thresholds()
    return tau[y] - lin, tau[y - 1] - lin


def cond_log_lik(item: ItemParams, response: int, z) -> float:
    """log g(y_i | z), floored at log(PROB_FLOOR)."""
    _check_s(item, response, 1, item.n_categories)
    eu, el = _eta_pair(item, z, response)
    return float(max(LINK.log_interval(eu, el), LOG_PROB_FLOOR))


def joint_cond_log_lik(params: ModelParams, pattern, z) -> float:
    return sum(cond_log_lik(it, int(y), z) for it, y in zip(params.items, pattern))


def _gap(item: ItemParams, z, s: int) -> float:
    return max(cumulative_prob(item, z, s + 1) - cumulative_prob(item, z, s), PROB_FLOOR)


def theta(item: ItemParams, z, s: int) -> float:
    """log[gamma_s / (gamma_{s+1} - gamma_s)]."""
    _check_s(item, s, 1, item.n_categories - 1)
    return float(np.log(cumulative_prob(item, z, s)) - np.log(_gap(item, z, s)))


def b_theta(item: ItemParams, z, s: int) -> float:
    """log[gamma_{s+1} / (gamma_{s+1} - gamma_s)]."""
    _check_s(item, s, 1, item.n_categories - 1)
    return float(np.log(cumulative_prob(item, z, s + 1)) - np.log(_gap(item, z, s)))


def complete_data_score(item: ItemParams, response: int, z) -> np.ndarray:
    """d log g(y_i | z) / d(tau_i, alpha_i), thresholds first.

    The threshold block is ``A1`` at ``tau_y`` and ``-A2`` at ``tau_{y-1}``;
    the loading block is ``-A3`` of the observed category. Fixed loadings
    still get their (unused) score entry.
    """
    _check_s(item, response, 1, item.n_categories)
    z = np.asarray(z, dtype=float)
    c = item.n_categories
    eu, el = _eta_pair(item, z, response)
    gu, gl = LINK.cdf(eu), LINK.cdf(el)
    pi = max(gu - gl, PROB_FLOOR)
    score = np.zeros(item.n_params)
    if response <= c - 1:
        score[response - 1] += LINK.density(gu) / pi
    if response >= 2:
        score[response - 2] -= LINK.density(gl) / pi
    score[c - 1 :] = -(1.0 - gu - gl) * z
    return score


# ---------------------------------------------------------------------------
# Vectorised evaluation at many latent points
# ---------------------------------------------------------------------------


class PointTerms(NamedTuple):
    """Per-item quantities at a batch of latent points.

    All arrays have the broadcast shape of ``upper[..., None, :]`` against the
    point batch, i.e. ``(n, m, p)`` for ``n`` patterns and ``m`` points each.
    """

    g_upper: np.ndarray
    g_lower: np.ndarray
    log_pi: np.ndarray

    @property
    def pi(self):
        return np.exp(self.log_pi)

    @property
    def r(self):
        """1 - gamma_y - gamma_{y-1}; ``A3 = r z``."""
        return 1.0 - self.g_upper - self.g_lower

    @property
    def d_upper(self):
        return LINK.density(self.g_upper)

    @property
    def d_lower(self):
        return LINK.density(self.g_lower)

    @property
    def curvature(self):
        """Weight of alpha alpha' in the negative Hessian (d_y + d_{y-1})."""
        return self.d_upper + self.d_lower

    @property
    def curvature_slope(self):
        return LINK.density_slope(self.g_upper) + LINK.density_slope(self.g_lower)


def point_terms(alpha: np.ndarray, upper: np.ndarray, lower: np.ndarray, z: np.ndarray) -> PointTerms:
    """Evaluate item terms for patterns ``(n, p)`` at points ``z`` of shape ``(n, m, q)``."""
    lin = z @ alpha.T
    eu = upper[:, None, :] - lin
    el = lower[:, None, :] - lin
    gu = LINK.cdf(eu)
    gl = LINK.cdf(el)
    log_pi = np.maximum(LINK.log_interval(eu, el), LOG_PROB_FLOOR)
    return PointTerms(gu, gl, log_pi)
