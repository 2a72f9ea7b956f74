"""Simulation studies: data generation, replicate fits, posterior-shape checks.

Randomness is derived from one integer seed. Replicate ``r`` of a scenario
with seed ``s`` draws from ``numpy.random.default_rng(SeedSequence([s, r]))``,
so replicates can run in any order or in parallel and still reproduce.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .em import FitConfig, align_solution, fit
from .geometry import ModeConfig, batch_modes
from .integration import ApproximationMethod, QuadratureRule, gauss_hermite, quadrature_pass
from .geometry import _ridged_cholesky
from .model import LINK, ModelParams, OrdinalDataset

log = logging.getLogger(__name__)

WORKERS_ENV = "ORDINAL_LVM_WORKERS"

# Effective sample size entering Mardia's asymptotic tests for a single
# posterior density. 6000 puts the bivariate skewness cut-off at ~0.0095,
# which flags about a third of the posteriors drawn from the ``table1`` population.
DEFAULT_N_EQUIVALENT = 6000.0


# ---------------------------------------------------------------------------
# Reference populations
# ---------------------------------------------------------------------------


def equally_spaced_thresholds(categories: int, low: float = -3.0, high: float = 3.0) -> np.ndarray:
    return np.linspace(low, high, categories - 1)


def table1_population() -> ModelParams:
    """Five 4-category items, two factors, log-normal-looking loadings."""
    loadings = np.array([[1.03, 0.0], [1.44, 2.42], [2.11, 1.52], [1.80, 0.75], [1.53, 1.34]])
    return ModelParams.from_arrays([equally_spaced_thresholds(4)] * 5, loadings)


def symmetric_population() -> ModelParams:
    """Scenario with near-symmetric posteriors: thresholds (-2, 0, 2), loadings 0.5."""
    loadings = np.full((5, 2), 0.5)
    return ModelParams.from_arrays([[-2.0, 0.0, 2.0]] * 5, loadings)


def skewed_population() -> ModelParams:
    """Scenario with mostly skewed posteriors: thresholds (-1, 0, 1)."""
    loadings = np.column_stack([np.full(5, 2.5), [0.0, 1.0, 1.0, 1.0, 1.0]])
    return ModelParams.from_arrays([[-1.0, 0.0, 1.0]] * 5, loadings)


POPULATIONS = {
    "table1": table1_population,
    "symmetric": symmetric_population,
    "skewed": skewed_population,
}


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    params: ModelParams
    n: int = 200
    replicates: int = 100
    methods: tuple[ApproximationMethod, ...] = (ApproximationMethod("fla"),)
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.replicates < 0:
            raise ValueError("replicate count cannot be negative")
        object.__setattr__(self, "methods", tuple(self.methods))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "replicates": self.replicates,
            "seed": self.seed,
            "methods": [f"{m.tag}:{m.points}" if m.is_quadrature else m.tag for m in self.methods],
            "points": self.methods[0].points if self.methods else 5,
            "thresholds": [it.thresholds.tolist() for it in self.params.items],
            "loadings": self.params.loading_matrix.tolist(),
            "mask": self.params.constraint_mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        known = {"name", "n", "replicates", "seed", "methods", "points", "thresholds", "loadings", "mask", "population"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        if "population" in data:
            if data["population"] not in POPULATIONS:
                raise ValueError(f"unknown population {data['population']!r}")
            params = POPULATIONS[data["population"]]()
        else:
            mask = data.get("mask")
            params = ModelParams.from_arrays(
                [np.asarray(t, dtype=float) for t in data["thresholds"]],
                np.asarray(data["loadings"], dtype=float),
                None if mask is None else np.asarray(mask, dtype=bool),
            )
        points = int(data.get("points", 5))
        methods = tuple(parse_method(m, points) for m in data.get("methods", ["fla"]))
        return cls(
            params=params,
            n=int(data.get("n", 200)),
            replicates=int(data.get("replicates", 100)),
            methods=methods,
            seed=int(data.get("seed", 0)),
            name=str(data.get("name", "scenario")),
        )

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def parse_method(text: str, points: int = 5) -> ApproximationMethod:
    """``"fla"``, ``"agh-mode"`` or ``"agh-mode:7"`` (explicit point count)."""
    tag, _, k = str(text).partition(":")
    try:
        return ApproximationMethod(tag.strip(), int(k) if k else points)
    except ValueError as exc:
        raise ValueError(f"bad method {text!r}: {exc}") from None


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))


def sample_responses(params: ModelParams, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    tab = params.padded_thresholds()[:, 1:]  # tau_1..tau_{c_max}, +inf padded
    gam = LINK.cdf(tab[None, :, :] - (z @ params.loading_matrix.T)[:, :, None])
    u = rng.random((z.shape[0], params.p))
    return 1 + np.sum(u[:, :, None] > gam, axis=2)


def generate(spec: ScenarioSpec, replicate: int) -> OrdinalDataset:
    """Draw ``z ~ N(0, I)`` and one multinomial response per item."""
    rng = replicate_rng(spec.seed, replicate)
    z = rng.standard_normal((spec.n, spec.params.q))
    y = sample_responses(spec.params, z, rng)
    return OrdinalDataset(y, spec.params.categories)


# ---------------------------------------------------------------------------
# Mardia diagnostics of individual posteriors
# ---------------------------------------------------------------------------


def standardized_moments(params: ModelParams, responses, rule: QuadratureRule | None = None):
    """Posterior moments of every pattern after Mahalanobis whitening.

    Nodes are placed at the posterior mode and scaled by the curvature there.
    Returns ``(mean, cov, m3, m4)`` with ``m3[n, i, j, k] = E[w_i w_j w_k]``
    and ``m4[n] = E[(w'w)^2]`` for the whitened ``w``.
    """
    responses = np.atleast_2d(responses)
    q = params.q
    rule = gauss_hermite(21, q) if rule is None else rule
    modes, sigma, _, _, _ = batch_modes(params, responses)
    chol = _ridged_cholesky(np.linalg.inv(sigma))
    z, w, _ = quadrature_pass(params, responses, rule, modes, chol)
    mean = np.einsum("nm,nma->na", w, z)
    dev = z - mean[:, None, :]
    cov = np.einsum("nm,nma,nmb->nab", w, dev, dev)
    if not np.all(np.isfinite(cov)):
        raise FloatingPointError("non-finite posterior moments")
    lc = np.linalg.cholesky(cov)
    white = np.linalg.solve(lc[:, None, :, :], dev[..., None])[..., 0]
    m3 = np.einsum("nm,nmi,nmj,nmk->nijk", w, white, white, white)
    m4 = np.einsum("nm,nm->n", w, np.einsum("nma,nma->nm", white, white) ** 2)
    return mean, cov, m3, m4


def mardia(params: ModelParams, pattern, rule: QuadratureRule | None = None) -> tuple[float, float]:
    """Mardia skewness and kurtosis of one pattern's posterior density.

    For two factors these reduce to
    ``mu30^2 + mu03^2 + 3 mu12^2 + 3 mu21^2`` and ``mu40 + mu04 + 2 mu22``.
    """
    b1, b2 = mardia_batch(params, np.asarray(pattern)[None, :], rule)
    return float(b1[0]), float(b2[0])


def mardia_batch(params: ModelParams, responses, rule: QuadratureRule | None = None):
    _, _, m3, m4 = standardized_moments(params, responses, rule)
    b1 = np.einsum("nijk,nijk->n", m3, m3)
    if not (np.all(np.isfinite(b1)) and np.all(np.isfinite(m4))):
        raise FloatingPointError("non-finite Mardia measures")
    return b1, m4


def significance_test(beta1: float | None = None, beta2: float | None = None, q: int = 2,
                      n_equivalent: float = DEFAULT_N_EQUIVALENT, level: float = 0.05):
    """Mardia's asymptotic tests at ``level``.

    Skewness: ``n b1 / 6 ~ chi2(q(q+1)(q+2)/6)``. Kurtosis:
    ``(b2 - q(q+2)) / sqrt(8 q (q+2) / n) ~ N(0, 1)``, two sided.
    ``n`` is the effective sample size attributed to a single posterior
    density; it has no canonical value and is exposed as a knob.
    Returns ``(skew_flag, kurtosis_flag)``; a missing measure gives ``None``.
    """
    skew = kurt = None
    if beta1 is not None:
        df = q * (q + 1) * (q + 2) / 6.0
        skew = bool(n_equivalent * beta1 / 6.0 > stats.chi2.ppf(1.0 - level, df))
    if beta2 is not None:
        zstat = (beta2 - q * (q + 2)) / np.sqrt(8.0 * q * (q + 2) / n_equivalent)
        kurt = bool(abs(zstat) > stats.norm.ppf(1.0 - level / 2.0))
    return skew, kurt


@dataclass
class MardiaDiagnostics:
    beta1: np.ndarray
    beta2: np.ndarray
    skew_flags: np.ndarray
    kurtosis_flags: np.ndarray

    @property
    def skew_rate(self) -> float:
        return float(np.mean(self.skew_flags))

    @property
    def kurtosis_rate(self) -> float:
        return float(np.mean(self.kurtosis_flags))

    def summary(self) -> dict:
        return {
            "observations": int(self.beta1.size),
            "beta1_mean": float(np.mean(self.beta1)),
            "beta1_min": float(np.min(self.beta1)),
            "beta1_max": float(np.max(self.beta1)),
            "beta2_mean": float(np.mean(self.beta2)),
            "beta2_min": float(np.min(self.beta2)),
            "beta2_max": float(np.max(self.beta2)),
            "skew_rate": self.skew_rate,
            "kurtosis_rate": self.kurtosis_rate,
        }


def diagnose(params: ModelParams, dataset: OrdinalDataset, n_equivalent: float = DEFAULT_N_EQUIVALENT,
             level: float = 0.05, rule: QuadratureRule | None = None) -> MardiaDiagnostics:
    b1, b2 = mardia_batch(params, dataset.responses, rule)
    flags = [significance_test(x1, x2, params.q, n_equivalent, level) for x1, x2 in zip(b1, b2)]
    return MardiaDiagnostics(
        b1, b2, np.array([f[0] for f in flags]), np.array([f[1] for f in flags])
    )


def posterior_density_grid(params: ModelParams, pattern, grid: np.ndarray) -> np.ndarray:
    """Normalised posterior density of one pattern at ``grid`` points ``(m, q)``."""
    from .integration import log_marginal_lik

    pattern = np.asarray(pattern)
    ds = OrdinalDataset(pattern[None, :], params.categories)
    log_f = log_marginal_lik(params, ds, ApproximationMethod("agh-mode", 21))
    grid = np.asarray(grid, dtype=float)
    upper, lower = params.bounds(pattern[None, :])
    from .model import point_terms

    terms = point_terms(params.loading_matrix, upper, lower, grid[None, :, :])
    log_prior = stats.multivariate_normal(np.zeros(params.q), np.eye(params.q)).logpdf(grid)
    return np.exp(terms.log_pi[0].sum(axis=1) + log_prior - log_f)


# ---------------------------------------------------------------------------
# Replicate studies
# ---------------------------------------------------------------------------


@dataclass
class ReplicateOutcome:
    replicate: int
    method: str
    valid: bool
    converged: bool
    iterations: int
    seconds: float
    loadings: np.ndarray
    thresholds: np.ndarray
    diagnostic: str = ""


@dataclass
class StudyReport:
    """Summary of one method over all replicates of a scenario."""

    method: str
    labels: list[str]
    true: np.ndarray
    mean: np.ndarray
    bias: np.ndarray
    mse: np.ndarray
    threshold_labels: list[str]
    threshold_true: np.ndarray
    threshold_mean: np.ndarray
    threshold_bias: np.ndarray
    threshold_mse: np.ndarray
    replicates: int
    n_valid: int
    seconds: float = 0.0
    outcomes: list[ReplicateOutcome] = field(default_factory=list)

    @property
    def percent_valid(self) -> float:
        return 100.0 * self.n_valid / self.replicates if self.replicates else 0.0

    def to_dict(self) -> dict:
        """Machine-readable form; wall-clock time is left out so reruns match."""
        return {
            "method": self.method,
            "replicates": self.replicates,
            "valid": self.n_valid,
            "percent_valid": self.percent_valid,
            "loadings": [
                {"parameter": lab, "true": t, "mean": m, "bias": b, "mse": e}
                for lab, t, m, b, e in zip(self.labels, *map(_floats, (self.true, self.mean, self.bias, self.mse)))
            ],
            "thresholds": [
                {"parameter": lab, "true": t, "mean": m, "bias": b, "mse": e}
                for lab, t, m, b, e in zip(
                    self.threshold_labels,
                    *map(_floats, (self.threshold_true, self.threshold_mean, self.threshold_bias, self.threshold_mse)),
                )
            ],
        }


def _floats(arr) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(arr, dtype=float)]


def free_loading_index(params: ModelParams):
    """Free loadings in table order: first factor down the items, then the second."""
    mask = params.constraint_mask
    out = []
    for j in range(params.q):
        for i in range(params.p):
            if not mask[i, j]:
                out.append((i, j))
    return out


def _run_replicate(args):
    spec, replicate, config_kwargs = args
    data = generate(spec, replicate)
    outcomes = []
    for method in spec.methods:
        config = FitConfig(method=method, **config_kwargs)
        res = fit(data, spec.params.q, config, mask=spec.params.constraint_mask)
        aligned = align_solution(res.params, spec.params)
        outcomes.append(
            ReplicateOutcome(
                replicate=replicate,
                method=method.label(),
                valid=res.valid,
                converged=res.converged,
                iterations=res.iterations,
                seconds=res.seconds,
                loadings=aligned.loading_matrix,
                thresholds=np.concatenate(aligned.thresholds()),
                diagnostic=res.diagnostic,
            )
        )
    return outcomes


def _summarise(values: np.ndarray, truth: np.ndarray):
    if values.shape[0] == 0:
        nan = np.full(truth.shape, np.nan)
        return nan, nan, nan
    mean = values.mean(axis=0)
    return mean, mean - truth, np.mean((values - truth) ** 2, axis=0)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, int(workers))


def run_study(spec: ScenarioSpec, workers: int | None = None, **config_kwargs) -> dict[str, StudyReport]:
    """Fit every replicate with every method; one report per method.

    Failed or invalid fits are recorded and excluded from the summaries.
    Extra keyword arguments are forwarded to :class:`FitConfig`.
    """
    workers = resolve_workers(workers)
    jobs = [(spec, r, config_kwargs) for r in range(spec.replicates)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(job) for job in jobs]
    params = spec.params
    idx = free_loading_index(params)
    labels = [f"alpha_{i + 1}{j + 1}" for i, j in idx]
    true = np.array([params.loading_matrix[i, j] for i, j in idx])
    th_labels = [f"tau_{i + 1},{s + 1}" for i, it in enumerate(params.items) for s in range(it.thresholds.size)]
    th_true = np.concatenate(params.thresholds())
    reports = {}
    for method in spec.methods:
        name = method.label()
        outs = [o for rep in results for o in rep if o.method == name]
        valid = [o for o in outs if o.valid]
        lv = np.array([[o.loadings[i, j] for i, j in idx] for o in valid]).reshape(len(valid), len(idx))
        tv = np.array([o.thresholds for o in valid]).reshape(len(valid), th_true.size)
        mean, bias, mse = _summarise(lv, true)
        tmean, tbias, tmse = _summarise(tv, th_true)
        seconds = float(sum(o.seconds for o in outs))
        log.info("%s: %d/%d valid, %.1fs", name, len(valid), len(outs), seconds)
        reports[name] = StudyReport(
            method=name,
            labels=labels,
            true=true,
            mean=mean,
            bias=bias,
            mse=mse,
            threshold_labels=th_labels,
            threshold_true=th_true,
            threshold_mean=tmean,
            threshold_bias=tbias,
            threshold_mse=tmse,
            replicates=spec.replicates,
            n_valid=len(valid),
            seconds=seconds,
            outcomes=outs,
        )
    return reports


def _fmt(v: float) -> str:
    return "-" if not np.isfinite(v) else f"{v:.2f}"


def format_report(report: StudyReport, thresholds: bool = False) -> str:
    """Text table with True / Mean / Bias / MSE columns and a percent-valid header."""
    lines = [
        f"method: {report.method}",
        f"% valid samples: {report.percent_valid:.0f} ({report.n_valid}/{report.replicates})",
        f"{'True':<18}{'Mean':>8}{'Bias':>8}{'MSE':>8}",
    ]
    rows = zip(report.labels, report.true, report.mean, report.bias, report.mse)
    if thresholds:
        rows = list(rows) + list(zip(
            report.threshold_labels, report.threshold_true, report.threshold_mean,
            report.threshold_bias, report.threshold_mse,
        ))
    for lab, t, m, b, e in rows:
        lines.append(f"{lab + ' = ' + format(t, '.2f'):<18}{_fmt(m):>8}{_fmt(b):>8}{_fmt(e):>8}")
    return "\n".join(lines)
