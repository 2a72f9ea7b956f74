"""Shared generators and finite-difference utilities for the test-suite."""

import numpy as np
from scipy.special import logit

from ordinal_lvm.model import ItemParams, ModelParams
from ordinal_lvm.simulation import sample_responses


def random_item(rng, c=4, q=1, spread=2.5, loading=(0.5, 2.0)):
    th = np.sort(rng.uniform(-spread, spread, c - 1))
    while np.any(np.diff(th) < 0.05):
        th = np.sort(rng.uniform(-spread, spread, c - 1))
    al = rng.uniform(*loading, q) * rng.choice([-1.0, 1.0], q)
    return ItemParams(th, al)


def random_params(rng, p=5, c=4, q=1, **kw):
    cs = [c] * p if np.isscalar(c) else list(c)
    items = [random_item(rng, ci, q, **kw) for ci in cs]
    return ModelParams.from_arrays([it.thresholds for it in items], np.array([it.loadings for it in items]))


def random_instance(rng, p=5, c=4, q=1, **kw):
    """Random parameters plus one pattern drawn from the model."""
    params = random_params(rng, p, c, q, **kw)
    y = sample_responses(params, rng.standard_normal((1, q)), rng)[0]
    return params, y


def item_from_gammas(gammas, loadings=(0.0,)):
    """Item whose cumulative probabilities at z = 0 are ``gammas``."""
    return ItemParams(logit(np.asarray(gammas, dtype=float)), np.asarray(loadings, dtype=float))


def _central(f, x, e, h):
    # five-point central stencil: O(h^4) truncation, far less roundoff than h=1e-6
    f2p, f1p = np.asarray(f(x + 2 * e)), np.asarray(f(x + e))
    f1m, f2m = np.asarray(f(x - e)), np.asarray(f(x - 2 * e))
    return (-f2p + 8 * f1p - 8 * f1m + f2m) / (12 * h)


def fd_gradient(f, x, h=1e-3):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = _central(f, x, e, h)
    return g


def fd_jacobian(f, x, h=1e-3):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append(_central(f, x, e, h))
    return np.stack(cols, axis=-1)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))
