"""Gaussian process regression surrogate and queue reprioritization.

Isotropic squared-exponential kernel on inputs scaled to [-1, 1]^d, with
standardized outputs, unit signal variance and a small diagonal jitter.  The
lengthscale is picked from a fixed grid by log marginal likelihood.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky

logger = logging.getLogger(__name__)

LENGTHSCALE_GRID = (0.1, 0.25, 0.5, 1.0, 2.0)
JITTER = 1e-8
MAX_JITTER = 1e-2


@dataclass
class SurrogateState:
    X: np.ndarray
    y: np.ndarray
    lengthscale: float
    signal_var: float
    noise_var: float
    x_lo: np.ndarray
    x_span: np.ndarray
    y_mean: float
    y_std: float
    chol: np.ndarray | None
    alpha: np.ndarray | None
    log_ml: float

    @property
    def constant(self) -> bool:
        """True when the outputs carried no variation and the model predicts their mean."""
        return self.alpha is None

    def scale(self, X) -> np.ndarray:
        return 2.0 * (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_lo) / self.x_span - 1.0


def sq_exp(A: np.ndarray, B: np.ndarray, lengthscale: float, signal_var: float = 1.0) -> np.ndarray:
    d2 = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    np.maximum(d2, 0.0, out=d2)
    return signal_var * np.exp(-0.5 * d2 / lengthscale**2)


def _factor(K: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    """Cholesky factor of K + jitter*I, growing the jitter until it succeeds."""
    n = K.shape[0]
    while True:
        try:
            return cholesky(K + jitter * np.eye(n), lower=True), jitter
        except LinAlgError:
            if jitter >= MAX_JITTER:
                raise
            jitter *= 10.0


def log_marginal_likelihood(
    Xs: np.ndarray, ys: np.ndarray, lengthscale: float, signal_var: float = 1.0, noise_var: float = JITTER
) -> float:
    """log p(ys | Xs) for already scaled inputs and standardized outputs."""
    return _lml(Xs, ys, lengthscale, signal_var, noise_var)[0]


def _lml(Xs, ys, lengthscale, signal_var, noise_var):
    L, jitter = _factor(sq_exp(Xs, Xs, lengthscale, signal_var), noise_var)
    alpha = cho_solve((L, True), ys)
    lml = float(-0.5 * ys @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(ys) * math.log(2 * math.pi))
    return lml, L, alpha, jitter


def gpr_fit(
    X,
    y,
    grid: Sequence[float] = LENGTHSCALE_GRID,
    noise_var: float = JITTER,
    signal_var: float = 1.0,
    bounds: tuple | None = None,
) -> SurrogateState:
    """Fit the surrogate, choosing the lengthscale from ``grid`` by marginal likelihood.

    ``bounds`` = (lo, hi) fixes the input box mapped onto [-1, 1]^d; by
    default the training data's range is used.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} inputs but {y.size} outputs")
    if y.size < 2:
        raise ValueError("need at least 2 training points")
    if bounds is None:
        lo, hi = X.min(axis=0), X.max(axis=0)
    else:
        lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), X.shape[1:]).copy()
        hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), X.shape[1:]).copy()
    span = np.where(hi > lo, hi - lo, 1.0)
    y_mean, y_std = float(y.mean()), float(y.std())
    state = SurrogateState(
        X, y, float("nan"), signal_var, noise_var, lo, span, y_mean, y_std, None, None, float("nan")
    )
    if y_std == 0.0:
        logger.warning("all %d outputs equal %g; using a constant predictor", y.size, y_mean)
        state.y_std = 1.0
        return state

    Xs = state.scale(X)
    ys = (y - y_mean) / y_std
    best = None
    for ell in grid:
        lml, L, alpha, jitter = _lml(Xs, ys, ell, signal_var, noise_var)
        if best is None or lml > best[0]:
            best = (lml, ell, L, alpha, jitter)
    state.log_ml, state.lengthscale, state.chol, state.alpha, state.noise_var = best
    return state


def gpr_predict(state: SurrogateState, points) -> np.ndarray:
    """Predictive mean at ``points``, on the original output scale."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if state.constant:
        return np.full(P.shape[0], state.y_mean)
    Ks = sq_exp(state.scale(P), state.scale(state.X), state.lengthscale, state.signal_var)
    return state.y_mean + state.y_std * (Ks @ state.alpha)


def gpr_predict_grad(state: SurrogateState, points) -> np.ndarray:
    """Gradient of the predictive mean with respect to the (unscaled) inputs."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if state.constant:
        return np.zeros_like(P)
    Ps, Xs = state.scale(P), state.scale(state.X)
    Ks = sq_exp(Ps, Xs, state.lengthscale, state.signal_var)
    # d k(p, x_i) / d p_scaled = -k (p - x_i) / l^2
    diff = Ps[:, None, :] - Xs[None, :, :]
    g_scaled = -np.einsum("ij,ijk,j->ik", Ks, diff, state.alpha) / state.lengthscale**2
    return state.y_std * g_scaled * (2.0 / state.x_span)


def reprioritize(state: SurrogateState, pending: Sequence[tuple]) -> list[tuple]:
    """New priorities for pending tasks, most promising (lowest predicted value) first.

    ``pending`` holds (task, point) pairs where ``task`` is a task id or has a
    ``task_id`` attribute. Returns (task, priority) with priorities m..1.
    """
    if not pending:
        return []
    ids = [getattr(t, "task_id", t) for t, _ in pending]
    mu = gpr_predict(state, np.array([p for _, p in pending], dtype=float))
    order = sorted(range(len(pending)), key=lambda i: (mu[i], ids[i]))
    m = len(pending)
    return [(pending[i][0], m - rank) for rank, i in enumerate(order)]


def rank_pending(X_done, y_done, pending_ids, pending_points, grid=LENGTHSCALE_GRID, bounds=None):
    """Fit on completed results and return [(task_id, new_priority)] for pending tasks.

    Module-level and free of live objects so it can run in another process.
    """
    finite = np.isfinite(np.asarray(y_done, dtype=float))
    X_done = np.asarray(X_done, dtype=float)[finite]
    y_done = np.asarray(y_done, dtype=float)[finite]
    if y_done.size < 2:
        m = len(pending_ids)
        return [(tid, m - i) for i, tid in enumerate(sorted(pending_ids))]
    state = gpr_fit(X_done, y_done, grid, bounds=bounds)
    return reprioritize(state, list(zip(pending_ids, pending_points)))
