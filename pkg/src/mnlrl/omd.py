"""Online mirror descent estimator with a look-ahead Hessian local norm.

One projected step per (episode, stage); state is one vector and one
``d x d`` matrix per stage, independent of the episode count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve

PROJECTION_TOL = 1e-10
PROJECTION_MAX_ITER = 200


@njit(cache=True)
def _episode_kernel(features, theta, yv):
    n, d = features.shape
    z = features @ theta
    z = z - z.max()
    e = np.exp(z)
    se = e.sum()
    p = e / se
    logp = z - math.log(se)
    loss = -(yv @ logp)
    grad = (p - yv) @ features
    mean = p @ features
    hess = np.zeros((d, d))
    for u in range(n):
        for i in range(d):
            for j in range(d):
                hess[i, j] += p[u] * features[u, i] * features[u, j]
    for i in range(d):
        for j in range(d):
            hess[i, j] -= mean[i] * mean[j]
    return loss, grad, 0.5 * (hess + hess.T)


def per_episode_loss_grad_hess(theta, features, y):
    """Single-episode log-loss, gradient and Hessian.

    ``features`` is ``(n, d)`` over the visited reachable set; ``y`` is the
    one-hot outcome (or its index).
    """
    features = np.ascontiguousarray(features, dtype=float)
    if np.ndim(y) == 0:
        yv = np.zeros(len(features))
        yv[int(y)] = 1.0
    else:
        yv = np.ascontiguousarray(y, dtype=float)
    loss, grad, hess = _episode_kernel(features, np.ascontiguousarray(theta, dtype=float), yv)
    return float(loss), grad, hess


def project_ball_Hnorm(point, B: float, M) -> np.ndarray:
    """``argmin_{||theta||_2 <= B} ||theta - point||_M``.

    Uses the stationarity condition ``theta(mu) = (M + mu I)^{-1} M point``
    and bisects on ``mu >= 0`` until ``||theta(mu)||_2 = B`` (relative 1e-10),
    working in the eigenbasis of ``M``.
    """
    point = np.asarray(point, dtype=float)
    if np.linalg.norm(point) <= B:
        return point.copy()
    if B <= 0:
        return np.zeros_like(point)
    w, Q = np.linalg.eigh(np.asarray(M, dtype=float))
    if w[0] <= 0:
        raise ValueError("projection metric must be positive definite")
    z = Q.T @ point
    wz = w * z

    def norm_at(mu: float) -> float:
        return float(np.linalg.norm(wz / (w + mu)))

    lo, hi = 0.0, w[-1] * np.linalg.norm(point) / B
    if not (norm_at(lo) > B >= norm_at(hi)):
        raise RuntimeError("projection bisection failed to bracket the multiplier")
    for _ in range(PROJECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if norm_at(mid) > B:
            lo = mid
        else:
            hi = mid
        if hi - lo <= PROJECTION_TOL * max(hi, 1e-300):
            break
    return Q @ (wz / (w + hi))


def radius_omd(k: int, H: int, d: int, delta: float, B: float, U: int,
               eta: float, lam: float) -> float:
    """Explicit OMD confidence radius ``beta_tilde_k`` (constant ``c = 7 eta / 6``)."""
    L = math.log(2.0 * H * math.sqrt(1.0 + 2.0 * k) / delta)
    term_a = (3.0 * math.log(1.0 + (U + 1.0) * k) + 3.0) * (
        17.0 / 16.0 * lam + 2.0 * math.sqrt(lam) * L + 16.0 * L * L) + 2.0
    term_b = math.sqrt(6.0) * (7.0 * eta / 6.0) * d * math.log(1.0 + (k + 1.0) / (2.0 * lam))
    return math.sqrt(2.0 * eta * (term_a + term_b) + 4.0 * lam * B)


def theory_eta(U: int, B: float) -> float:
    return 0.5 * math.log(1.0 + U) + (B + 1.0)


def theory_lambda(eta: float, B: float, d: int) -> float:
    return 84.0 * math.sqrt(2.0) * eta * (B + d)


def omd_step_ops(U: int, d: int) -> int:
    """Cost-model units of one step (projection charged at its iteration budget)."""
    hess = 2 * (U * (3 * d + 2 * d * d + 6))
    solve = d ** 3 // 3 + 2 * d * d
    projection = 4 * d ** 3 + PROJECTION_MAX_ITER * 3 * d
    return hess + solve + projection + 3 * d * d


@dataclass(frozen=True)
class OmdState:
    """Iterate ``theta`` in the B-ball and cumulative look-ahead Hessian ``H_cum`` for one stage."""

    theta: np.ndarray
    H_cum: np.ndarray
    eta: float
    lam: float
    B: float
    k: int = 1

    @classmethod
    def initial(cls, d: int, eta: float, lam: float, B: float) -> "OmdState":
        return cls(np.zeros(d), lam * np.eye(d), eta, lam, B, 1)

    @property
    def stored_floats(self) -> int:
        return self.theta.size + self.H_cum.size


def omd_step(state: OmdState, features, y) -> OmdState:
    """One projected mirror-descent step followed by the look-ahead Hessian update."""
    _, g, Hk = per_episode_loss_grad_hess(state.theta, features, y)
    Ht = state.H_cum + state.eta * Hk
    step = cho_solve(cho_factor(Ht), g)
    theta_new = project_ball_Hnorm(state.theta - state.eta * step, state.B, Ht)
    _, _, H_next = per_episode_loss_grad_hess(theta_new, features, y)
    return replace(state, theta=theta_new, H_cum=state.H_cum + H_next, k=state.k + 1)
