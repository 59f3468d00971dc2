"""Regularised maximum-likelihood estimation over the full stored history.

Also builds the two parameter ellipsoids used by the planners: the
Hessian-shaped one behind the Bernstein radius and the covariance-shaped
baseline one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve

from .core import MnlMdp

SELF_CONCORDANT_FACTOR = 1.0 + 3.0 * math.sqrt(2.0)


class ConvergenceError(RuntimeError):
    """Newton did not reach the gradient tolerance; ``best`` holds the best iterate."""

    def __init__(self, msg: str, best: np.ndarray, grad_norm: float):
        super().__init__(msg)
        self.best = best
        self.grad_norm = grad_norm


class Samples(NamedTuple):
    """Design rows: features ``(n, U, d)``, validity mask ``(n, U)`` and outcome counts ``(n, U)``.

    A row with counts summing to ``N`` stands for ``N`` episodes that visited
    the same reachable set; individually stored samples are one-hot rows.
    """

    phi: np.ndarray
    mask: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, U: int, d: int) -> "Samples":
        return cls(np.zeros((0, U, d)), np.zeros((0, U), dtype=bool), np.zeros((0, U)))

    @classmethod
    def from_pairs(cls, pairs, d: Optional[int] = None) -> "Samples":
        """From ``[(features (n_i, d), y)]`` where ``y`` is one-hot or an index."""
        pairs = list(pairs)
        if not pairs:
            return cls.empty(1, d or 1)
        U = max(len(f) for f, _ in pairs)
        d = np.asarray(pairs[0][0]).shape[1]
        phi = np.zeros((len(pairs), U, d))
        mask = np.zeros((len(pairs), U), dtype=bool)
        counts = np.zeros((len(pairs), U))
        for i, (f, y) in enumerate(pairs):
            f = np.asarray(f, dtype=float)
            phi[i, :len(f)] = f
            mask[i, :len(f)] = True
            if np.ndim(y) == 0:
                counts[i, int(y)] = 1.0
            else:
                counts[i, :len(f)] = np.asarray(y, dtype=float)
        return cls(phi, mask, counts)

    @property
    def n(self) -> int:
        """Number of episodes represented."""
        return int(round(self.counts.sum()))


class SampleHistory:
    """Stores every observed sample (storage and per-refit work grow with k)."""

    def __init__(self, U: int, d: int, capacity: int = 64):
        self.U, self.d = U, d
        self._phi = np.zeros((capacity, U, d))
        self._mask = np.zeros((capacity, U), dtype=bool)
        self._counts = np.zeros((capacity, U))
        self._n = 0

    def add(self, s: int, a: int, phi_sa: np.ndarray, mask_sa: np.ndarray, index: int) -> None:
        if self._n == len(self._phi):
            grow = len(self._phi)
            self._phi = np.concatenate([self._phi, np.zeros_like(self._phi[:grow])])
            self._mask = np.concatenate([self._mask, np.zeros_like(self._mask[:grow])])
            self._counts = np.concatenate([self._counts, np.zeros_like(self._counts[:grow])])
        self._phi[self._n] = phi_sa
        self._mask[self._n] = mask_sa
        self._counts[self._n, index] = 1.0
        self._n += 1

    def view(self) -> Samples:
        n = self._n
        return Samples(self._phi[:n], self._mask[:n], self._counts[:n])

    @property
    def n_samples(self) -> int:
        return self._n

    @property
    def n_rows(self) -> int:
        return self._n

    @property
    def stored_floats(self) -> int:
        return self._n * (self.U * self.d + self.U)


class CountHistory:
    """Outcome counts per visited ``(s, a)``.

    Features depend only on ``(h, s, a)``, so the likelihood of the full
    history is exactly the count-weighted likelihood over distinct pairs.
    """

    def __init__(self, mdp: MnlMdp, h: int):
        self._phi = mdp.phi[h]
        self._mask = mdp.mask[h]
        self._counts = np.zeros(self._mask.shape)
        self._seen = np.zeros(self._mask.shape[:2], dtype=bool)
        self._n = 0
        self.U, self.d = mdp.U, mdp.d

    def add(self, s: int, a: int, phi_sa=None, mask_sa=None, index: int = 0) -> None:
        self._counts[s, a, index] += 1.0
        self._seen[s, a] = True
        self._n += 1

    def view(self) -> Samples:
        sel = self._seen
        return Samples(self._phi[sel], self._mask[sel], self._counts[sel])

    @property
    def n_samples(self) -> int:
        return self._n

    @property
    def n_rows(self) -> int:
        return int(self._seen.sum())

    @property
    def stored_floats(self) -> int:
        return int(self._counts.size)


def make_history(kind: str, mdp: MnlMdp, h: int):
    if kind == "samples":
        return SampleHistory(mdp.U, mdp.d)
    if kind == "counts":
        return CountHistory(mdp, h)
    raise ValueError(f"unknown history kind {kind!r}")


# ---------------------------------------------------------------- loss

@njit(cache=True)
def _nll_kernel(phi, mask, counts, theta, derivs):
    """Unregularised count-weighted negative log-likelihood, optionally with gradient and Hessian."""
    n, U, d = phi.shape
    loss = 0.0
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    z = np.empty(U)
    p = np.empty(U)
    mean = np.empty(d)
    for i in range(n):
        m = -1e300
        for u in range(U):
            if mask[i, u]:
                acc = 0.0
                for j in range(d):
                    acc += phi[i, u, j] * theta[j]
                z[u] = acc
                if acc > m:
                    m = acc
        se = 0.0
        for u in range(U):
            if mask[i, u]:
                p[u] = math.exp(z[u] - m)
                se += p[u]
            else:
                p[u] = 0.0
        lse = m + math.log(se)
        N = 0.0
        for u in range(U):
            if mask[i, u]:
                p[u] /= se
                loss -= counts[i, u] * (z[u] - lse)
                N += counts[i, u]
        if not derivs or N == 0.0:
            continue
        for j in range(d):
            mean[j] = 0.0
        for u in range(U):
            if mask[i, u]:
                r = p[u] * N - counts[i, u]
                w = p[u] * N
                for j in range(d):
                    mean[j] += p[u] * phi[i, u, j]
                    grad[j] += r * phi[i, u, j]
                    for l in range(d):
                        hess[j, l] += w * phi[i, u, j] * phi[i, u, l]
        for j in range(d):
            for l in range(d):
                hess[j, l] -= N * mean[j] * mean[l]
    return loss, grad, hess


def _nll(theta, samples: Samples, derivs: bool):
    return _nll_kernel(np.ascontiguousarray(samples.phi, dtype=float),
                       np.ascontiguousarray(samples.mask, dtype=np.bool_),
                       np.ascontiguousarray(samples.counts, dtype=float),
                       np.ascontiguousarray(theta, dtype=float), derivs)


def mle_loss(theta: np.ndarray, samples: Samples, lam: float) -> float:
    theta = np.asarray(theta, dtype=float)
    return float(_nll(theta, samples, False)[0] + 0.5 * lam * theta @ theta)


def data_hessian(theta: np.ndarray, samples: Samples) -> np.ndarray:
    """``sum_i N_i (E_p[phi phi^T] - E_p[phi] E_p[phi]^T)`` without the regulariser."""
    return _nll(theta, samples, True)[2]


def mle_loss_grad_hess(theta, samples: Samples, lam: float):
    """Loss, gradient and Hessian of the regularised negative log-likelihood."""
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[0]
    loss, grad, hess = _nll(theta, samples, True)
    loss = float(loss + 0.5 * lam * theta @ theta)
    grad = grad + lam * theta
    hess = hess + lam * np.eye(d)
    return loss, grad, 0.5 * (hess + hess.T)


def newton_iteration_ops(rows: int, U: int, d: int) -> int:
    """Arithmetic-cost model of one Newton iteration (loss, gradient, Hessian, solve)."""
    return rows * U * (3 * d + 2 * d * d + 6) + d ** 3 // 3 + 2 * d * d


FULL_STEP_DECREMENT = 1e-6


def fit_mle(samples: Samples, lam: float, tol: float = 1e-8, max_iter: int = 100,
            theta0: Optional[np.ndarray] = None, armijo: float = 1e-4, backtrack: float = 0.5,
            stats: Optional[dict] = None) -> np.ndarray:
    """Damped Newton on the regularised likelihood (unconstrained).

    Warm-starts from ``theta0`` when given.  ``stats``, if passed, receives
    ``iterations`` and ``ops`` (cost-model units, line search included).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = samples.phi.shape[-1]
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    rows, U = samples.phi.shape[0], samples.phi.shape[1]
    loss, g, Hs = mle_loss_grad_hess(theta, samples, lam)
    ops = newton_iteration_ops(rows, U, d)
    best, best_g = theta, float(np.linalg.norm(g))
    it = 0
    while best_g > tol and it < max_iter:
        it += 1
        step = cho_solve(cho_factor(Hs), g)
        dec = float(g @ step)
        t = 1.0
        # a small Newton decrement means the full step is safe (quadratic phase), and the
        # Armijo test would only compare rounding noise of a long sum
        if dec > FULL_STEP_DECREMENT:
            slack = 64 * np.finfo(float).eps * max(1.0, abs(loss))
            while True:
                cand = theta - t * step
                lc = mle_loss(cand, samples, lam)
                ops += rows * U * (d + 4)
                if lc <= loss - armijo * t * dec + slack or t < 1e-10:
                    break
                t *= backtrack
        theta = theta - t * step
        loss, g, Hs = mle_loss_grad_hess(theta, samples, lam)
        ops += newton_iteration_ops(rows, U, d)
        gn = float(np.linalg.norm(g))
        if gn < best_g:
            best, best_g = theta, gn
    if stats is not None:
        stats["iterations"] = it
        stats["ops"] = ops
    if best_g > tol:
        raise ConvergenceError(f"Newton stopped at |grad| = {best_g:.3e} after {it} iterations",
                               best, best_g)
    return best


# ---------------------------------------------------------------- radii

def regularizer_ll(k: int, H: int, d: int, delta: float) -> float:
    """``lambda_k = d log(kH / delta)``."""
    return d * math.log(k * H / delta)


def radius_baseline(k: int, H: int, d: int, delta: float, kappa: float) -> float:
    """Covariance-ellipsoid radius ``kappa^{-1} sqrt(d log(kH/delta))``."""
    if k < 1 or not 0 < delta < 1 or not 0 < kappa <= 1:
        raise ValueError("need k >= 1, 0 < delta < 1, 0 < kappa <= 1")
    return math.sqrt(d * math.log(k * H / delta)) / kappa


def radius_bernstein(k: int, H: int, d: int, delta: float, B: float) -> float:
    """Gradient-norm radius ``(B + 3) sqrt(d log(kH/delta))``."""
    return (B + 3.0) * math.sqrt(d * math.log(k * H / delta))


# ---------------------------------------------------------------- ellipsoids

@dataclass
class ConfidenceEllipsoid:
    """``{theta : ||theta - center||_shape <= radius}`` (intersected with the B-ball by users)."""

    center: np.ndarray
    shape: np.ndarray
    radius: float
    _chol: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.center = np.array(self.center, dtype=float)  # never alias the caller's estimate
        self.shape = 0.5 * (np.asarray(self.shape, dtype=float) + np.asarray(self.shape, dtype=float).T)
        try:
            self._chol = cho_factor(self.shape)
        except np.linalg.LinAlgError:
            self.shape = self.shape + 1e-10 * np.eye(len(self.center))
            try:
                self._chol = cho_factor(self.shape)
            except np.linalg.LinAlgError as exc:
                raise ValueError("ellipsoid shape is not positive definite") from exc

    def distance(self, theta) -> float:
        diff = np.asarray(theta, dtype=float) - self.center
        return float(math.sqrt(max(diff @ self.shape @ diff, 0.0)))

    def contains(self, theta, tol: float = 1e-12) -> bool:
        return self.distance(theta) <= self.radius * (1 + tol) + tol

    def inverse(self) -> np.ndarray:
        return cho_solve(self._chol, np.eye(len(self.center)))

    def snapshot(self) -> dict:
        return {"center": self.center.tolist(), "radius": float(self.radius),
                "shape_eigenvalues": np.linalg.eigvalsh(self.shape).tolist()}


def ellipsoid_ll(theta_hat, samples: Samples, lam: float, beta_hat: float) -> ConfidenceEllipsoid:
    """Hessian-shaped ellipsoid with radius ``(1 + 3 sqrt 2) beta_hat``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    shape = data_hessian(theta_hat, samples) + lam * np.eye(len(theta_hat))
    return ConfidenceEllipsoid(theta_hat, shape, SELF_CONCORDANT_FACTOR * beta_hat)


def covariance_matrix(samples: Samples) -> np.ndarray:
    """``sum_i N_i sum_{s'} phi phi^T`` over the reachable sets."""
    d = samples.phi.shape[-1]
    N = samples.counts.sum(axis=1)
    flat = samples.phi.reshape(-1, d)
    w = np.repeat(N, samples.phi.shape[1]) * samples.mask.reshape(-1)
    return (flat * w[:, None]).T @ flat


def ellipsoid_baseline(theta_hat, samples: Samples, lam: float, kappa: float,
                       beta: float) -> ConfidenceEllipsoid:
    """Covariance-shaped ellipsoid ``A = lam/kappa I + sum phi phi^T`` with radius ``beta``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    shape = lam / kappa * np.eye(len(theta_hat)) + covariance_matrix(samples)
    return ConfidenceEllipsoid(theta_hat, shape, beta)


# ---------------------------------------------------------------- per-run state

class MleState:
    """Per-stage histories and current MLE for one run."""

    def __init__(self, mdp: MnlMdp, history: str = "samples", tol: float = 1e-8, max_iter: int = 100):
        self.histories = [make_history(history, mdp, h) for h in range(mdp.H)]
        self.theta = np.zeros((mdp.H, mdp.d))
        self.tol, self.max_iter = tol, max_iter
        self.k = 1

    def add(self, mdp: MnlMdp, h: int, s: int, a: int, index: int) -> None:
        self.histories[h].add(s, a, mdp.phi[h][s, a], mdp.mask[h][s, a], index)

    def refit(self, h: int, lam: float) -> int:
        """Refit stage ``h`` warm-started at the current estimate; returns cost-model ops."""
        stats: dict = {}
        self.theta[h] = fit_mle(self.histories[h].view(), lam, self.tol, self.max_iter,
                               theta0=self.theta[h], stats=stats)
        return stats["ops"]

    def samples(self, h: int) -> Samples:
        return self.histories[h].view()

    @property
    def stored_samples(self) -> int:
        return sum(hist.n_samples for hist in self.histories)

    @property
    def stored_floats(self) -> int:
        return sum(hist.stored_floats for hist in self.histories) + self.theta.size
