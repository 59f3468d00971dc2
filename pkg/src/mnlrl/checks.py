"""Invariant and property checks on an instance, run by ``mnlrl validate``."""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from .core import (MnlMdp, kappa_bounds, compute_kappa_star, estimate_kappa, evaluate_policy,
                   exact_value_functions, from_dict, recenter_features, to_dict, transition_probs)
from .mle import Samples, mle_loss_grad_hess
from .omd import per_episode_loss_grad_hess

MAX_ENUMERATED_POLICIES = 64


def _central_grad(f: Callable, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


def check_invariants(mdp: MnlMdp, rng) -> str:
    bad = mdp.violations()
    return "; ".join(bad)


def check_softmax(mdp: MnlMdp, rng) -> str:
    for _ in range(20):
        theta = rng.uniform(-mdp.B, mdp.B, mdp.d)
        h = int(rng.integers(mdp.H))
        s = int(rng.integers(mdp.n_states[h]))
        a = int(rng.integers(mdp.A))
        p = transition_probs(mdp, h, s, a, theta)
        if abs(p.sum() - 1) > 1e-12 or np.any(p < 0) or np.any(p > 1):
            return f"distribution at {(h, s, a)} not normalised"
        shift = rng.standard_normal(mdp.d)
        z = (mdp.features(h, s, a) + shift) @ theta
        q = np.exp(z - z.max())
        q /= q.sum()
        if np.max(np.abs(p - q)) > 1e-12:
            return f"shift invariance broken at {(h, s, a)}"
    return ""


def check_recentering(mdp: MnlMdp, rng) -> str:
    other = recenter_features(mdp)
    if not other.is_anchored():
        return "recentered instance has no zero anchor"
    for _ in range(20):
        theta = rng.uniform(-1, 1, mdp.d)
        h = int(rng.integers(mdp.H))
        s = int(rng.integers(mdp.n_states[h]))
        a = int(rng.integers(mdp.A))
        scale = other.B / mdp.B
        p = transition_probs(mdp, h, s, a, theta)
        q = transition_probs(other, h, s, a, theta * scale)
        if np.max(np.abs(p - q)) > 1e-12:
            return f"recentering changed probabilities at {(h, s, a)}"
    return ""


def check_kappa(mdp: MnlMdp, rng) -> str:
    lo, hi = kappa_bounds(mdp.U, mdp.B)
    ks = compute_kappa_star(mdp)
    kh = estimate_kappa(mdp, 500, rng)
    if not (lo * (1 - 1e-12) <= kh <= ks * (1 + 1e-12) and ks <= hi * (1 + 1e-12)):
        return f"kappa sandwich violated: {lo:.3g} <= {kh:.3g} <= {ks:.3g} <= {hi:.3g}"
    return ""


def check_values(mdp: MnlMdp, rng) -> str:
    Q, V = exact_value_functions(mdp)
    for h in range(mdp.H):
        if np.any(V[h] < -1e-12) or np.any(V[h] > mdp.H - h + 1e-12):
            return f"V*[{h}] outside [0, H - h]"
    n_pol = mdp.A ** sum(mdp.n_states[:-1])
    if n_pol <= MAX_ENUMERATED_POLICIES:
        best = -np.inf
        for flat in itertools.product(range(mdp.A), repeat=sum(mdp.n_states[:-1])):
            pi, pos = [], 0
            for n in mdp.n_states[:-1]:
                pi.append(np.array(flat[pos:pos + n]))
                pos += n
            best = max(best, evaluate_policy(mdp, pi)[0][mdp.initial_state])
        if abs(best - V[0][mdp.initial_state]) > 1e-10:
            return "DP value differs from policy enumeration"
    return ""


def check_derivatives(mdp: MnlMdp, rng) -> str:
    pairs = []
    for _ in range(10):
        h = int(rng.integers(mdp.H))
        s = int(rng.integers(mdp.n_states[h]))
        a = int(rng.integers(mdp.A))
        f = mdp.features(h, s, a)
        pairs.append((f, int(rng.integers(len(f)))))
    samples = Samples.from_pairs(pairs)
    theta = rng.uniform(-1, 1, mdp.d)
    lam = 0.5
    _, g, Hs = mle_loss_grad_hess(theta, samples, lam)
    fd = _central_grad(lambda t: mle_loss_grad_hess(t, samples, lam)[0], theta)
    if np.linalg.norm(fd - g) > 1e-6 * max(1.0, np.linalg.norm(g)):
        return "MLE gradient disagrees with finite differences"
    fdh = np.array([_central_grad(lambda t: mle_loss_grad_hess(t, samples, lam)[1][i], theta)
                    for i in range(mdp.d)])
    if np.linalg.norm(fdh - Hs) > 1e-5 * max(1.0, np.linalg.norm(Hs)):
        return "MLE Hessian disagrees with finite differences"
    f, y = pairs[0]
    _, g1, _ = per_episode_loss_grad_hess(theta, f, y)
    fd1 = _central_grad(lambda t: per_episode_loss_grad_hess(t, f, y)[0], theta)
    if np.linalg.norm(fd1 - g1) > 1e-6 * max(1.0, np.linalg.norm(g1)):
        return "per-episode gradient disagrees with finite differences"
    return ""


def check_roundtrip(mdp: MnlMdp, rng) -> str:
    other = from_dict(to_dict(mdp))
    if to_dict(other) != to_dict(mdp):
        return "serialization round trip is lossy"
    return ""


CHECKS = {
    "invariants": check_invariants,
    "softmax": check_softmax,
    "recentering": check_recentering,
    "kappa": check_kappa,
    "values": check_values,
    "derivatives": check_derivatives,
    "roundtrip": check_roundtrip,
}


def run_checks(mdp: MnlMdp, seed: int = 0) -> dict:
    """Run every check; maps name to an error message ("" on success)."""
    out = {}
    for name, fn in CHECKS.items():
        rng = np.random.default_rng(seed)
        try:
            out[name] = fn(mdp, rng)
        except Exception as exc:  # a crash is a failed check
            out[name] = f"{type(exc).__name__}: {exc}"
    return out
