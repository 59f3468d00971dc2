"""Instance generators: seeded random MNL MDPs, the layered block lower-bound MDP, a two-state chain."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, qmc

from .core import MnlMdp


class ConfigError(ValueError):
    """Infeasible generator parameters."""


def _unit_ball(rng: np.random.Generator, n: int, d: int, radius: float = 1.0) -> np.ndarray:
    g = rng.standard_normal((n, d))
    g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    return g * (radius * rng.random(n) ** (1.0 / d))[:, None]


def random_instance(d: int, H: int, states_per_stage: int, A: int, U: int, B: float,
                    seed: int) -> MnlMdp:
    """Random layered instance; every stage has ``states_per_stage`` states and the start is state 0.

    Reachable sets are uniform ``U``-subsets of the next layer (sorted).
    Features start uniform in the unit ball, are shifted so the first
    reachable state is the zero anchor, then divided by the largest norm
    if it exceeds one.  ``theta*_h`` is uniform in the ``B``-ball.
    """
    if min(d, H, A, U, states_per_stage) < 1:
        raise ConfigError("d, H, A, U and states_per_stage must be >= 1")
    if U > states_per_stage:
        raise ConfigError(f"U = {U} exceeds states_per_stage = {states_per_stage}")
    if not B > 0:
        raise ConfigError("B must be positive")
    rng = np.random.default_rng(seed)
    S = states_per_stage
    nxt = np.empty((H, S, A, U), dtype=np.int64)
    for h in range(H):
        for s in range(S):
            for a in range(A):
                nxt[h, s, a] = np.sort(rng.choice(S, size=U, replace=False))
    phi = _unit_ball(rng, H * S * A * U, d).reshape(H, S, A, U, d)
    phi = phi - phi[:, :, :, :1, :]
    c = float(np.linalg.norm(phi, axis=-1).max())
    if c > 1.0:
        phi /= c
    theta = _unit_ball(rng, H, d, B)
    rewards = rng.random((H, S, A))
    mask = np.ones((S, A, U), dtype=bool)
    return MnlMdp(d=d, H=H, A=A, B=float(B), n_states=(S,) * (H + 1),
                  next_states=tuple(nxt), phi=tuple(phi), mask=(mask,) * H,
                  rewards=tuple(rewards), theta_star=theta, initial_state=0).validate()


def default_arm_features(A: int, d: int) -> np.ndarray:
    """``A`` directions on the unit sphere from a Halton sequence pushed through the normal quantile."""
    pts = qmc.Halton(d, scramble=False).random(A + 1)[1:]
    z = norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    out = np.zeros((A, d))
    for a in range(A):
        n = np.linalg.norm(z[a])
        if n < 1e-12:
            out[a, 0] = 1.0
        else:
            out[a] = z[a] / n
    return out


def hard_instance(d: int, H: int, A: int, theta_stars, arm_features=None,
                  B: Optional[float] = None) -> MnlMdp:
    """Block MDP embedding ``H/2`` independent ``A``-armed logistic bandits.

    Each block spends stage ``2i`` choosing an arm from a single state: the
    next state is ``s*`` (id 1, feature ``x_a``) or the anchor (id 0, zero
    feature).  Stage ``2i + 1`` pays reward 1 in ``s*`` and moves
    deterministically to the single state that starts the next block.
    """
    if H < 2 or H % 2:
        raise ConfigError("hard_instance needs an even H >= 2")
    thetas = np.asarray(theta_stars, dtype=float).reshape(-1, d)
    if len(thetas) != H // 2:
        raise ConfigError(f"need {H // 2} block parameters, got {len(thetas)}")
    X = default_arm_features(A, d) if arm_features is None else np.asarray(arm_features, dtype=float)
    if X.shape != (A, d) or np.any(np.linalg.norm(X, axis=1) > 1 + 1e-12):
        raise ConfigError("arm_features must be (A, d) with norms <= 1")
    if B is None:
        B = max(1.0, float(np.linalg.norm(thetas, axis=1).max()))
    n_states, reach, feats, rewards, theta = [], [], [], [], []
    zero = np.zeros(d)
    for i in range(H // 2):
        n_states += [1, 2]
        reach.append([[[0, 1] for _ in range(A)]])
        feats.append([[np.vstack([zero, X[a]]) for a in range(A)]])
        rewards.append(np.zeros((1, A)))
        theta.append(thetas[i])
        reach.append([[[0] for _ in range(A)] for _ in range(2)])
        feats.append([[zero[None] for _ in range(A)] for _ in range(2)])
        rewards.append(np.array([[0.0] * A, [1.0] * A]))
        theta.append(zero)
    n_states.append(1)
    return MnlMdp.from_lists(d, H, B, n_states, reach, feats, np.array(theta), rewards).validate()


def hard_instance_value(mdp: MnlMdp) -> float:
    """Closed form ``sum_i max_a rho_a^(i)`` of the optimal start value of a block instance."""
    total = 0.0
    for h in range(0, mdp.H, 2):
        z = mdp.phi[h][0, :, 1, :] @ mdp.theta_star[h]
        total += float(np.max(1.0 / (1.0 + np.exp(-z))))
    return total


def chain_instance(H: int, p_values: Sequence[float]) -> MnlMdp:
    """Two-state chain with ``d = A = 1``; state 1 is good, state 0 is bad and absorbing.

    From the good state at stage ``h`` the chain stays good with probability
    ``p_values[h]``; only the good state at the last stage pays reward 1,
    so the optimal start value is ``prod_{h < H-1} p_values[h]``.
    """
    p = np.asarray(p_values, dtype=float)
    if H < 1 or p.shape != (H,) or np.any(p <= 0) or np.any(p >= 1):
        raise ConfigError("p_values must be H numbers in (0, 1)")
    logits = np.log(p) - np.log1p(-p)
    B = max(1.0, float(np.abs(logits).max()))
    reach, feats, rewards = [], [], []
    for h in range(H):
        reach.append([[[0]], [[0, 1]]])
        feats.append([[np.zeros((1, 1))], [np.array([[0.0], [1.0]])]])
        r = np.zeros((2, 1))
        if h == H - 1:
            r[1, 0] = 1.0
        rewards.append(r)
    return MnlMdp.from_lists(1, H, B, [2] * (H + 1), reach, feats, logits[:, None], rewards,
                             initial_state=1).validate()


def chain_value(p_values: Sequence[float]) -> float:
    p = np.asarray(p_values, dtype=float)
    return float(np.prod(p[:-1]))


GENERATORS = {
    "random": random_instance,
    "hard": hard_instance,
    "chain": chain_instance,
}


def make_instance(spec: dict) -> MnlMdp:
    """Build from ``{"generator": name, "params": {...}}`` or ``{"path": file}``."""
    from .core import load_instance

    if "path" in spec:
        return load_instance(spec["path"]).validate()
    name = spec.get("generator", "random")
    if name not in GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    try:
        return GENERATORS[name](**spec.get("params", {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from exc
