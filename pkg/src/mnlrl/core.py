"""MNL mixture MDP model: softmax transitions, simulation and exact DP oracles.

States are layered: stage ``h`` (0-based, ``0 <= h <= H``) owns its own
integer state ids ``0 .. n_states[h] - 1``; layer ``H`` is terminal.  Each
reachable set is stored padded to the global maximum size ``U`` so that a
whole stage can be evaluated with a handful of array operations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

FORMAT_TAG = "mnl-mdp/1"


class PolicyError(KeyError):
    """Raised when a policy has no action for a visited state."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MnlMdp:
    """Inhomogeneous episodic MNL mixture MDP with a known feature map.

    Per-stage arrays (tuples indexed by ``h``):

    * ``next_states[h]``: ``(S_h, A, U)`` int, next-state ids in stage ``h+1``,
      ``-1`` on padding.
    * ``phi[h]``: ``(S_h, A, U, d)`` features, zero on padding.
    * ``mask[h]``: ``(S_h, A, U)`` bool, True on real entries.
    * ``rewards[h]``: ``(S_h, A)`` in ``[0, 1]``.
    """

    d: int
    H: int
    A: int
    B: float
    n_states: tuple
    next_states: tuple
    phi: tuple
    mask: tuple
    rewards: tuple
    theta_star: np.ndarray
    initial_state: int = 0
    _U: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        for name in ("next_states", "phi", "mask", "rewards"):
            object.__setattr__(self, name, tuple(_frozen(x) for x in getattr(self, name)))
        object.__setattr__(self, "theta_star", _frozen(np.asarray(self.theta_star, dtype=float)))
        object.__setattr__(self, "n_states", tuple(int(n) for n in self.n_states))
        object.__setattr__(self, "_U", int(max(m.sum(axis=-1).max() for m in self.mask)))

    @classmethod
    def from_lists(cls, d, H, B, n_states, reachable, features, theta_star, rewards,
                   initial_state=0) -> "MnlMdp":
        """Build from nested lists.

        ``reachable[h][s][a]`` is the ordered list of next-state ids and
        ``features[h][s][a]`` the matching list of length-``d`` vectors.
        """
        A = len(reachable[0][0])
        U = max(len(reachable[h][s][a]) for h in range(H)
                for s in range(n_states[h]) for a in range(A))
        nxt, phi, mask, rew = [], [], [], []
        for h in range(H):
            S = n_states[h]
            nh = -np.ones((S, A, U), dtype=np.int64)
            ph = np.zeros((S, A, U, d))
            mh = np.zeros((S, A, U), dtype=bool)
            for s in range(S):
                if len(reachable[h][s]) != A:
                    raise ValueError(f"stage {h} state {s}: expected {A} actions")
                for a in range(A):
                    ids = list(reachable[h][s][a])
                    if not ids:
                        raise ValueError(f"empty reachable set at {(h, s, a)}")
                    n = len(ids)
                    nh[s, a, :n] = ids
                    ph[s, a, :n] = np.asarray(features[h][s][a], dtype=float).reshape(n, d)
                    mh[s, a, :n] = True
            nxt.append(nh)
            phi.append(ph)
            mask.append(mh)
            rew.append(np.asarray(rewards[h], dtype=float).reshape(S, A))
        return cls(d=int(d), H=int(H), A=int(A), B=float(B), n_states=tuple(n_states),
                   next_states=tuple(nxt), phi=tuple(phi), mask=tuple(mask),
                   rewards=tuple(rew), theta_star=np.asarray(theta_star, dtype=float).reshape(H, d),
                   initial_state=int(initial_state))

    @property
    def U(self) -> int:
        return self._U

    def sizes(self, h: int) -> np.ndarray:
        return self.mask[h].sum(axis=-1)

    def reachable(self, h: int, s: int, a: int) -> np.ndarray:
        n = int(self.mask[h][s, a].sum())
        return self.next_states[h][s, a, :n]

    def features(self, h: int, s: int, a: int) -> np.ndarray:
        n = int(self.mask[h][s, a].sum())
        return self.phi[h][s, a, :n]

    def check_index(self, h: int, s: int, a: int) -> None:
        if not (0 <= h < self.H and 0 <= s < self.n_states[h] and 0 <= a < self.A):
            raise ValueError(f"invalid (h, s, a) = {(h, s, a)}")

    def violations(self, tol: float = 1e-12) -> list[str]:
        """Return a list of human-readable invariant violations (empty if valid)."""
        out = []
        if len(self.n_states) != self.H + 1:
            out.append("n_states must have H + 1 entries")
        if self.theta_star.shape != (self.H, self.d):
            out.append("theta_star must have shape (H, d)")
        if not 0 <= self.initial_state < self.n_states[0]:
            out.append("initial_state out of range")
        for h in range(self.H):
            S = self.n_states[h]
            m = self.mask[h]
            if self.phi[h].shape != (S, self.A, m.shape[-1], self.d):
                out.append(f"stage {h}: bad feature array shape")
                continue
            if np.any(m.sum(axis=-1) == 0):
                out.append(f"stage {h}: empty reachable set")
            if np.any(m[..., 1:] & ~m[..., :-1]):
                out.append(f"stage {h}: reachable entries not left-packed")
            nxt = self.next_states[h]
            if np.any(nxt[m] < 0) or np.any(nxt[m] >= self.n_states[h + 1]):
                out.append(f"stage {h}: next-state id out of range")
            for s in range(S):
                for a in range(self.A):
                    ids = nxt[s, a][m[s, a]]
                    if len(set(ids.tolist())) != len(ids):
                        out.append(f"stage {h}: duplicate next state at {(s, a)}")
            norms = np.linalg.norm(self.phi[h], axis=-1)
            if np.any(norms > 1 + tol):
                out.append(f"stage {h}: feature norm {norms.max():.6g} > 1")
            r = self.rewards[h]
            if r.shape != (S, self.A) or np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
                out.append(f"stage {h}: rewards must lie in [0, 1]")
            if np.linalg.norm(self.theta_star[h]) > self.B * (1 + tol) + tol:
                out.append(f"stage {h}: ||theta_star|| > B")
        return out

    def validate(self) -> "MnlMdp":
        bad = self.violations()
        if bad:
            raise ValueError("invalid MnlMdp: " + "; ".join(bad))
        return self

    def is_anchored(self, tol: float = 0.0) -> bool:
        return all(np.all(np.abs(self.phi[h][:, :, 0, :]) <= tol) for h in range(self.H))

    def with_theta_star(self, theta_star) -> "MnlMdp":
        return MnlMdp(d=self.d, H=self.H, A=self.A, B=self.B, n_states=self.n_states,
                      next_states=self.next_states, phi=self.phi, mask=self.mask,
                      rewards=self.rewards, theta_star=np.asarray(theta_star, dtype=float),
                      initial_state=self.initial_state)


# ---------------------------------------------------------------- transitions

def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; zeros elsewhere."""
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z - m), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def stage_probs(mdp: MnlMdp, h: int, theta) -> np.ndarray:
    """Transition probabilities for every ``(s, a)`` at stage ``h``, shape ``(S_h, A, U)``."""
    theta = np.asarray(theta, dtype=float)
    return masked_softmax(mdp.phi[h] @ theta, mdp.mask[h])


def transition_probs(mdp: MnlMdp, h: int, s: int, a: int, theta) -> np.ndarray:
    """``p(s' | s, a; theta)`` over the reachable list of ``(h, s, a)``, log-sum-exp stabilised."""
    mdp.check_index(h, s, a)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (mdp.d,) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be a finite vector of length d")
    z = mdp.features(h, s, a) @ theta
    e = np.exp(z - z.max())
    return e / e.sum()


def sample_next_state(dist: np.ndarray, rng_or_u: Union[np.random.Generator, float]) -> int:
    """Inverse-CDF draw of an index from ``dist`` using a single uniform."""
    u = rng_or_u.random() if isinstance(rng_or_u, np.random.Generator) else float(rng_or_u)
    idx = int(np.searchsorted(np.cumsum(dist), u, side="right"))
    return min(idx, len(dist) - 1)


# ---------------------------------------------------------------- trajectories

@dataclass(frozen=True)
class Step:
    h: int
    s: int
    a: int
    index: int  # position of the next state inside the reachable list
    s_next: int
    reward: float


@dataclass(frozen=True)
class Trajectory:
    steps: tuple

    def __len__(self) -> int:
        return len(self.steps)

    def y(self, h: int, size: int) -> np.ndarray:
        """One-hot outcome indicator over the reachable set visited at stage ``h``."""
        out = np.zeros(size)
        out[self.steps[h].index] = 1.0
        return out

    @property
    def total_reward(self) -> float:
        return float(sum(st.reward for st in self.steps))


PolicyLike = Union[Callable[[int, int], int], Sequence[np.ndarray]]


def _lookup(policy: PolicyLike, h: int, s: int) -> int:
    try:
        a = policy(h, s) if callable(policy) else policy[h][s]
    except (KeyError, IndexError) as exc:
        raise PolicyError(f"policy undefined at stage {h}, state {s}") from exc
    if a is None or int(a) < 0:
        raise PolicyError(f"policy undefined at stage {h}, state {s}")
    return int(a)


def rollout(mdp: MnlMdp, policy: PolicyLike, rng: Union[np.random.Generator, Sequence[float]],
            probs: Optional[Sequence[np.ndarray]] = None) -> Trajectory:
    """Sample one episode under the true parameters.

    ``rng`` is either a generator or a pre-drawn sequence of ``H`` uniforms
    (one per stage), which is how the harness shares noise across agents.
    ``probs`` optionally supplies ``stage_probs`` at ``theta_star`` for every
    stage, saving the per-step softmax.
    """
    s = mdp.initial_state
    steps = []
    for h in range(mdp.H):
        a = _lookup(policy, h, s)
        if not 0 <= a < mdp.A:
            raise PolicyError(f"action {a} out of range at stage {h}")
        if probs is None:
            p = transition_probs(mdp, h, s, a, mdp.theta_star[h])
        else:
            p = probs[h][s, a, :len(mdp.reachable(h, s, a))]
        u = rng if isinstance(rng, np.random.Generator) else rng[h]
        i = sample_next_state(p, u)
        s_next = int(mdp.next_states[h][s, a, i])
        steps.append(Step(h, s, a, i, s_next, float(mdp.rewards[h][s, a])))
        s = s_next
    return Trajectory(tuple(steps))


# ---------------------------------------------------------------- DP oracles

def backup(mdp: MnlMdp, h: int, probs: np.ndarray, v_next: np.ndarray) -> np.ndarray:
    """``sum_{s'} p(s') v_next(s')`` for every ``(s, a)`` at stage ``h``."""
    idx = np.where(mdp.mask[h], mdp.next_states[h], 0)
    return np.sum(probs * v_next[idx], axis=-1)


def exact_value_functions(mdp: MnlMdp):
    """Backward induction under ``theta_star``.

    Returns ``(Q, V)`` with ``Q[h]`` of shape ``(S_h, A)`` and ``V`` of length
    ``H + 1`` (``V[H]`` is identically zero).
    """
    V = [None] * (mdp.H + 1)
    Q = [None] * mdp.H
    V[mdp.H] = np.zeros(mdp.n_states[mdp.H])
    for h in reversed(range(mdp.H)):
        P = stage_probs(mdp, h, mdp.theta_star[h])
        Q[h] = mdp.rewards[h] + backup(mdp, h, P, V[h + 1])
        V[h] = Q[h].max(axis=1)
    return Q, V


def evaluate_policy(mdp: MnlMdp, policy: Sequence[np.ndarray]) -> list:
    """Exact value of a Markov policy under the true transitions.

    ``policy[h]`` is either an int array ``(S_h,)`` of actions or an
    ``(S_h, A)`` array of action probabilities.
    """
    V = [None] * (mdp.H + 1)
    V[mdp.H] = np.zeros(mdp.n_states[mdp.H])
    for h in reversed(range(mdp.H)):
        P = stage_probs(mdp, h, mdp.theta_star[h])
        q = mdp.rewards[h] + backup(mdp, h, P, V[h + 1])
        pi = np.asarray(policy[h])
        if pi.ndim == 1:
            V[h] = q[np.arange(mdp.n_states[h]), pi.astype(np.int64)]
        else:
            V[h] = np.sum(pi * q, axis=1)
    return V


def optimal_policy(mdp: MnlMdp) -> list:
    Q, _ = exact_value_functions(mdp)
    return [np.argmax(q, axis=1) for q in Q]


# ---------------------------------------------------------------- kappa

def _min_pair_product(mdp: MnlMdp, h: int, thetas: np.ndarray) -> np.ndarray:
    """Minimal pairwise product over all (s, a) and reachable pairs, per theta row."""
    z = np.einsum("saud,nd->nsau", mdp.phi[h], thetas)
    p = masked_softmax(z, mdp.mask[h][None])
    pmin = np.where(mdp.mask[h][None], p, np.inf).min(axis=-1)
    return (pmin ** 2).reshape(len(thetas), -1).min(axis=1)


def compute_kappa_star(mdp: MnlMdp) -> float:
    """``min_{h,s,a,s',s''} p^{s'}(theta*_h) p^{s''}(theta*_h)`` by enumeration."""
    return float(min(_min_pair_product(mdp, h, mdp.theta_star[h][None])[0] for h in range(mdp.H)))


def estimate_kappa(mdp: MnlMdp, n_samples: int, rng: np.random.Generator,
                   include_theta_star: bool = True) -> float:
    """Sampled upper estimate of ``kappa`` (an infimum over the B-ball).

    Evaluates the pairwise-product minimum on ``n_samples`` uniform points of
    the ball, the ``2d`` points ``+-B e_i`` and (by default) every ``theta*_h``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    d, B = mdp.d, mdp.B
    g = rng.standard_normal((n_samples, d))
    g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    pts = [g * (B * rng.random(n_samples) ** (1.0 / d))[:, None],
           B * np.eye(d), -B * np.eye(d)]
    if include_theta_star:
        pts.append(mdp.theta_star)
    thetas = np.vstack(pts)
    return float(min(_min_pair_product(mdp, h, thetas).min() for h in range(mdp.H)))


def kappa_bounds(U: int, B: float) -> tuple:
    """Range ``[1/(U e^{2B})^2, 1/U^2]`` that always contains kappa and kappa*."""
    return 1.0 / (U * np.exp(2 * B)) ** 2, 1.0 / U ** 2


# ---------------------------------------------------------------- recentering

def recenter_features(mdp: MnlMdp) -> MnlMdp:
    """Subtract the first reachable state's feature in every set (anchor gets ``phi = 0``).

    If this pushes a norm above one, all features are divided by the largest
    norm and ``B`` and ``theta_star`` are multiplied by it, which leaves every
    transition probability unchanged.
    """
    phi = [np.where(m[..., None], p - p[:, :, :1, :], 0.0) for p, m in zip(mdp.phi, mdp.mask)]
    c = max(float(np.linalg.norm(p, axis=-1).max()) for p in phi)
    B, theta = mdp.B, np.array(mdp.theta_star)
    if c > 1.0:
        phi = [p / c for p in phi]
        B, theta = B * c, theta * c
    return MnlMdp(d=mdp.d, H=mdp.H, A=mdp.A, B=B, n_states=mdp.n_states,
                  next_states=mdp.next_states, phi=tuple(phi), mask=mdp.mask,
                  rewards=mdp.rewards, theta_star=theta, initial_state=mdp.initial_state)


# ---------------------------------------------------------------- serialization

def to_dict(mdp: MnlMdp) -> dict:
    """Instance document.

    ``features`` is flat, row-major over ``(h, s, a, s', dim)`` with ``s'``
    running over the reachable list only.  Floats are written with Python's
    shortest round-trip repr, so load/save is lossless.
    """
    reachable, feats, rewards = [], [], []
    for h in range(mdp.H):
        reachable.append([[mdp.reachable(h, s, a).tolist() for a in range(mdp.A)]
                          for s in range(mdp.n_states[h])])
        for s in range(mdp.n_states[h]):
            for a in range(mdp.A):
                feats.extend(float(x) for x in mdp.features(h, s, a).ravel())
        rewards.append(mdp.rewards[h].tolist())
    return {
        "format": FORMAT_TAG,
        "d": mdp.d,
        "H": mdp.H,
        "A": mdp.A,
        "B": float(mdp.B),
        "n_states": list(mdp.n_states),
        "initial_state": mdp.initial_state,
        "reachable": reachable,
        "features": feats,
        "theta_star": mdp.theta_star.tolist(),
        "rewards": rewards,
    }


def from_dict(doc: dict) -> MnlMdp:
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported instance format {doc.get('format')!r}")
    d, H = int(doc["d"]), int(doc["H"])
    flat = np.asarray(doc["features"], dtype=float)
    pos = 0
    features = []
    for h in range(H):
        fh = []
        for s_row in doc["reachable"][h]:
            fs = []
            for ids in s_row:
                n = len(ids) * d
                fs.append(flat[pos:pos + n].reshape(len(ids), d))
                pos += n
            fh.append(fs)
        features.append(fh)
    if pos != len(flat):
        raise ValueError("feature array length does not match reachable lists")
    return MnlMdp.from_lists(d, H, doc["B"], doc["n_states"], doc["reachable"], features,
                             doc["theta_star"], doc["rewards"], doc.get("initial_state", 0))


def dumps(mdp: MnlMdp) -> str:
    return json.dumps(to_dict(mdp), sort_keys=True, separators=(",", ":"))


def save_instance(mdp: MnlMdp, path) -> None:
    Path(path).write_text(dumps(mdp) + "\n")


def load_instance(path) -> MnlMdp:
    return from_dict(json.loads(Path(path).read_text()))


def instance_digest(mdp: MnlMdp) -> str:
    """SHA-256 of the canonical serialized instance."""
    return hashlib.sha256(dumps(mdp).encode()).hexdigest()
