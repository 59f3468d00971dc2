"""Episode-level agents: covariance-bonus baseline, likelihood-set (LL) and online (OL) variants.

Every agent exposes the same loop: ``plan(k)`` builds the greedy policy
for episode ``k`` from data of episodes ``< k``; ``update(traj)`` folds in
the new trajectory.  ``run_episode`` drives one episode and returns the
cost counters the harness records.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import MnlMdp, Trajectory, backup, estimate_kappa, optimal_policy, rollout, stage_probs
from .mle import (ConfidenceEllipsoid, ConvergenceError, MleState, ellipsoid_baseline,
                  ellipsoid_ll, radius_baseline, radius_bernstein,
                  regularizer_ll)
from .omd import OmdState, omd_step, omd_step_ops, radius_omd, theory_eta, theory_lambda
from .planner import (OptimisticValues, backward_induction_baseline, backward_induction_bonus,
                      backward_induction_maxset, maxset_stage_ops, planner_stage_ops)

AGENT_NAMES = ("baseline", "ll", "ol", "optimal", "uniform")
PRESETS = ("theory", "practical")
PRACTICAL_RADIUS_SCALE = 0.1
KAPPA_SAMPLES = 1000


class EpisodeError(RuntimeError):
    """An estimator failure inside episode ``k``."""

    def __init__(self, k: int, cause: Exception):
        super().__init__(f"episode {k}: {cause}")
        self.k = k
        self.cause = cause


@dataclass(frozen=True)
class AgentKind:
    """Algorithm selection plus hyper-parameter overrides.

    ``radius_scale``, ``eta`` and ``lam`` default to the preset's values when
    left as ``None``.  ``history`` picks how LL/baseline store data
    (``"samples"`` keeps every row, ``"counts"`` keeps per-pair counts).
    """

    name: str
    radius_scale: Optional[float] = None
    eta: Optional[float] = None
    lam: Optional[float] = None
    delta: float = 0.05
    preset: str = "theory"
    history: str = "samples"

    def __post_init__(self):
        if self.name not in AGENT_NAMES:
            raise ValueError(f"unknown agent {self.name!r}; choose from {AGENT_NAMES}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.history not in ("samples", "counts"):
            raise ValueError(f"unknown history {self.history!r}")
        for key in ("radius_scale", "eta", "lam"):
            v = getattr(self, key)
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{key} must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")

    @property
    def scale(self) -> float:
        if self.radius_scale is not None:
            return self.radius_scale
        return PRACTICAL_RADIUS_SCALE if self.preset == "practical" else 1.0

    def omd_params(self, mdp: MnlMdp) -> tuple:
        if self.preset == "practical":
            eta, lam = 1.0, 1.0
        else:
            eta = theory_eta(mdp.U, mdp.B)
            lam = theory_lambda(eta, mdp.B, mdp.d)
        eta = self.eta if self.eta is not None else eta
        lam = self.lam if self.lam is not None else lam
        return eta, lam

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_any(cls, spec, **defaults) -> "AgentKind":
        if isinstance(spec, AgentKind):
            return spec
        if isinstance(spec, str):
            return cls(name=spec, **defaults)
        merged = {**defaults, **spec}
        return cls(**merged)


@dataclass
class EpisodeMetrics:
    k: int
    realized_return: float
    theta_err: np.ndarray
    stored_samples: int
    stored_floats: int
    op_count: int
    wall_ns: int = 0


# ---------------------------------------------------------------- agents

class Agent:
    kind: AgentKind
    values: Optional[OptimisticValues] = None

    def __init__(self, mdp: MnlMdp, kind: AgentKind):
        self.mdp = mdp
        self.kind = kind
        self.k = 1
        self.last_ops = 0

    def plan(self, k: int) -> list:
        raise NotImplementedError

    def update(self, traj: Trajectory) -> None:
        self.k += 1

    def act(self, h: int, s: int, policy) -> int:
        return int(policy[h][s])

    def estimates(self) -> np.ndarray:
        return np.zeros((self.mdp.H, self.mdp.d))

    def confidence_sets(self):
        return None

    @property
    def stored_samples(self) -> int:
        return 0

    @property
    def stored_floats(self) -> int:
        return 0


class OptimalAgent(Agent):
    """Acts with the true optimal policy (zero-regret reference)."""

    def __init__(self, mdp, kind):
        super().__init__(mdp, kind)
        self._pi = optimal_policy(mdp)

    def plan(self, k):
        self.last_ops = 0
        return self._pi

    def estimates(self):
        return np.array(self.mdp.theta_star)


class UniformAgent(Agent):
    """Draws actions uniformly at random; its evaluated policy is the uniform mixture."""

    def __init__(self, mdp, kind, rng: Optional[np.random.Generator] = None):
        super().__init__(mdp, kind)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._pi = [np.full((n, mdp.A), 1.0 / mdp.A) for n in mdp.n_states[:-1]]

    def plan(self, k):
        self.last_ops = 0
        return self._pi

    def act(self, h, s, policy):
        return int(self.rng.integers(self.mdp.A))


class _MleAgent(Agent):
    def __init__(self, mdp, kind):
        super().__init__(mdp, kind)
        self.mle = MleState(mdp, history=kind.history)
        self.ellipsoids = None

    def _lam(self, k):
        if self.kind.lam is not None:
            return self.kind.lam
        return regularizer_ll(k, self.mdp.H, self.mdp.d, self.kind.delta)

    def _refit(self, k) -> tuple:
        lam = self._lam(k)
        ops = 0
        for h in range(self.mdp.H):
            try:
                ops += self.mle.refit(h, lam)
            except ConvergenceError as exc:
                raise EpisodeError(k, exc) from exc
        return lam, ops

    def update(self, traj):
        for st in traj.steps:
            self.mle.add(self.mdp, st.h, st.s, st.a, st.index)
        super().update(traj)

    def estimates(self):
        return self.mle.theta.copy()

    def confidence_sets(self):
        return self.ellipsoids

    @property
    def stored_samples(self):
        return self.mle.stored_samples

    @property
    def stored_floats(self):
        return self.mle.stored_floats

    def _design_ops(self, h):
        hist = self.mle.histories[h]
        return hist.n_rows * self.mdp.U * self.mdp.d ** 2 + self.mdp.d ** 3


class LLAgent(_MleAgent):
    """MLE refit each episode; plans by maximising over the Hessian-shaped confidence ellipsoid."""

    def plan(self, k):
        mdp = self.mdp
        lam, ops = self._refit(k)
        beta = self.kind.scale * radius_bernstein(k, mdp.H, mdp.d, self.kind.delta, mdp.B)
        self.ellipsoids = [ellipsoid_ll(self.mle.theta[h], self.mle.samples(h), lam, beta)
                           for h in range(mdp.H)]
        self.values = backward_induction_maxset(mdp, self.ellipsoids)
        ops += sum(self._design_ops(h) + maxset_stage_ops(mdp, h) for h in range(mdp.H))
        self.last_ops = ops
        return self.values.policy()


class BaselineAgent(_MleAgent):
    """MLE refit each episode; closed-form covariance bonus scaled by ``1/kappa``."""

    def __init__(self, mdp, kind, kappa: Optional[float] = None):
        super().__init__(mdp, kind)
        if kappa is None:
            kappa = estimate_kappa(mdp, KAPPA_SAMPLES, np.random.default_rng(0),
                                   include_theta_star=False)
        self.kappa = float(kappa)

    def plan(self, k):
        mdp = self.mdp
        lam, ops = self._refit(k)
        beta = self.kind.scale * radius_baseline(k, mdp.H, mdp.d, min(self.kind.delta, 1 - 1e-12),
                                                 self.kappa)
        self.ellipsoids = [ellipsoid_baseline(self.mle.theta[h], self.mle.samples(h), lam,
                                              self.kappa, beta) for h in range(mdp.H)]
        self.values = backward_induction_baseline(
            mdp, self.mle.theta, [e.shape for e in self.ellipsoids], [beta] * mdp.H)
        ops += sum(self._design_ops(h) + planner_stage_ops(mdp, h) for h in range(mdp.H))
        self.last_ops = ops
        return self.values.policy()


class OLAgent(Agent):
    """One mirror-descent step per stage and episode; plans with the closed-form bonus."""

    def __init__(self, mdp, kind):
        super().__init__(mdp, kind)
        self.eta, self.lam = kind.omd_params(mdp)
        self.states = [OmdState.initial(mdp.d, self.eta, self.lam, mdp.B) for _ in range(mdp.H)]
        self.beta = None
        self.planned = None  # the per-stage states the latest plan used
        self._step_ops = omd_step_ops(mdp.U, mdp.d)

    def radius(self, k: int) -> float:
        m = self.mdp
        return self.kind.scale * radius_omd(k, m.H, m.d, self.kind.delta, m.B, m.U,
                                            self.eta, self.lam)

    def plan(self, k):
        mdp = self.mdp
        self.beta = self.radius(k)
        self.planned = list(self.states)
        thetas = [st.theta for st in self.states]
        H_cums = [st.H_cum for st in self.states]
        self.values = backward_induction_bonus(mdp, thetas, H_cums, [self.beta] * mdp.H)
        self.last_ops = sum(planner_stage_ops(mdp, h) for h in range(mdp.H)) + mdp.H * self._step_ops
        return self.values.policy()

    def update(self, traj):
        for st in traj.steps:
            self.states[st.h] = omd_step(self.states[st.h], self.mdp.features(st.h, st.s, st.a),
                                         st.index)
        super().update(traj)

    def estimates(self):
        return np.array([st.theta for st in self.states])

    def confidence_sets(self):
        """The sets the latest plan was optimistic over."""
        if self.planned is None:
            return None
        return [ConfidenceEllipsoid(st.theta, st.H_cum, self.beta) for st in self.planned]

    @property
    def stored_floats(self):
        return sum(st.stored_floats for st in self.states)


def make_agent(mdp: MnlMdp, kind, rng: Optional[np.random.Generator] = None,
               kappa: Optional[float] = None) -> Agent:
    kind = AgentKind.from_any(kind)
    if kind.name == "ll":
        return LLAgent(mdp, kind)
    if kind.name == "ol":
        return OLAgent(mdp, kind)
    if kind.name == "baseline":
        return BaselineAgent(mdp, kind, kappa)
    if kind.name == "optimal":
        return OptimalAgent(mdp, kind)
    return UniformAgent(mdp, kind, rng)


# ---------------------------------------------------------------- episode loop

def run_episode(agent: Agent, mdp: MnlMdp, k: int, rng, timing: bool = True, probs=None):
    """Plan, act greedily for ``H`` steps, then update the estimator.

    ``rng`` is a generator or ``H`` pre-drawn uniforms.  Returns
    ``(trajectory, metrics, policy)`` where ``policy`` is the one acted on.
    ``probs`` is an optional cache of the true stage probabilities.
    """
    t0 = time.perf_counter_ns() if timing else 0
    stored = agent.stored_samples
    policy = agent.plan(k)
    traj = rollout(mdp, lambda h, s: agent.act(h, s, policy), rng, probs)
    agent.update(traj)
    err = np.linalg.norm(agent.estimates() - mdp.theta_star, axis=1)
    wall = time.perf_counter_ns() - t0 if timing else 0
    metrics = EpisodeMetrics(k, traj.total_reward, err, stored, agent.stored_floats,
                             int(agent.last_ops), int(wall))
    return traj, metrics, policy


class RegretMeter:
    """Expected per-episode regret ``V*_1(s_1) - V^pi_1(s_1)`` by exact policy evaluation."""

    def __init__(self, mdp: MnlMdp):
        self.mdp = mdp
        self.probs = [stage_probs(mdp, h, mdp.theta_star[h]) for h in range(mdp.H)]
        V = np.zeros(mdp.n_states[mdp.H])
        self._Q = [None] * mdp.H
        for h in reversed(range(mdp.H)):
            q = mdp.rewards[h] + backup(mdp, h, self.probs[h], V)
            self._Q[h], V = q, q.max(axis=1)
        self.v_star = float(V[mdp.initial_state])
        self._cache = {}

    def policy_value(self, policy) -> float:
        key = b"".join(np.asarray(pi).dtype.str.encode() + np.ascontiguousarray(pi).tobytes()
                       for pi in policy)
        if key not in self._cache:
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = self._evaluate(policy)
        return self._cache[key]

    def _evaluate(self, policy) -> float:
        mdp = self.mdp
        V = np.zeros(mdp.n_states[mdp.H])
        for h in reversed(range(mdp.H)):
            q = mdp.rewards[h] + backup(mdp, h, self.probs[h], V)
            pi = np.asarray(policy[h])
            V = q[np.arange(len(q)), pi.astype(np.int64)] if pi.ndim == 1 else np.sum(pi * q, axis=1)
        return float(V[mdp.initial_state])

    def increment(self, policy) -> float:
        return max(self.v_star - self.policy_value(policy), 0.0)


def regret_accounting(mdp: MnlMdp, trajectories: Sequence[Trajectory], policies: Sequence) -> np.ndarray:
    """Cumulative expected regret of the policies acted on in each episode."""
    meter = RegretMeter(mdp)
    inc = np.array([meter.increment(pi) for pi in policies])
    return np.cumsum(inc)
