import numpy as np
import pytest
from scipy.stats import binomtest

from mnlrl.agents import (AgentKind, EpisodeError, RegretMeter, make_agent, regret_accounting,
                          run_episode)
from mnlrl.core import MnlMdp, optimal_policy, rollout
from mnlrl.envs import hard_instance, random_instance

from oracles import forward_policy_value


def flat_instance():
    """All-zero rewards and identical features: every action looks the same."""
    H, S, A = 3, 3, 3
    reach = [[[[0, 1, 2]] * A for _ in range(S)] for _ in range(H)]
    f = np.array([[0.0, 0.0], [0.3, 0.1], [-0.2, 0.4]])
    feats = [[[f] * A for _ in range(S)] for _ in range(H)]
    rewards = [np.zeros((S, A)) for _ in range(H)]
    return MnlMdp.from_lists(2, H, 1.0, [S] * (H + 1), reach, feats, np.full((H, 2), 0.2), rewards)


@pytest.mark.parametrize("name", ["baseline", "ll", "ol"])
def test_first_episode_picks_action_zero(name):
    m = flat_instance()
    agent = make_agent(m, name)
    traj, metrics, policy = run_episode(agent, m, 1, np.random.default_rng(0))
    assert all(np.all(pi == 0) for pi in policy)
    assert all(st.a == 0 for st in traj.steps)
    assert metrics.k == 1 and metrics.stored_samples == 0


def test_kind_validation():
    with pytest.raises(ValueError):
        AgentKind("nope")
    with pytest.raises(ValueError):
        AgentKind("ol", eta=-1.0)
    with pytest.raises(ValueError):
        AgentKind("ll", preset="fast")
    assert AgentKind("ll", preset="practical").scale == 0.1
    assert AgentKind("ll", preset="practical", radius_scale=2.0).scale == 2.0
    assert AgentKind("ol", preset="practical").omd_params(flat_instance()) == (1.0, 1.0)


def test_storage_counters(small_mdp):
    m = small_mdp
    rng = np.random.default_rng(1)
    ll, ol = make_agent(m, "ll"), make_agent(m, "ol")
    ol_counts = {}
    for k in range(1, 10_001):
        if k <= 60:
            _, mt, _ = run_episode(ll, m, k, rng, timing=False)
            assert mt.stored_samples == (k - 1) * m.H
        _, mo, _ = run_episode(ol, m, k, rng, timing=False)
        if k in (1, 100, 10_000):
            ol_counts[k] = (mo.stored_floats, mo.stored_samples, mo.op_count)
    assert ol_counts[100] == ol_counts[10_000] == ol_counts[1]


def test_episode_error_carries_index(small_mdp):
    m = small_mdp
    agent = make_agent(m, "ll")
    rng = np.random.default_rng(0)
    run_episode(agent, m, 1, rng)
    run_episode(agent, m, 2, rng)
    agent.mle.max_iter = 0
    agent.mle.theta[:] = 30.0
    with pytest.raises(EpisodeError) as info:
        run_episode(agent, m, 3, rng)
    assert info.value.k == 3


def test_determinism(small_mdp):
    def run(seed):
        agent = make_agent(small_mdp, "ll")
        rng = np.random.default_rng(seed)
        out = []
        for k in range(1, 30):
            traj, mt, _ = run_episode(agent, small_mdp, k, rng, timing=False)
            out.append((traj, mt.theta_err.tobytes(), mt.op_count, mt.stored_samples))
        return out
    assert run(4) == run(4)
    assert run(4) != run(5)


def test_regret_of_optimal_is_zero(small_mdp):
    pi = optimal_policy(small_mdp)
    reg = regret_accounting(small_mdp, [], [pi] * 20)
    assert np.all(reg == 0)


def test_regret_nondecreasing_and_matches_forward_oracle(small_mdp):
    rng = np.random.default_rng(3)
    meter = RegretMeter(small_mdp)
    pols = [[rng.integers(0, small_mdp.A, n) for n in small_mdp.n_states[:-1]] for _ in range(40)]
    reg = regret_accounting(small_mdp, [], pols)
    assert np.all(np.diff(reg) >= 0)
    for pi in pols[:5]:
        assert meter.policy_value(pi) == pytest.approx(forward_policy_value(small_mdp, pi), abs=1e-12)


def test_uniform_regret_on_one_block():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-0.6, 0.8]])
    theta = np.array([[1.2, -0.5]])
    m = hard_instance(d=2, H=2, A=3, theta_stars=theta, arm_features=X)
    rho = 1 / (1 + np.exp(-X @ theta[0]))
    agent = make_agent(m, "uniform", rng=np.random.default_rng(0))
    uniform = agent.plan(1)
    inc = np.diff(regret_accounting(m, [], [uniform] * 5), prepend=0.0)
    assert np.allclose(inc, rho.max() - rho.mean(), atol=1e-14)


SATURATED = pytest.mark.xfail(strict=True, reason=(
    "practical-preset OL bonus still exceeds H at k = 5000, so every Q clips to H and the greedy "
    "policy is the all-zeros tie-break, which loses to uniform play on this instance"))


@pytest.mark.parametrize("name", ["ll", "baseline", pytest.param("ol", marks=SATURATED)])
def test_greedy_beats_uniform_after_learning(name):
    """Sign test over 20 seeds: final greedy policy against uniform play, realized returns."""
    m = random_instance(d=2, H=2, states_per_stage=3, A=3, U=2, B=1.0, seed=11)
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        agent = make_agent(m, AgentKind(name, preset="practical", history="counts"))
        for k in range(1, 5001):
            run_episode(agent, m, k, rng, timing=False)
        greedy = agent.plan(5001)
        eval_rng = np.random.default_rng(1000 + seed)
        g = np.mean([rollout(m, greedy, eval_rng).total_reward for _ in range(400)])
        u = np.mean([rollout(m, lambda h, s: int(eval_rng.integers(m.A)), eval_rng).total_reward
                     for _ in range(400)])
        wins += g > u
    assert binomtest(wins, 20, alternative="greater").pvalue < 0.05


def test_cost_slopes(small_mdp):
    rng = np.random.default_rng(0)
    ks = np.arange(1, 201)
    ops = {"ll": [], "ol": [], "baseline": []}
    for name in ops:
        agent = make_agent(small_mdp, name)
        for k in ks:
            ops[name].append(run_episode(agent, small_mdp, int(k), rng, timing=False)[1].op_count)
    assert len(set(ops["ol"])) == 1
    assert np.polyfit(ks, ops["ll"], 1)[0] > 0
    assert np.polyfit(ks, ops["baseline"], 1)[0] > 0
