import numpy as np
import pytest
from scipy.special import softmax

from mnlrl.core import MnlMdp, exact_value_functions, stage_probs
from mnlrl.envs import random_instance
from mnlrl.mle import (ConfidenceEllipsoid, Samples, covariance_matrix, data_hessian, fit_mle,
                       radius_baseline, radius_bernstein, regularizer_ll)
from mnlrl.planner import (OptimisticValues, backward_induction_baseline, backward_induction_bonus,
                           backward_induction_maxset, bonus_terms, greedy_action,
                           maxset_stage_values, stage_baseline_bonus, stage_bonus_terms)
from mnlrl.core import compute_kappa_star

from oracles import grid_inner_max, random_pd, unit_ball_rows


def eye_stack(mdp, lam=1.0):
    return [lam * np.eye(mdp.d) for _ in range(mdp.H)]


def test_bonus_examples(rng):
    same = np.tile([0.2, 0.1, -0.3], (3, 1))
    assert bonus_terms(same, rng.standard_normal(3), random_pd(rng, 3), 2.0, 4)[0] == pytest.approx(0, abs=1e-12)
    f = unit_ball_rows(rng, 4, 3)
    assert bonus_terms(f, np.zeros(3), np.eye(3), 0.0, 4) == (0.0, 0.0)
    lam, beta, H = 3.0, 1.7, 5
    snd = bonus_terms(f, rng.standard_normal(3), lam * np.eye(3), beta, H)[1]
    assert snd == pytest.approx(2.5 * H * beta ** 2 * np.max(np.sum(f ** 2, axis=1)) / lam, rel=1e-12)


def test_stage_bonus_matches_per_pair(small_mdp, rng):
    theta = rng.uniform(-0.5, 0.5, 3)
    Hc = random_pd(rng, 3)
    fst, snd = stage_bonus_terms(small_mdp, 1, theta, Hc, 0.8)
    for s in range(4):
        for a in range(3):
            e1, e2 = bonus_terms(small_mdp.features(1, s, a), theta, Hc, 0.8, small_mdp.H)
            assert fst[s, a] == pytest.approx(e1, rel=1e-12, abs=1e-15)
            assert snd[s, a] == pytest.approx(e2, rel=1e-12)


def test_value_difference_bound():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        d, U, H = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 6))
        f = unit_ball_rows(rng, U, d)
        Lam = random_pd(rng, d, floor=1.0)
        beta = float(rng.uniform(0.01, 3))
        th1 = rng.uniform(-1, 1, d)
        u = rng.standard_normal(d)
        u *= rng.random() * beta / np.sqrt(u @ Lam @ u)
        th2 = th1 + u
        V = rng.uniform(0, H, U)
        gap = abs(softmax(f @ th1) @ V - softmax(f @ th2) @ V)
        e1, e2 = bonus_terms(f, th1, Lam, beta, H)
        assert gap < e1 + e2 or gap == e1 + e2 == 0.0


def test_bonus_planner_reduces_to_exact(small_mdp):
    m = small_mdp
    vals = backward_induction_bonus(m, m.theta_star, eye_stack(m), [0.0] * m.H)
    Qs, Vs = exact_value_functions(m)
    for h in range(m.H):
        assert np.abs(vals.Q[h] - Qs[h]).max() <= 1e-10
    zero = MnlMdp(d=m.d, H=m.H, A=m.A, B=m.B, n_states=m.n_states, next_states=m.next_states,
                  phi=m.phi, mask=m.mask, rewards=tuple(np.zeros_like(r) for r in m.rewards),
                  theta_star=m.theta_star)
    vz = backward_induction_bonus(zero, zero.theta_star, eye_stack(m), [0.0] * m.H)
    assert all(np.all(q == 0) for q in vz.Q)
    huge = backward_induction_bonus(m, np.zeros((m.H, m.d)), eye_stack(m), [1e6] * m.H)
    assert all(np.all(q == m.H) for q in huge.Q)
    assert np.all(huge.V[m.H] == 0)


def test_clipping_and_monotone_bonus(rng):
    m = random_instance(d=3, H=3, states_per_stage=4, A=3, U=3, B=1.0, seed=4)
    thetas = rng.uniform(-0.5, 0.5, (3, 3))
    Hs = [random_pd(rng, 3) for _ in range(3)]
    prev = None
    for beta in (0.0, 0.05, 0.2, 1.0, 5.0):
        vals = backward_induction_bonus(m, thetas, Hs, [beta] * 3)
        for h in range(3):
            assert vals.Q[h].min() >= 0 and vals.Q[h].max() <= 3
            assert np.array_equal(vals.V[h], vals.Q[h].max(axis=1))
        if prev is not None:
            assert all(np.all(a >= b - 1e-12) for a, b in zip(vals.Q_raw, prev.Q_raw))
        prev = vals


def test_baseline_planner(small_mdp, rng):
    m = small_mdp
    A = [random_pd(rng, m.d) for _ in range(m.H)]
    exact = backward_induction_baseline(m, m.theta_star, A, [0.0] * m.H)
    Qs, _ = exact_value_functions(m)
    assert all(np.abs(a - b).max() <= 1e-10 for a, b in zip(exact.Q, Qs))
    for h in range(m.H):
        assert stage_baseline_bonus(m, h, A[h], 0.7).min() >= 0


def bonus_pair(m, h, k, seed, delta=0.05):
    """Baseline bonus and the LL first/second-order bonuses from the same k samples."""
    rng = np.random.default_rng(seed)
    kappa = compute_kappa_star(m)
    lam = regularizer_ll(k, m.H, m.d, delta)
    S, A, U = m.phi[h].shape[:3]
    P = stage_probs(m, h, m.theta_star[h])
    counts = np.zeros((S, A, U))
    for _ in range(k):
        s, a = int(rng.integers(S)), int(rng.integers(A))
        counts[s, a, rng.choice(U, p=P[s, a])] += 1
    data = Samples(m.phi[h].reshape(S * A, U, -1), m.mask[h].reshape(S * A, U),
                   counts.reshape(S * A, U))
    th = fit_mle(data, lam)
    A_mat = lam / kappa * np.eye(m.d) + covariance_matrix(data)
    base = stage_baseline_bonus(m, h, A_mat, radius_baseline(k, m.H, m.d, delta, kappa))
    fst, snd = stage_bonus_terms(m, h, th, data_hessian(th, data) + lam * np.eye(m.d),
                                 radius_bernstein(k, m.H, m.d, delta, m.B))
    return base, fst, snd


@pytest.mark.parametrize("seed", range(3))
def test_baseline_bonus_dominates_bernstein(seed):
    m = random_instance(d=3, H=2, states_per_stage=5, A=3, U=5, B=1.5, seed=seed)
    assert compute_kappa_star(m) <= 0.05
    base, fst, snd = bonus_pair(m, 0, 1000, seed)
    # at k = 1000 the second-order term still rivals the baseline bonus: record, assert first order
    print(f"k=1000 min ratio baseline/(fst+snd) = {(base / (fst + snd)).min():.3f}")
    assert np.all(base > 5 * fst)
    for k in (3000, 10_000):
        base, fst, snd = bonus_pair(m, 0, k, seed)
        assert (base - fst - snd).min() > 0


def test_greedy_tie_break():
    vals = OptimisticValues([np.array([[0.5, 0.5, 0.5], [0.1, 0.9, 0.9], [0.2, 0.1, 0.0]]),
                             np.array([[0.3]])], [], [])
    assert greedy_action(vals, 0, 0) == 0
    assert greedy_action(vals, 0, 1) == 1
    assert greedy_action(vals, 0, 2) == 0
    assert greedy_action(vals, 1, 0) == 0


def d1_instance(seed):
    return random_instance(d=1, H=2, states_per_stage=3, A=2, U=2, B=1.0, seed=seed)


def test_maxset_radius_zero_is_plain(small_mdp, rng):
    m = small_mdp
    ells = [ConfidenceEllipsoid(rng.uniform(-0.4, 0.4, 3), random_pd(rng, 3), 0.0) for _ in range(m.H)]
    vals = backward_induction_maxset(m, ells)
    plain = backward_induction_bonus(m, [e.center for e in ells], eye_stack(m), [0.0] * m.H)
    assert all(np.abs(a - b).max() <= 1e-12 for a, b in zip(vals.Q, plain.Q))


@pytest.mark.parametrize("seed", range(6))
def test_maxset_matches_grid_at_d1(seed):
    rng = np.random.default_rng(seed)
    m = d1_instance(seed)
    center = rng.uniform(-0.8, 0.8, 1)
    shape = np.array([[float(rng.uniform(0.5, 20))]])
    ell = ConfidenceEllipsoid(center, shape, float(rng.uniform(0.1, 3)))
    v = rng.uniform(0, 2, 3)
    got = maxset_stage_values(m, 0, ell, v, m.B)
    for s in range(3):
        for a in range(2):
            ref = grid_inner_max(m.features(0, s, a), float(center[0]), shape[0, 0], ell.radius,
                                 m.B, v[m.reachable(0, s, a)])
            assert abs(got[s, a] - ref) <= 1e-3
            assert got[s, a] <= ref + 1e-6  # ascent only visits feasible points


def test_maxset_optimistic_against_plain(rng):
    m = random_instance(d=3, H=3, states_per_stage=4, A=3, U=3, B=1.0, seed=8)
    ells = [ConfidenceEllipsoid(m.theta_star[h] * 0.5, random_pd(rng, 3), 1.0) for h in range(m.H)]
    vals = backward_induction_maxset(m, ells)
    plain = backward_induction_bonus(m, [e.center for e in ells], eye_stack(m), [0.0] * m.H)
    for h in range(m.H):
        assert np.all(vals.Q[h] >= plain.Q[h] - 1e-12)
        assert np.all(vals.bonus[h]["gain"] >= -1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_maxset_left_optimism_at_d1(seed):
    """With theta* inside every ellipsoid, Q* <= Q_hat; the grid oracle bounds the ascent's shortfall."""
    rng = np.random.default_rng(seed)
    m = d1_instance(seed)
    ells = []
    for h in range(m.H):
        shape = np.array([[float(rng.uniform(1, 10))]])
        c = np.clip(m.theta_star[h] + rng.normal(0, 0.2, 1), -m.B, m.B)
        r = float(np.sqrt(shape[0, 0]) * abs(c - m.theta_star[h])[0]) + 0.05
        ells.append(ConfidenceEllipsoid(c, shape, r))
        assert ells[-1].contains(m.theta_star[h])
    vals = backward_induction_maxset(m, ells)
    Qs, _ = exact_value_functions(m)
    for h in range(m.H):
        grid = np.array([[grid_inner_max(m.features(h, s, a), float(ells[h].center[0]),
                                         ells[h].shape[0, 0], ells[h].radius, m.B,
                                         vals.V[h + 1][m.reachable(h, s, a)])
                          for a in range(m.A)] for s in range(3)])
        q_grid = np.clip(m.rewards[h] + grid, 0, m.H)
        assert np.all(Qs[h] <= q_grid + 1e-8)
        assert np.all(Qs[h] <= vals.Q[h] + 1e-3)


def test_batched_and_scalar_kernels_agree(rng):
    m = random_instance(d=4, H=2, states_per_stage=5, A=3, U=4, B=1.0, seed=3)
    for radius in (0.05, 0.5, 3.0):
        ell = ConfidenceEllipsoid(rng.uniform(-0.3, 0.3, 4), random_pd(rng, 4, floor=2.0), radius)
        v = rng.uniform(0, 2, 5)
        a = maxset_stage_values(m, 0, ell, v, m.B, batched=True)
        b = maxset_stage_values(m, 0, ell, v, m.B, batched=False)
        assert np.abs(a - b).max() <= 1e-12


def test_maxset_outside_center_stays_feasible(rng):
    m = random_instance(d=2, H=1, states_per_stage=3, A=2, U=3, B=0.5, seed=1)
    ell = ConfidenceEllipsoid(np.array([0.6, 0.0]), np.eye(2), 0.4)
    v = np.array([0.0, 1.0, 0.5])
    got = maxset_stage_values(m, 0, ell, v, m.B)
    # brute force over a feasible grid of the lens-shaped intersection
    xs = np.linspace(-1, 1, 401)
    pts = np.array([[x, y] for x in xs for y in xs])
    ok = (np.linalg.norm(pts, axis=1) <= 0.5) & (np.linalg.norm(pts - ell.center, axis=1) <= 0.4)
    pts = pts[ok]
    for s in range(3):
        for a in range(2):
            f = m.features(0, s, a)
            best = (softmax(pts @ f.T, axis=1) @ v[m.reachable(0, s, a)]).max()
            assert got[s, a] <= best + 2e-3
