import math

import numpy as np
import pytest
from scipy.special import softmax

from mnlrl.envs import random_instance
from mnlrl.mle import (ConfidenceEllipsoid, ConvergenceError, CountHistory, MleState, SampleHistory,
                       Samples, covariance_matrix, data_hessian, ellipsoid_baseline, ellipsoid_ll,
                       fit_mle, mle_loss, mle_loss_grad_hess, radius_baseline, radius_bernstein,
                       regularizer_ll)

from oracles import (central_grad, central_jacobian, generic_mle, min_pair_product, nll, nll_grad,
                     rel_err, unit_ball_rows)


def draw_pairs(rng, n, U, d, theta, anchored=True, sphere=False):
    pairs = []
    for _ in range(n):
        f = unit_ball_rows(rng, U, d)
        if sphere:
            f /= np.linalg.norm(f, axis=1, keepdims=True)
        if anchored:
            f[0] = 0.0
        y = int(rng.choice(U, p=softmax(f @ theta)))
        pairs.append((f, y))
    return pairs


def test_no_samples_trivial():
    s = Samples.empty(3, 4)
    loss, g, H = mle_loss_grad_hess(np.zeros(4), s, 2.5)
    assert loss == 0 and np.all(g == 0) and np.allclose(H, 2.5 * np.eye(4))
    assert np.all(fit_mle(s, 2.5) == 0)


def test_loss_matches_direct_sum(rng):
    pairs = draw_pairs(rng, 30, 4, 3, np.array([0.5, -0.2, 0.1]))
    s = Samples.from_pairs(pairs)
    th = rng.uniform(-1, 1, 3)
    assert mle_loss(th, s, 0.7) == pytest.approx(nll(th, pairs, 0.7), rel=1e-12)
    assert np.allclose(mle_loss_grad_hess(th, s, 0.7)[1], nll_grad(th, pairs, 0.7), atol=1e-12)


@pytest.mark.parametrize("draw", range(50))
def test_grad_hess_finite_differences(draw):
    rng = np.random.default_rng(100 + draw)
    d, U = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    pairs = draw_pairs(rng, int(rng.integers(1, 40)), U, d, rng.uniform(-1, 1, d), anchored=False)
    s = Samples.from_pairs(pairs)
    lam = float(rng.uniform(0.1, 3))
    th = rng.uniform(-1.5, 1.5, d)
    _, g, H = mle_loss_grad_hess(th, s, lam)
    assert rel_err(g, central_grad(lambda t: mle_loss(t, s, lam), th)) <= 1e-6
    assert rel_err(H, central_jacobian(lambda t: mle_loss_grad_hess(t, s, lam)[1], th)) <= 1e-5
    assert np.allclose(H, H.T) and np.linalg.eigvalsh(H).min() >= lam * (1 - 1e-10)


def test_hessian_lower_bound_by_pairwise_product(rng):
    for _ in range(200):
        d, U = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        f = unit_ball_rows(rng, U, d)
        f[0] = 0.0
        th = unit_ball_rows(rng, 1, d)[0] * 2.0
        H = data_hessian(th, Samples.from_pairs([(f, 0)]))
        kappa = min_pair_product(softmax(f @ th))
        x = rng.standard_normal(d)
        assert x @ H @ x >= kappa * np.sum((f @ x) ** 2) - 1e-14


def test_fit_matches_generic_solver_and_is_consistent():
    theta = np.array([0.6, -0.4, 0.3])
    lam = 1.0  # the LL schedule (about 35 here) shrinks the estimate by ~10%
    errs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        pairs = draw_pairs(rng, 5000, 3, 3, theta, sphere=True)
        stats = {}
        est = fit_mle(Samples.from_pairs(pairs), lam, stats=stats)
        assert np.linalg.norm(est - generic_mle(pairs, lam)) <= 1e-7
        assert stats["iterations"] <= 20
        errs.append(np.linalg.norm(est - theta))
    # sampling error is ~0.05 per seed here; the average over seeds must be well inside 0.1
    assert np.mean(errs) <= 0.1 and max(errs) <= 0.2


def test_first_order_optimality_and_warm_start(rng):
    pairs = draw_pairs(rng, 300, 4, 3, np.array([1.0, 0.0, -0.5]))
    s = Samples.from_pairs(pairs)
    cold = fit_mle(s, 1.0)
    assert np.linalg.norm(mle_loss_grad_hess(cold, s, 1.0)[1]) <= 1e-8
    warm = fit_mle(s, 1.0, theta0=cold + rng.normal(0, 0.3, 3))
    assert np.linalg.norm(warm - cold) <= 1e-7


def test_convergence_error_carries_best(rng):
    s = Samples.from_pairs(draw_pairs(rng, 50, 3, 2, np.array([0.5, 0.5])))
    with pytest.raises(ConvergenceError) as info:
        fit_mle(s, 1.0, max_iter=1, theta0=np.array([40.0, -40.0]))
    assert info.value.best.shape == (2,) and info.value.grad_norm > 1e-8
    with pytest.raises(ValueError):
        fit_mle(s, 1.0, tol=0.0)


def test_count_and_sample_histories_agree():
    mdp = random_instance(d=3, H=2, states_per_stage=4, A=2, U=3, B=1.0, seed=5)
    rng = np.random.default_rng(0)
    samp, cnt = SampleHistory(3, 3), CountHistory(mdp, 0)
    for _ in range(400):
        s, a, y = int(rng.integers(4)), int(rng.integers(2)), int(rng.integers(3))
        for hist in (samp, cnt):
            hist.add(s, a, mdp.phi[0][s, a], mdp.mask[0][s, a], y)
    assert samp.n_samples == cnt.n_samples == 400
    assert cnt.n_rows <= 8 < samp.n_rows
    t1, t2 = fit_mle(samp.view(), 2.0), fit_mle(cnt.view(), 2.0)
    assert np.linalg.norm(t1 - t2) <= 1e-9
    assert np.allclose(data_hessian(t1, samp.view()), data_hessian(t1, cnt.view()), atol=1e-9)


def test_radius_examples():
    assert radius_baseline(100, 3, 4, 0.1, 1.0) == pytest.approx(math.sqrt(4 * math.log(3000)))
    r = radius_baseline(100, 3, 4, 0.1, 0.25)
    assert r == pytest.approx(4 * math.sqrt(4 * math.log(3000)), rel=1e-14)
    assert abs(r - 22.639) <= 5e-3  # the formula gives 22.6364
    vals = [radius_baseline(k, 3, 4, 0.1, 0.3) for k in range(1, 200)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert radius_bernstein(1, 1, 1, 1 / math.e, 0.0) == pytest.approx(3.0)
    for k, d, kap, B in [(10, 2, 0.01, 1.0), (1000, 5, 0.2, 2.0), (3, 1, 0.9, 0.5)]:
        ratio = radius_baseline(k, 2, d, 0.05, kap) / radius_bernstein(k, 2, d, 0.05, B)
        assert ratio == pytest.approx(1 / (kap * (B + 3)), rel=1e-12)
    with pytest.raises(ValueError):
        radius_baseline(0, 1, 1, 0.1, 0.5)


def test_ellipsoid_ll_without_data():
    th_star = np.array([0.3, -0.4])
    lam, beta = 2.0, 1.5
    ell = ellipsoid_ll(np.zeros(2), Samples.empty(2, 2), lam, beta)
    assert np.allclose(ell.shape, lam * np.eye(2))
    assert ell.radius == pytest.approx((1 + 3 * math.sqrt(2)) * beta)
    assert ell.distance(th_star) == pytest.approx(math.sqrt(lam) * 0.5)
    assert ell.contains(ell.center)


def test_ellipsoid_baseline_shape(rng):
    assert np.allclose(ellipsoid_baseline(np.zeros(3), Samples.empty(2, 3), 2.0, 0.1, 1.0).shape,
                       20 * np.eye(3))
    s = Samples.from_pairs(draw_pairs(rng, 60, 3, 3, np.zeros(3)))
    ell = ellipsoid_baseline(np.zeros(3), s, 2.0, 0.1, 1.0)
    assert np.linalg.eigvalsh(ell.shape - 20 * np.eye(3)).min() >= -1e-10
    V = covariance_matrix(s)
    direct = sum(f.T @ f for f, _ in [(s.phi[i][s.mask[i]], 0) for i in range(len(s.phi))])
    assert np.allclose(V, direct)


def test_hessian_dominates_kappa_times_covariance(rng):
    mdp = random_instance(d=3, H=1, states_per_stage=4, A=2, U=3, B=1.0, seed=2)
    pairs = [(mdp.features(0, s, a), 0) for s in range(4) for a in range(2)]
    s = Samples.from_pairs(pairs)
    V = covariance_matrix(s)
    for _ in range(100):
        th = unit_ball_rows(rng, 1, 3)[0]
        kap = min(min_pair_product(softmax(f @ th)) for f, _ in pairs)
        H = data_hessian(th, s)
        x = rng.standard_normal(3)
        assert x @ H @ x >= kap * (x @ V @ x) - 1e-12


def test_ellipsoid_jitter_and_rejection():
    ell = ConfidenceEllipsoid(np.zeros(2), np.diag([1.0, 0.0]), 1.0)
    assert np.linalg.eigvalsh(ell.shape).min() > 0
    with pytest.raises(ValueError):
        ConfidenceEllipsoid(np.zeros(2), np.diag([1.0, -1.0]), 1.0)


def test_ellipsoid_does_not_alias_center():
    c = np.zeros(2)
    ell = ConfidenceEllipsoid(c, np.eye(2), 1.0)
    c[0] = 5.0
    assert ell.center[0] == 0.0


def test_mle_state_bookkeeping():
    mdp = random_instance(d=2, H=2, states_per_stage=3, A=2, U=2, B=1.0, seed=0)
    st = MleState(mdp)
    for k in range(1, 11):
        for h in range(2):
            st.add(mdp, h, 0, 1, k % 2)
            st.refit(h, regularizer_ll(k, 2, 2, 0.1))
            assert st.samples(h).n == k
    assert st.stored_samples == 20
    for h in range(2):
        g = mle_loss_grad_hess(st.theta[h], st.samples(h), regularizer_ll(10, 2, 2, 0.1))[1]
        assert np.linalg.norm(g) <= 1e-8
