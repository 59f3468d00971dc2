"""Optimistic backward induction.

Three planners share one backward pass:

* closed-form first/second-order bonus around the OMD iterate,
* the covariance-ellipsoid bonus of the baseline,
* maximisation of the expected next value over a confidence ellipsoid,
  approximated by multi-start projected gradient ascent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular

from .core import MnlMdp, backup, stage_probs
from .mle import ConfidenceEllipsoid

MAXSET_STEPS = 50
MAXSET_STEP_SCALE = 0.1


@dataclass
class OptimisticValues:
    """Clipped optimistic ``Q``/``V`` plus the unclipped ``Q_raw`` and the applied bonus parts."""

    Q: list
    V: list
    Q_raw: list
    bonus: list = field(default_factory=list)
    horizon: int = 0

    def policy(self) -> list:
        return [np.argmax(q, axis=1) for q in self.Q]


def zero_values(mdp: MnlMdp) -> OptimisticValues:
    Q = [np.zeros((mdp.n_states[h], mdp.A)) for h in range(mdp.H)]
    V = [np.zeros(n) for n in mdp.n_states]
    return OptimisticValues(Q, V, [q.copy() for q in Q], [{} for _ in range(mdp.H)], mdp.H)


def greedy_action(values: OptimisticValues, h: int, s: int) -> int:
    """``argmax_a Q[h][s, a]``; ties go to the smallest action index."""
    return int(np.argmax(values.Q[h][s]))


# ---------------------------------------------------------------- bonuses

def bonus_terms(features, theta, H_cum, beta: float, horizon_H: int):
    """First- and second-order value-error bonuses for one reachable set.

    ``features`` is ``(n, d)``; the norms are taken in ``H_cum^{-1}``.
    """
    features = np.asarray(features, dtype=float)
    z = features @ np.asarray(theta, dtype=float)
    p = np.exp(z - z.max())
    p /= p.sum()
    Hinv = np.linalg.inv(np.asarray(H_cum, dtype=float))
    centered = features - p @ features
    c_norm = np.sqrt(np.maximum(np.einsum("ud,de,ue->u", centered, Hinv, centered), 0.0))
    sq = np.einsum("ud,de,ue->u", features, Hinv, features)
    eps_fst = horizon_H * beta * float(p @ c_norm)
    eps_snd = 2.5 * horizon_H * beta ** 2 * float(max(sq.max(), 0.0))
    return eps_fst, eps_snd


@njit(cache=True)
def _bonus_kernel(phi, mask_n, theta, Hinv):
    S, A, U, d = phi.shape
    fst = np.zeros((S, A))
    snd = np.zeros((S, A))
    p = np.empty(U)
    mean = np.empty(d)
    cen = np.empty(d)
    for s in range(S):
        for a in range(A):
            n = mask_n[s, a]
            m = -1e300
            for u in range(n):
                acc = 0.0
                for j in range(d):
                    acc += phi[s, a, u, j] * theta[j]
                p[u] = acc
                m = max(m, acc)
            tot = 0.0
            for u in range(n):
                p[u] = math.exp(p[u] - m)
                tot += p[u]
            for j in range(d):
                mean[j] = 0.0
            for u in range(n):
                p[u] /= tot
                for j in range(d):
                    mean[j] += p[u] * phi[s, a, u, j]
            f = 0.0
            top = 0.0
            for u in range(n):
                for j in range(d):
                    cen[j] = phi[s, a, u, j] - mean[j]
                qc = 0.0
                qf = 0.0
                for i in range(d):
                    for j in range(d):
                        qc += cen[i] * Hinv[i, j] * cen[j]
                        qf += phi[s, a, u, i] * Hinv[i, j] * phi[s, a, u, j]
                f += p[u] * math.sqrt(max(qc, 0.0))
                top = max(top, qf)
            fst[s, a] = f
            snd[s, a] = top
    return fst, snd


def stage_bonus_terms(mdp: MnlMdp, h: int, theta, H_cum, beta: float):
    """Vectorised ``bonus_terms`` for every ``(s, a)`` of stage ``h``; returns two ``(S_h, A)`` arrays."""
    Hinv = np.linalg.inv(np.asarray(H_cum, dtype=float))
    mask_n = mdp.mask[h].sum(axis=-1).astype(np.int64)
    fst, top = _bonus_kernel(np.ascontiguousarray(mdp.phi[h]), mask_n,
                             np.ascontiguousarray(theta, dtype=float), Hinv)
    return mdp.H * beta * fst, 2.5 * mdp.H * beta ** 2 * top


def stage_baseline_bonus(mdp: MnlMdp, h: int, A_mat, beta: float) -> np.ndarray:
    """``2 H beta max_{s'} ||phi||_{A^{-1}}`` for every ``(s, a)``."""
    phi, mask = mdp.phi[h], mdp.mask[h]
    Ainv = np.linalg.inv(A_mat)
    sq = np.where(mask, np.sum((phi @ Ainv) * phi, axis=-1), 0.0)
    return 2.0 * mdp.H * beta * np.sqrt(np.maximum(sq.max(axis=-1), 0.0))


def planner_stage_ops(mdp: MnlMdp, h: int) -> int:
    S, A, U, d = mdp.phi[h].shape
    return S * A * U * (4 * d * d + 6 * d + 8) + d ** 3


def _backward(mdp: MnlMdp, thetas, bonuses) -> OptimisticValues:
    H = mdp.H
    V = [None] * (H + 1)
    Q, Q_raw = [None] * H, [None] * H
    V[H] = np.zeros(mdp.n_states[H])
    for h in reversed(range(H)):
        P = stage_probs(mdp, h, thetas[h])
        total = sum(bonuses[h].values()) if bonuses[h] else 0.0
        Q_raw[h] = mdp.rewards[h] + backup(mdp, h, P, V[h + 1]) + total
        Q[h] = np.clip(Q_raw[h], 0.0, H)
        V[h] = Q[h].max(axis=1)
    return OptimisticValues(Q, V, Q_raw, bonuses, H)


def backward_induction_bonus(mdp: MnlMdp, thetas, H_cums, betas) -> OptimisticValues:
    """Optimistic values with the closed-form bonus ``eps_fst + eps_snd`` at each stage."""
    bonuses = []
    for h in range(mdp.H):
        fst, snd = stage_bonus_terms(mdp, h, thetas[h], H_cums[h], betas[h])
        bonuses.append({"fst": fst, "snd": snd})
    return _backward(mdp, thetas, bonuses)


def backward_induction_baseline(mdp: MnlMdp, thetas, A_mats, betas) -> OptimisticValues:
    """Optimistic values with the covariance bonus ``2 H beta max ||phi||_{A^{-1}}``."""
    bonuses = [{"ucb": stage_baseline_bonus(mdp, h, A_mats[h], betas[h])} for h in range(mdp.H)]
    return _backward(mdp, thetas, bonuses)


# ---------------------------------------------------------------- max over a set

@njit(cache=True)
def _expected(psi_sa, z0_sa, n, w, vals, p):
    """Fill ``p`` with the softmax of ``z0 + psi w`` and return the expected value of ``vals``."""
    d = w.shape[0]
    m = -1e300
    for u in range(n):
        acc = z0_sa[u]
        for j in range(d):
            acc += psi_sa[u, j] * w[j]
        p[u] = acc
        if acc > m:
            m = acc
    tot = 0.0
    for u in range(n):
        p[u] = math.exp(p[u] - m)
        tot += p[u]
    ev = 0.0
    for u in range(n):
        p[u] /= tot
        ev += p[u] * vals[u]
    return ev


@njit(cache=True)
def _project(w, center, LinvT, LT, radius, B, theta):
    """Alternate radial projections onto ``||w|| <= radius`` and ``||theta|| <= B`` (in place).

    ``w = L^T (theta - center)`` are whitened coordinates of the ellipsoid.
    When the center lies inside the B-ball the point is instead pulled back
    along the segment to the center onto the sphere, which stays in both
    sets by convexity. Returns whether the final point is feasible.
    """
    d = w.shape[0]
    tol = radius * (1.0 + 1e-9) + 1e-12
    cc = 0.0
    for i in range(d):
        cc += center[i] * center[i]
    if cc < B * B:
        nw = 0.0
        for j in range(d):
            nw += w[j] * w[j]
        nw = math.sqrt(nw)
        if nw > radius:
            for j in range(d):
                w[j] *= radius / nw
        a2 = 0.0
        b2 = 0.0
        for i in range(d):
            acc = 0.0
            for j in range(i, d):
                acc += LinvT[i, j] * w[j]
            theta[i] = acc
            a2 += acc * acc
            b2 += center[i] * acc
        if cc + 2.0 * b2 + a2 > B * B and a2 > 0.0:
            t = (-b2 + math.sqrt(b2 * b2 - a2 * (cc - B * B))) / a2
            t = min(t, 1.0)
            for j in range(d):
                w[j] *= t
            for i in range(d):
                theta[i] *= t
        for i in range(d):
            theta[i] += center[i]
        return True
    for _ in range(20):
        nw = 0.0
        for j in range(d):
            nw += w[j] * w[j]
        nw = math.sqrt(nw)
        if nw > radius:
            for j in range(d):
                w[j] *= radius / nw
        nt = 0.0
        for i in range(d):
            acc = center[i]
            for j in range(i, d):
                acc += LinvT[i, j] * w[j]
            theta[i] = acc
            nt += acc * acc
        nt = math.sqrt(nt)
        if nt <= B:
            return True
        nw = 0.0
        for i in range(d):
            theta[i] *= B / nt
        for i in range(d):
            acc = 0.0
            for j in range(i, d):
                acc += LT[i, j] * (theta[j] - center[j])
            w[i] = acc
            nw += acc * acc
        if math.sqrt(nw) <= tol:
            return True
    return False


@njit(cache=True)
def _maxset_stage(psi, z0, mask_n, nxt, v_next, center, LinvT, LT, radius, B, starts,
                  n_steps, step_scale):
    S, A, U, d = psi.shape
    out = np.empty((S, A))
    w = np.empty(d)
    theta = np.empty(d)
    g = np.empty(d)
    p = np.empty(U)
    vals = np.empty(U)
    zero = np.zeros(d)
    for s in range(S):
        for a in range(A):
            n = mask_n[s, a]
            vmin, vmax = 1e300, -1e300
            for u in range(n):
                vals[u] = v_next[nxt[s, a, u]]
                vmin = min(vmin, vals[u])
                vmax = max(vmax, vals[u])
            psi_sa = psi[s, a]
            z0_sa = z0[s, a]
            best = _expected(psi_sa, z0_sa, n, zero, vals, p)
            if radius <= 0.0 or vmax - vmin <= 0.0:
                out[s, a] = best
                continue
            for i in range(starts.shape[0]):
                for j in range(d):
                    w[j] = starts[i, j]
                ok = _project(w, center, LinvT, LT, radius, B, theta)
                ev = _expected(psi_sa, z0_sa, n, w, vals, p)
                if ok and ev > best:
                    best = ev
                for t in range(1, n_steps + 1):
                    for j in range(d):
                        g[j] = 0.0
                    for u in range(n):
                        c = p[u] * (vals[u] - ev)
                        for j in range(d):
                            g[j] += c * psi_sa[u, j]
                    # in whitened coordinates the M^{-1}-preconditioned step is the plain gradient
                    nrm = 0.0
                    for j in range(d):
                        nrm += g[j] * g[j]
                    if nrm < 1e-30:
                        break
                    step = step_scale * radius / math.sqrt(t) / math.sqrt(nrm)
                    for j in range(d):
                        w[j] += step * g[j]
                    ok = _project(w, center, LinvT, LT, radius, B, theta)
                    ev = _expected(psi_sa, z0_sa, n, w, vals, p)
                    if ok and ev > best:
                        best = ev
            out[s, a] = best
    return out


@njit(cache=True)
def _softmax_columns(PS, Z0, VAL, W, Z, P, ev, U, d, C):
    """Column-wise softmax of ``Z0 + PS . W`` into ``P`` and expected values into ``ev``."""
    for u in range(U):
        for c in range(C):
            Z[u, c] = Z0[u, c]
        for j in range(d):
            for c in range(C):
                Z[u, c] += PS[u, j, c] * W[j, c]
    for c in range(C):
        ev[c] = -1e300
    for u in range(U):
        for c in range(C):
            ev[c] = max(ev[c], Z[u, c])
    for u in range(U):
        for c in range(C):
            P[u, c] = math.exp(Z[u, c] - ev[c])
    for c in range(C):
        ev[c] = 0.0
    for u in range(U):
        for c in range(C):
            ev[c] += P[u, c]
    for u in range(U):
        for c in range(C):
            P[u, c] /= ev[c]
    for c in range(C):
        ev[c] = 0.0
    for u in range(U):
        for c in range(C):
            ev[c] += P[u, c] * VAL[u, c]


@njit(cache=True)
def _maxset_stage_wide(psi, z0, mask_n, nxt, v_next, center, LinvT, LT, radius, B, starts,
                       n_steps, step_scale):
    """Same iterates as ``_maxset_stage``, advancing every (pair, start) column together.

    Columns whose gradient vanishes are compacted away so the sweep only
    touches live ones.
    """
    S, A, U, d = psi.shape
    m = starts.shape[0]
    C = S * A * m
    PS = np.zeros((U, d, C))
    Z0 = np.full((U, C), -1e30)
    VAL = np.zeros((U, C))
    W = np.zeros((d, C))
    aa = np.empty(C)
    bb = np.empty(C)
    Z = np.empty((U, C))
    P = np.empty((U, C))
    G = np.empty((d, C))
    ev = np.empty(C)
    scale = np.empty(C)
    feas = np.empty(C)
    live = np.zeros(C, dtype=np.bool_)
    owner = np.empty(C, dtype=np.int64)
    best = np.empty(S * A)
    col = np.empty(d)
    theta = np.empty(d)
    p = np.empty(U)
    vals = np.empty(U)
    zero = np.zeros(d)
    n_live = 0
    for s in range(S):
        for a in range(A):
            q = s * A + a
            n = mask_n[s, a]
            vmin, vmax = 1e300, -1e300
            for u in range(n):
                vals[u] = v_next[nxt[s, a, u]]
                vmin = min(vmin, vals[u])
                vmax = max(vmax, vals[u])
            best[q] = _expected(psi[s, a], z0[s, a], n, zero, vals, p)
            if radius <= 0.0 or vmax - vmin <= 0.0:
                continue
            for i in range(m):
                c = n_live
                n_live += 1
                owner[c] = q
                for u in range(n):
                    Z0[u, c] = z0[s, a, u]
                    VAL[u, c] = vals[u]
                    for j in range(d):
                        PS[u, j, c] = psi[s, a, u, j]
                for j in range(d):
                    col[j] = starts[i, j]
                ok = _project(col, center, LinvT, LT, radius, B, theta)
                for j in range(d):
                    W[j, c] = col[j]
                e = _expected(psi[s, a], z0[s, a], n, col, vals, p)
                live[c] = True
                if ok and e > best[q]:
                    best[q] = e
    C = n_live
    cc = 0.0
    for j in range(d):
        cc += center[j] * center[j]
    _softmax_columns(PS, Z0, VAL, W, Z, P, ev, U, d, C)
    for t in range(1, n_steps + 1):
        if C == 0:
            break
        for j in range(d):
            for c in range(C):
                G[j, c] = 0.0
        for u in range(U):
            for c in range(C):
                Z[u, c] = P[u, c] * (VAL[u, c] - ev[c])
            for j in range(d):
                for c in range(C):
                    G[j, c] += PS[u, j, c] * Z[u, c]
        for c in range(C):
            scale[c] = 0.0
        for j in range(d):
            for c in range(C):
                scale[c] += G[j, c] * G[j, c]
        # in whitened coordinates the M^{-1}-preconditioned step is the plain gradient
        base = step_scale * radius / math.sqrt(t)
        for c in range(C):
            if scale[c] < 1e-30:
                live[c] = False
                scale[c] = 0.0
            else:
                scale[c] = base / math.sqrt(scale[c])
        for j in range(d):
            for c in range(C):
                W[j, c] += scale[c] * G[j, c]
        for c in range(C):
            scale[c] = 0.0
        for j in range(d):
            for c in range(C):
                scale[c] += W[j, c] * W[j, c]
        for c in range(C):
            nw = math.sqrt(scale[c])
            scale[c] = radius / nw if nw > radius else 1.0
        for j in range(d):
            for c in range(C):
                W[j, c] *= scale[c]
        for c in range(C):
            scale[c] = 0.0
        for r in range(d):
            for c in range(C):
                G[r, c] = center[r]
            for j in range(r, d):
                for c in range(C):
                    G[r, c] += LinvT[r, j] * W[j, c]
            for c in range(C):
                scale[c] += G[r, c] * G[r, c]
        for c in range(C):
            feas[c] = 1.0
        if cc < B * B:
            # the segment pullback of _project, for all columns at once
            for c in range(C):
                aa[c] = 0.0
                bb[c] = 0.0
            for r in range(d):
                for c in range(C):
                    delta = G[r, c] - center[r]
                    aa[c] += delta * delta
                    bb[c] += center[r] * delta
            for c in range(C):
                t = 1.0
                if scale[c] > B * B and aa[c] > 0.0:
                    t = (-bb[c] + math.sqrt(bb[c] * bb[c] - aa[c] * (cc - B * B))) / aa[c]
                    t = min(t, 1.0)
                scale[c] = t
            for j in range(d):
                for c in range(C):
                    W[j, c] *= scale[c]
        else:
            for c in range(C):
                if live[c] and math.sqrt(scale[c]) > B:
                    for j in range(d):
                        col[j] = W[j, c]
                    if not _project(col, center, LinvT, LT, radius, B, theta):
                        feas[c] = 0.0
                    for j in range(d):
                        W[j, c] = col[j]
        _softmax_columns(PS, Z0, VAL, W, Z, P, ev, U, d, C)
        kept = 0
        for c in range(C):
            if not live[c]:
                continue
            q = owner[c]
            if feas[c] > 0.0 and ev[c] > best[q]:
                best[q] = ev[c]
            kept += 1
        if kept < C:
            k = 0
            for c in range(C):
                if not live[c]:
                    continue
                if k != c:
                    owner[k] = owner[c]
                    ev[k] = ev[c]
                    live[k] = True
                    for u in range(U):
                        Z0[u, k] = Z0[u, c]
                        VAL[u, k] = VAL[u, c]
                        P[u, k] = P[u, c]
                        for j in range(d):
                            PS[u, j, k] = PS[u, j, c]
                    for j in range(d):
                        W[j, k] = W[j, c]
                k += 1
            C = kept
    out = np.empty((S, A))
    for s in range(S):
        for a in range(A):
            out[s, a] = best[s * A + a]
    return out


def ellipsoid_starts(ell: ConfidenceEllipsoid) -> np.ndarray:
    """Center plus the ``2d`` principal-axis boundary points, in parameter coordinates."""
    w, Q = np.linalg.eigh(ell.shape)
    axes = (Q / np.sqrt(w)).T * ell.radius
    return np.vstack([ell.center[None], ell.center + axes, ell.center - axes])


def maxset_stage_values(mdp: MnlMdp, h: int, ell: ConfidenceEllipsoid, v_next: np.ndarray,
                        B: float, n_steps: int = MAXSET_STEPS,
                        step_scale: float = MAXSET_STEP_SCALE, batched: bool = True) -> np.ndarray:
    """Approximate ``max_{theta in ell, ||theta|| <= B} sum_{s'} p(theta) v_next`` for every ``(s, a)``.

    Ascent runs in whitened coordinates ``w = L^T (theta - center)`` with
    ``shape = L L^T``, where the ellipsoid is the ball ``||w|| <= radius``.
    """
    L = np.linalg.cholesky(ell.shape)
    LinvT = np.ascontiguousarray(solve_triangular(L, np.eye(mdp.d), lower=True).T)
    starts = (ellipsoid_starts(ell) - ell.center) @ L
    psi = mdp.phi[h] @ LinvT
    z0 = mdp.phi[h] @ ell.center
    mask_n = mdp.mask[h].sum(axis=-1).astype(np.int64)
    nxt = np.where(mdp.mask[h], mdp.next_states[h], 0)
    kernel = _maxset_stage_wide if batched else _maxset_stage
    return kernel(psi, z0, mask_n, nxt, np.asarray(v_next, dtype=float), ell.center,
                         LinvT, np.ascontiguousarray(L.T), float(ell.radius), float(B),
                         starts, n_steps, step_scale)


def maxset_stage_ops(mdp: MnlMdp, h: int, n_steps: int = MAXSET_STEPS) -> int:
    S, A, U, d = mdp.phi[h].shape
    starts = 2 * d + 1
    return S * A * starts * (n_steps + 1) * (U * (4 * d + 6) + 6 * d * d) + 2 * d ** 3


def backward_induction_maxset(mdp: MnlMdp, ellipsoids: Sequence[ConfidenceEllipsoid],
                              B: float = None) -> OptimisticValues:
    """Optimistic values maximising the expected next value over each stage's ellipsoid.

    The inner maximum is approximated from below by projected gradient
    ascent; the center is always a candidate.
    """
    B = mdp.B if B is None else B
    H = mdp.H
    V = [None] * (H + 1)
    Q, Q_raw, bonuses = [None] * H, [None] * H, [None] * H
    V[H] = np.zeros(mdp.n_states[H])
    for h in reversed(range(H)):
        ell = ellipsoids[h]
        plain = backup(mdp, h, stage_probs(mdp, h, ell.center), V[h + 1])
        if np.ptp(V[h + 1]) > 0.0:
            best = maxset_stage_values(mdp, h, ell, V[h + 1], B)
        else:
            # a constant next value makes every parameter equally good
            best = plain.copy()
        bonuses[h] = {"gain": best - plain}
        Q_raw[h] = mdp.rewards[h] + best
        Q[h] = np.clip(Q_raw[h], 0.0, H)
        V[h] = Q[h].max(axis=1)
    return OptimisticValues(Q, V, Q_raw, bonuses, H)
