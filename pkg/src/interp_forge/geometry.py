"""Convex-separation toolkit behind the constructions.

Separating directions come from Euclidean projections onto convex hulls
(``v = x - proj``), which doubles as a margin certificate.  Projections are
computed with Wolfe's minimum-norm-point algorithm.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm as _normal
from scipy.stats import qmc

from .core import FeedForward, RankOneSym, as_sequence, attention_scores, hardmax_matrix

__all__ = [
    "ConvergenceError",
    "GeometryError",
    "SeparationCertificate",
    "min_norm_point_in_hull",
    "is_extreme",
    "extreme_certificate",
    "leader_matrix",
    "global_leader_direction",
    "choose_leader_ff",
    "hat_ff",
    "unique_points",
    "direction_candidates",
]


class GeometryError(RuntimeError):
    pass


class ConvergenceError(GeometryError):
    pass


@dataclass(frozen=True)
class SeparationCertificate:
    """``<v, x_i> - max_{l != i} <v, x_l> = margin > 0``."""

    v: np.ndarray
    margin: float
    index: int


# --------------------------------------------------------------------------
# Wolfe's minimum-norm point


def _affine_min(Q: np.ndarray) -> np.ndarray:
    """Coefficients ``a`` (summing to one) minimising ``||Q^T a||``."""
    k = Q.shape[0]
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = Q @ Q.T
    K[:k, k] = 1.0
    K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:k]


def _wolfe(P: np.ndarray, tol: float, max_iter: int):
    sq = np.einsum("ij,ij->i", P, P)
    scale = max(1.0, float(sq.max()))
    first = int(np.argmin(sq))
    S = [first]
    lam = np.array([1.0])
    x = P[first].copy()
    gap = np.inf
    for _ in range(max_iter):
        g = P @ x
        j = int(np.argmin(g))
        gap = float(x @ x - g[j])
        if gap <= tol * scale or j in S:
            return x, gap
        S.append(j)
        lam = np.append(lam, 0.0)
        for _minor in range(len(S) + 1):
            alpha = _affine_min(P[S])
            if np.all(alpha > 0):
                lam = alpha
                break
            neg = alpha <= 0
            theta = np.min(lam[neg] / (lam[neg] - alpha[neg]))
            lam = lam + theta * (alpha - lam)
            keep = lam > 1e-15
            S = [s for s, k in zip(S, keep) if k]
            lam = lam[keep]
            lam = lam / lam.sum()
        x_new = lam @ P[S]
        if x_new @ x_new >= x @ x * (1.0 - 1e-15) and len(S) > 1:
            # no progress: rounding floor reached
            return (x_new if x_new @ x_new < x @ x else x), gap
        x = x_new
    raise ConvergenceError(f"minimum-norm point did not converge in {max_iter} iterations (gap {gap:.3g})")


def min_norm_point_in_hull(points, query, tol: float = 1e-15, max_iter: int = 1000):
    """Euclidean projection of ``query`` onto ``co(points)`` and its distance.

    ``tol`` bounds the Wolfe duality gap relative to the squared point scale;
    the distance error is at most ``sqrt(gap)``.
    """
    P = as_sequence(points)
    q = np.asarray(query, dtype=float)
    if P.shape[1] != q.shape[0]:
        raise ValueError("query and points have different dimensions")
    x, _gap = _wolfe(P - q, tol, max_iter)
    return q + x, float(np.linalg.norm(x))


# --------------------------------------------------------------------------
# extreme points and leaders


def _scale(X: np.ndarray) -> float:
    return 1.0 + float(np.abs(X).max())


def extreme_certificate(X, i: int, tol: float = 1e-9) -> Optional[SeparationCertificate]:
    """Certificate that ``x_i`` is an extreme point of ``co(X)``, or ``None``.

    ``tol`` is relative to the coordinate scale of ``X``.
    """
    X = as_sequence(X)
    n = X.shape[0]
    xi = X[i]
    if n == 1:
        nrm = np.linalg.norm(xi)
        v = xi / nrm if nrm > 0 else np.eye(X.shape[1])[0]
        return SeparationCertificate(v, np.inf, i)
    others = np.delete(X, i, axis=0)
    proj, dist = min_norm_point_in_hull(others, xi)
    if dist <= tol * _scale(X):
        return None
    v = xi - proj
    margin = float(xi @ v - np.max(others @ v))
    if margin <= 0:
        return None
    return SeparationCertificate(v, margin, i)


def is_extreme(X, i: int, tol: float = 1e-9) -> bool:
    return extreme_certificate(X, i, tol) is not None


def _repair_nonzero(v: np.ndarray, X: np.ndarray, i: int, margin: float) -> np.ndarray:
    """Tilt ``v`` along ``x_i`` so that ``|<v, x_i>|`` is not tiny while ``x_i`` stays the unique maximiser."""
    xi = X[i]
    nx2 = float(xi @ xi)
    if nx2 == 0.0:
        raise GeometryError("cannot make <v, x_i> nonzero for x_i = 0")
    if abs(float(v @ xi)) >= 0.5 * margin:
        return v
    others = np.delete(X, i, axis=0)
    sgn = 1.0 if v @ xi >= 0 else -1.0
    t = sgn * 0.5 * margin
    for _ in range(60):
        w = v + t * xi / nx2
        if others.size == 0 or xi @ w - np.max(others @ w) > 0.25 * margin:
            if abs(float(w @ xi)) > 0:
                return w
        t *= 0.5
    raise GeometryError("could not tilt the separating direction away from x_i")


def leader_matrix(X, i: int, tol: float = 1e-9) -> RankOneSym:
    """``A = +-v v^T`` with hardmax cluster ``C_i(X, A) = {i}``."""
    X = as_sequence(X)
    cert = extreme_certificate(X, i, tol)
    if cert is None:
        raise GeometryError(f"token {i} is not an extreme point of the hull")
    v = _repair_nonzero(cert.v, X, i, cert.margin if np.isfinite(cert.margin) else 1.0)
    A = RankOneSym(v, 1 if v @ X[i] > 0 else -1)
    w = hardmax_matrix(attention_scores(X, A)[i : i + 1])[0]
    if w[i] != 1.0:
        raise GeometryError(f"leader matrix failed verification for token {i}")
    return A


def _argmax_margin(vals: np.ndarray):
    if vals.size == 1:
        return 0, np.inf
    order = np.argsort(vals)
    return int(order[-1]), float(vals[order[-1]] - vals[order[-2]])


def global_leader_direction(sequences, jstar: int, istar: int, tol: float = 1e-9, max_retries: int = 8):
    """Direction ``v`` whose maximiser is unique in every sequence and is ``istar`` in sequence ``jstar``.

    Returns ``(v, leaders)`` with ``leaders[j]`` the maximising index in sequence ``j``.
    """
    seqs = [as_sequence(X) for X in sequences]
    scale = max(_scale(X) for X in seqs)
    band = 1e-9 * scale
    cert = extreme_certificate(seqs[jstar], istar, tol)
    if cert is None:
        raise GeometryError(f"token {istar} of sequence {jstar} is not extreme")
    v = _repair_nonzero(cert.v, seqs[jstar], istar, cert.margin if np.isfinite(cert.margin) else 1.0)
    v = v / np.linalg.norm(v)
    xstar = seqs[jstar][istar]
    resolved = {jstar: istar}
    for j in range(len(seqs)):
        if j == jstar:
            continue
        X = seqs[j]
        for _attempt in range(max_retries):
            vals = X @ v
            top = vals.max()
            tied = np.flatnonzero(top - vals <= band * 4)
            if tied.size == 1:
                resolved[j] = int(tied[0])
                break
            T = X[tied]
            # the lexicographic maximum of T is an extreme point of co(T)
            k = int(np.lexsort(T.T[::-1])[-1])
            ucert = extreme_certificate(T, k, tol)
            if ucert is None:
                raise GeometryError(f"could not separate tied tokens in sequence {j}")
            u = ucert.v / np.linalg.norm(ucert.v)
            x1 = T[k]
            bounds = []
            for jj, ii in resolved.items():
                Y = seqs[jj]
                vv = Y @ v
                _, marg = _argmax_margin(vv)
                sens = float(np.max(np.abs((Y[ii] - Y) @ u)))
                if np.isfinite(marg) and sens > 0:
                    bounds.append(marg / sens)
            rest = np.setdiff1d(np.arange(X.shape[0]), tied)
            if rest.size:
                gaps = top - vals[rest]
                sens = np.abs((x1 - X[rest]) @ u)
                ok = sens > 0
                if np.any(ok):
                    bounds.append(float(np.min(gaps[ok] / sens[ok])))
            su = abs(float(u @ xstar))
            if su > 0:
                bounds.append(abs(float(v @ xstar)) / su)
            eps = 0.5 * min(bounds) if bounds else 1.0
            v = v + eps * u
            v = v / np.linalg.norm(v)
        else:
            raise GeometryError(f"ties in sequence {j} persisted after {max_retries} corrections")
    leaders = []
    for j, X in enumerate(seqs):
        idx, marg = _argmax_margin(X @ v)
        if marg <= band or (j in resolved and idx != resolved[j]):
            raise GeometryError(f"direction lost uniqueness in sequence {j}")
        leaders.append(idx)
    if leaders[jstar] != istar:
        raise GeometryError("prescribed leader is not the maximiser")
    if float(v @ xstar) == 0.0:
        raise GeometryError("<v, x*> vanished")
    return v, leaders


def choose_leader_ff(sequences, jstar: int, istar: int, eps_shift: float = 1.0):
    """Width-1 layer shifting every token along ``v`` so that ``v v^T`` attention picks one leader per sequence.

    Returns ``(ff, v, leaders)``.
    """
    seqs = [as_sequence(X) for X in sequences]
    v, leaders = global_leader_direction(seqs, jstar, istar)
    allx = np.vstack(seqs)
    reach = float(np.max(np.abs(allx @ v)))
    A = RankOneSym(v, 1)
    for _ in range(50):
        ff = FeedForward(1.0, v[:, None], np.zeros((1, v.size)), np.array([reach + eps_shift]))
        moved = [ff(X) for X in seqs]
        if all(np.all(np.linalg.norm(Y, axis=1) > 0) for Y in moved):
            break
        eps_shift *= 2.0
    else:
        raise GeometryError("shifted tokens keep hitting the origin")
    for j, Y in enumerate(moved):
        W = hardmax_matrix(attention_scores(Y, A))
        if not np.all(W[:, leaders[j]] == 1.0):
            raise GeometryError(f"shifted sequence {j} does not attend to a single leader")
    return ff, v, leaders


# --------------------------------------------------------------------------
# hat layers


def unique_points(P, tol: float = 0.0) -> np.ndarray:
    """Representatives of ``P`` with pairwise distances above ``tol`` (first occurrence wins)."""
    P = as_sequence(P)
    if tol <= 0:
        _, idx = np.unique(P, axis=0, return_index=True)
        return P[np.sort(idx)]
    keep = []
    for k, p in enumerate(P):
        if all(np.linalg.norm(p - P[j]) > tol for j in keep):
            keep.append(k)
    return P[keep]


@lru_cache(maxsize=None)
def _halton_directions(d: int, count: int = 64) -> np.ndarray:
    pts = qmc.Halton(d=d, scramble=True, seed=20240517).random(count)
    Z = _normal.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


def direction_candidates(P: np.ndarray) -> np.ndarray:
    """Axis directions, the diagonal, the principal axis of ``P`` and a fixed low-discrepancy set."""
    d = P.shape[1]
    cands = [np.eye(d), np.ones((1, d)) / np.sqrt(d)]
    if P.shape[0] > 1:
        C = P - P.mean(axis=0)
        if np.any(C):
            cands.append(np.linalg.svd(C, full_matrices=False)[2][:1])
    cands.append(_halton_directions(d))
    return np.vstack(cands)


def hat_ff(points, i: int, y, *, check_tol: float = 1e-10) -> FeedForward:
    """Width-3 residual layer sending ``points[i]`` to ``y`` and fixing every other point.

    The three neurons ``relu(<u, x> + beta + (-g, 0, g))`` combined with weights
    ``(w, -2w, w)`` form a hat of half-width ``g`` around the hyperplane through
    ``x_i``; the direction ``u`` is picked among :func:`direction_candidates` to
    maximise the isolation of ``x_i`` relative to the spread of the points.
    """
    P = as_sequence(points)
    y = np.asarray(y, dtype=float)
    xi = P[i]
    others = np.delete(P, i, axis=0)
    d = P.shape[1]
    if others.shape[0] and np.min(np.linalg.norm(others - xi, axis=1)) == 0.0:
        raise GeometryError("hat layer needs pairwise distinct points")
    cands = direction_candidates(P)
    if others.shape[0]:
        T = (others - xi) @ cands.T  # (m-1, k)
        absT = np.abs(T)
        gap = absT.min(axis=0)
        spread = absT.max(axis=0)
        score = np.divide(gap, spread, out=np.zeros_like(gap), where=spread > 0)
        order = np.argsort(-score, kind="stable")
    else:
        T = np.zeros((0, cands.shape[0]))
        gap = np.ones(cands.shape[0])
        order = np.arange(cands.shape[0])
    scale = _scale(np.vstack([P, y[None, :]]))
    for k in order[:8]:
        if gap[k] <= 0:
            break
        u = cands[k]
        t = T[:, k]
        # points on the positive side of the hat pick up rounding; keep the crowd on the negative side
        if t.size and (np.max(t, initial=0.0), np.sum(t > 0)) > (np.max(-t, initial=0.0), np.sum(t < 0)):
            u = -u
        g = 0.5 * float(gap[k])
        beta = -float(u @ xi)
        w = (y - xi) / g
        ff = FeedForward(
            1.0,
            np.stack([w, -2.0 * w, w], axis=1),
            np.stack([u, u, u]),
            np.array([beta - g, beta, beta + g]),
        )
        out = ff(P)
        target = P.copy()
        target[i] = y
        if np.max(np.abs(out - target)) <= check_tol * scale:
            return ff
    raise GeometryError("no direction isolates the moved point well enough for an exact hat layer")
