"""Discrete hardmax self-attention dynamics.

Every token moves toward the mean of its hardmax cluster::

    x_i(k+1) = (1 - gamma) x_i(k) + gamma * mean_{l in C_i(X(k), A)} x_l(k)

with ``A = v v^T`` or ``A = xi I``.  The update is evaluated as
``M_i + (1 - gamma)(x_i - M_i)`` so that fixed points (``M_i = x_i``) and the
``gamma = 1`` jump (``x_i -> M_i``) are reproduced without rounding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import RankOneSym, ScaledIdentity, attention_scores, as_sequence, hardmax_matrix

HYPOTHESIS_MARGIN = 1e-9


class HypothesisError(ValueError):
    """The initial configuration does not satisfy a lemma's hypotheses."""


# Ties in the dynamics only come from identical tokens, whose scores agree
# bitwise; a narrow band keeps nearly merged tokens apart until they converge.
DYNAMICS_TIE_RTOL = 1e-13


@dataclass(frozen=True)
class DynamicsConfig:
    gamma: float
    A: object  # RankOneSym or ScaledIdentity
    tie_rtol: float = DYNAMICS_TIE_RTOL

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if isinstance(self.A, ScaledIdentity):
            if not self.A.xi > 0:
                raise ValueError("the identity scale must be positive")
        elif isinstance(self.A, RankOneSym):
            if not np.any(self.A.v):
                raise ValueError("the rank-one direction must be nonzero")
        else:
            raise TypeError("attention matrix must be RankOneSym or ScaledIdentity")

    @classmethod
    def rank_one(cls, gamma: float, v) -> "DynamicsConfig":
        return cls(gamma, RankOneSym(np.asarray(v, dtype=float), 1))

    @classmethod
    def scaled_identity(cls, gamma: float, xi: float = 1.0) -> "DynamicsConfig":
        return cls(gamma, ScaledIdentity(xi))

    @property
    def mode(self) -> str:
        return "rank_one" if isinstance(self.A, RankOneSym) else "scaled_identity"

    def default_max_steps(self, conv_tol: float = 1e-10) -> int:
        if self.gamma >= 1.0:
            return 2
        return 10 * math.ceil(math.log(conv_tol) / math.log(1.0 - self.gamma))


@dataclass
class Trajectory:
    iterates: list
    converged: bool
    steps_taken: int
    equilibrium: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_trajectory_csv(fh, self.iterates)


def write_trajectory_csv(fh, iterates) -> None:
    d = iterates[0].shape[1]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["step", "token_index"] + [f"coord_{c}" for c in range(d)])
    for k, X in enumerate(iterates):
        for i, x in enumerate(X):
            w.writerow([k, i] + ["%.17g" % c for c in x])


def step(X, cfg: DynamicsConfig) -> np.ndarray:
    """One synchronous update; clusters are computed on the pre-update state."""
    X = as_sequence(X)
    M = hardmax_matrix(attention_scores(X, cfg.A), cfg.tie_rtol) @ X
    return M + (1.0 - cfg.gamma) * (X - M)


def simulate(X0, cfg: DynamicsConfig, max_steps: Optional[int] = None, conv_tol: float = 1e-10) -> Trajectory:
    """Iterate until the largest token displacement drops below ``conv_tol``.

    A step whose displacement is below tolerance is not recorded, so
    ``steps_taken`` counts the steps that actually moved the configuration.
    """
    if max_steps is None:
        max_steps = cfg.default_max_steps(conv_tol)
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    X = as_sequence(X0).copy()
    iterates = [X]
    for _ in range(max_steps):
        Xn = step(X, cfg)
        disp = float(np.max(np.linalg.norm(Xn - X, axis=1)))
        if disp < conv_tol:
            return Trajectory(iterates, True, len(iterates) - 1, X)
        iterates.append(Xn)
        X = Xn
    return Trajectory(iterates, False, len(iterates) - 1, None)


def predict_rank1_equilibrium(X0, v) -> np.ndarray:
    """Limit for ``A = v v^T``: tokens with ``<v, x> > 0`` go to the top token, the rest to the bottom one."""
    X0 = as_sequence(X0)
    v = np.asarray(v, dtype=float)
    p = X0 @ v
    scale = HYPOTHESIS_MARGIN * (1.0 + np.abs(p).max())
    if np.any(np.abs(p) <= scale):
        raise HypothesisError("some token is (numerically) orthogonal to v")
    order = np.argsort(p)
    if p.size > 1 and (p[order[-1]] - p[order[-2]] <= scale or p[order[1]] - p[order[0]] <= scale):
        raise HypothesisError("the extreme projections onto v are not unique")
    top, bottom = X0[order[-1]], X0[order[0]]
    return np.where((p > 0)[:, None], top, bottom)


def _in_open_cube(X: np.ndarray, R: float, margin: float) -> np.ndarray:
    return np.all((X > margin) & (X < R - margin), axis=1)


def check_partial_hypotheses(X0, leaders: Sequence[int], R: float) -> None:
    """Raise :class:`HypothesisError` naming the first failed clause of the partial-clustering lemma."""
    X0 = as_sequence(X0)
    n, d = X0.shape
    leaders = list(leaders)
    if not leaders:
        raise HypothesisError("the leader set is empty")
    if len(set(leaders)) != len(leaders) or not all(0 <= i < n for i in leaders):
        raise HypothesisError("leader indices must be distinct and in range")
    tol = HYPOTHESIS_MARGIN * (1.0 + R)
    others = np.setdiff1d(np.arange(n), leaders)
    inside = _in_open_cube(X0[others], R, tol)
    if not np.all(inside):
        raise HypothesisError(f"clause i: token {int(others[~inside][0])} is not inside the open cube (0, R)^d")
    if np.max(np.abs(X0[leaders[0]] - R)) > tol:
        raise HypothesisError(f"clause ii: first leader {leaders[0]} is not at R * 1_d")
    for i in leaders[1:]:
        x = X0[i]
        if abs(np.linalg.norm(x) - R) > tol or not np.all(x < -tol):
            raise HypothesisError(f"clause iii: leader {i} is not on the sphere of radius R inside the negative orthant")


def predict_partial_equilibrium(X0, leaders: Sequence[int], R: float) -> np.ndarray:
    """Limit for ``A = xi I``: non-leaders go to ``R 1_d``, leaders stay put."""
    X0 = as_sequence(X0)
    check_partial_hypotheses(X0, leaders, R)
    out = np.repeat(X0[leaders[0]][None, :], X0.shape[0], axis=0)
    out[list(leaders)] = X0[list(leaders)]
    return out


def predict_full_equilibrium(X0, apex: int, R: float) -> np.ndarray:
    """Limit for ``A = xi I`` when one token sits at ``R 1_d`` and the rest inside ``(0, R)^d``."""
    return predict_partial_equilibrium(X0, [apex], R)


def on_common_sphere(X0, tol: float = HYPOTHESIS_MARGIN) -> bool:
    X0 = as_sequence(X0)
    r = np.linalg.norm(X0, axis=1)
    return bool(r.min() > 0 and r.max() - r.min() <= tol * (1.0 + r.max()))


@dataclass
class Classification:
    label: str
    prediction: Optional[np.ndarray] = None
    detail: dict = field(default_factory=dict)


def classify(X0, cfg: DynamicsConfig) -> Classification:
    """Best-effort detection of which equilibrium lemma applies to ``X0``."""
    X0 = as_sequence(X0)
    if cfg.mode == "rank_one":
        try:
            return Classification("rank-one", predict_rank1_equilibrium(X0, cfg.A.v))
        except HypothesisError:
            return Classification("unclassified")
    if X0.shape[0] > 1 and on_common_sphere(X0) and len({tuple(x) for x in X0}) == X0.shape[0]:
        return Classification("no clustering", X0.copy())
    # look for an apex R * 1_d
    for apex in range(X0.shape[0]):
        x = X0[apex]
        R = float(x[0])
        if R <= 0 or np.max(np.abs(x - R)) > HYPOTHESIS_MARGIN * (1.0 + R):
            continue
        r = np.linalg.norm(X0, axis=1)
        tol = HYPOTHESIS_MARGIN * (1.0 + R)
        neg = [i for i in range(X0.shape[0]) if i != apex and abs(r[i] - R) <= tol and np.all(X0[i] < -tol)]
        leaders = [apex] + neg
        try:
            pred = predict_partial_equilibrium(X0, leaders, R)
        except HypothesisError:
            continue
        label = "full clustering" if not neg else "partial clustering"
        return Classification(label, pred, {"R": R, "leaders": leaders})
    return Classification("unclassified")
