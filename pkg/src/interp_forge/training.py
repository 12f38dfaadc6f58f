"""Tikhonov-regularised training of a one-block softmax transformer.

Objective::

    F_eps(theta) = (1/N) sum_j max_i ||T_theta(X^j)_i - y^j||^2 + eps * ||theta||^2

Any exact interpolant ``theta_exact`` gives ``F_eps(theta_exact) = eps * kappa(theta_exact)``,
an upper bound on the global minimum.  A run that never goes below that value
has certainly not found a global minimiser.

Parameter vector layout (fixed)::

    [eta, W (d x h), U (h x d), b (h), rho, V (d x d), A (d x d)]

with ``h = HIDDEN`` hidden units and row-major flattening.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Block, Dataset, Dense, FeedForward, SelfAttention, Transformer, as_sequence, validate_dataset

HIDDEN = 4
TAU = 1.0


class TrainingDivergence(RuntimeError):
    pass


def n_params(d: int, h: int = HIDDEN) -> int:
    return 1 + 2 * d * h + h + 1 + 2 * d * d


def unpack(theta, d: int, h: int = HIDDEN) -> dict:
    theta = np.asarray(theta, dtype=float)
    if theta.size != n_params(d, h):
        raise ValueError(f"expected {n_params(d, h)} parameters for d={d}, got {theta.size}")
    out, k = {}, 0
    for name, shape in (("eta", ()), ("W", (d, h)), ("U", (h, d)), ("b", (h,)), ("rho", ()), ("V", (d, d)), ("A", (d, d))):
        size = int(np.prod(shape)) if shape else 1
        chunk = theta[k : k + size]
        out[name] = float(chunk[0]) if not shape else chunk.reshape(shape)
        k += size
    return out


def pack(p: dict) -> np.ndarray:
    return np.concatenate(
        [np.atleast_1d(np.asarray(p[k], dtype=float)).ravel() for k in ("eta", "W", "U", "b", "rho", "V", "A")]
    )


def to_transformer(theta, d: int) -> Transformer:
    p = unpack(theta, d)
    ff = FeedForward(p["eta"], p["W"], p["U"], p["b"])
    sa = SelfAttention(p["rho"], Dense(p["V"]), Dense(p["A"]), TAU)
    return Transformer((Block(ff, sa),), d)


def loss_f(X, Y) -> float:
    """Squared Hausdorff distance from ``X`` to a one-token sequence ``Y``."""
    Y = as_sequence(Y)
    if Y.shape[0] != 1:
        raise ValueError("the target must contain exactly one token")
    X = as_sequence(X)
    return float(np.max(np.sum((X - Y[0]) ** 2, axis=1)))


def kappa(theta) -> float:
    theta = np.asarray(theta, dtype=float)
    return float(theta @ theta)


def _forward(p, X):
    pre = X @ p["U"].T + p["b"]
    H = np.maximum(pre, 0.0)
    Z = p["eta"] * X + H @ p["W"].T
    S = (Z @ p["A"].T) @ Z.T
    E = np.exp((S - S.max(axis=1, keepdims=True)) / TAU)
    P = E / E.sum(axis=1, keepdims=True)
    M = P @ Z
    out = p["rho"] * Z + M @ p["V"].T
    return out, (pre, H, Z, P, M)


def data_fit(theta, D: Dataset) -> float:
    p = unpack(theta, D.d)
    return float(np.mean([loss_f(_forward(p, X)[0], Y) for X, Y in D.pairs()]))


def objective(theta, D: Dataset, epsilon: float) -> float:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return data_fit(theta, D) + epsilon * kappa(theta)


def _data_grad(theta, D: Dataset, data_weight: float = 1.0) -> np.ndarray:
    p = unpack(theta, D.d)
    g = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in p.items()}
    for X, Y in D.pairs():
        out, (pre, H, Z, P, M) = _forward(p, X)
        r = out - Y[0]
        i = int(np.argmax(np.sum(r * r, axis=1)))
        G = np.zeros_like(out)
        G[i] = 2.0 * r[i] * data_weight / D.N
        g["rho"] += float(np.sum(G * Z))
        g["V"] += G.T @ M
        dM = G @ p["V"]
        dZ = p["rho"] * G + P.T @ dM
        dP = dM @ Z.T
        dS = P * (dP - np.sum(dP * P, axis=1, keepdims=True)) / TAU
        A = p["A"]
        dZ += dS @ Z @ A + dS.T @ Z @ A.T
        g["A"] += Z.T @ dS.T @ Z
        g["eta"] += float(np.sum(dZ * X))
        g["W"] += dZ.T @ H
        dpre = (dZ @ p["W"]) * (pre > 0)
        g["U"] += dpre.T @ X
        g["b"] += dpre.sum(axis=0)
    return pack(g)


def gradient(theta, D: Dataset, epsilon: float, mode: str = "analytic", h: Optional[float] = None,
             data_weight: float = 1.0) -> np.ndarray:
    """Gradient of the objective; ``mode="fd"`` uses central differences with ``h_i = h (1 + |theta_i|)``."""
    theta = np.asarray(theta, dtype=float)
    if mode == "analytic":
        return _data_grad(theta, D, data_weight) + 2.0 * epsilon * theta
    if mode != "fd":
        raise ValueError(f"unknown gradient mode {mode!r}")
    h = 1e-5 if h is None else h

    def F(t):
        val = data_weight * data_fit(t, D) + epsilon * kappa(t)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite objective at a probe point")
        return val

    g = np.empty_like(theta)
    for k in range(theta.size):
        step = h * (1.0 + abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += step
        tm[k] -= step
        g[k] = (F(tp) - F(tm)) / (2.0 * step)
    return g


def make_synthetic(seed: int, N: int = 3, n: int = 8, d: int = 4, max_tries: int = 100):
    """Planted one-block model with collapsing attention and the dataset it produces.

    ``rho = 0`` and ``A = 0`` make every output token the same point, so each
    target is a single token and the planted parameters fit the data exactly.
    Returns ``(theta_exact, dataset, kappa_exact)``.
    """
    if N < 1 or n < 1 or d < 2:
        raise ValueError("need N, n >= 1 and d >= 2")
    rng = np.random.default_rng(seed)
    p = {
        "eta": 1.0,
        "W": rng.normal(size=(d, HIDDEN)),
        "U": rng.normal(size=(HIDDEN, d)),
        "b": rng.normal(size=HIDDEN),
        "rho": 0.0,
        "V": rng.normal(size=(d, d)),
        "A": np.zeros((d, d)),
    }
    theta = pack(p)
    for _ in range(max_tries):
        inputs = [rng.normal(size=(n, d)) for _ in range(N)]
        outputs = [_forward(p, X)[0][:1] for X in inputs]
        D = Dataset(inputs, outputs)
        if validate_dataset(D) is None:
            return theta, D, kappa(theta)
    raise RuntimeError("could not draw a dataset satisfying the assumptions")


@dataclass
class TrainingConfig:
    epsilon: float
    steps: int = 5000
    step_size: float = 0.003
    seed: int = 0
    momentum: float = 0.9
    grad_mode: str = "analytic"
    h: float = 1e-5
    init_scale: float = 0.1
    clip: Optional[float] = 1.0  # max gradient norm per step; None disables

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not self.step_size > 0 or not self.h > 0:
            raise ValueError("step_size and h must be positive")


@dataclass
class TrainingRun:
    epsilon: float
    threshold: float
    loss: list = field(default_factory=list)
    data_fit: list = field(default_factory=list)
    kappa: list = field(default_factory=list)
    crossed_at: Optional[int] = None
    theta: Optional[np.ndarray] = None

    @property
    def label(self) -> str:
        # below the bound is necessary, not sufficient, for a global minimiser
        return "below-bound" if self.crossed_at is not None else "local-or-insufficient"

    @property
    def min_loss(self) -> float:
        return float(min(self.loss))

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "F_eps", "data_fit", "kappa"])
        for k, (F, f, kp) in enumerate(zip(self.loss, self.data_fit, self.kappa)):
            w.writerow([k, "%.17g" % F, "%.17g" % f, "%.17g" % kp])


def train(config: TrainingConfig, D: Dataset, theta_exact, theta0=None) -> TrainingRun:
    """Momentum gradient descent from a seeded random start (or ``theta0``)."""
    eps = config.epsilon
    threshold = eps * kappa(theta_exact)
    if theta0 is None:
        rng = np.random.default_rng(config.seed)
        theta = config.init_scale * rng.normal(size=n_params(D.d))
    else:
        theta = np.array(theta0, dtype=float)
    run = TrainingRun(eps, threshold)
    vel = np.zeros_like(theta)
    for k in range(config.steps + 1):
        fit = data_fit(theta, D)
        kp = kappa(theta)
        F = fit + eps * kp
        if not np.isfinite(F) or F > 1e12:
            raise TrainingDivergence(f"objective diverged at step {k}: {F}")
        run.loss.append(F)
        run.data_fit.append(fit)
        run.kappa.append(kp)
        if run.crossed_at is None and F <= threshold:
            run.crossed_at = k
        if k == config.steps:
            break
        g = gradient(theta, D, eps, config.grad_mode, config.h)
        gn = float(np.linalg.norm(g))
        if config.clip is not None and gn > config.clip:
            g = g * (config.clip / gn)
        vel = config.momentum * vel - config.step_size * g
        theta = theta + vel
    run.theta = theta
    return run
