"""Exact interpolation with softmax attention.

Softmax weights are never exactly one-hot, so attention alone only brings
tokens close to where hardmax would put them.  Each attention layer gets its
own temperature, halved until the layer's geometric goal holds with a margin.
Exactness is restored by non-residual width-3 ReLU layers that map a whole
ball of tokens to the origin while projecting everything else injectively
onto a line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..core import Block, Dataset, FeedForward, ScaledIdentity, SelfAttention, validate_dataset
from ..geometry import unique_points
from .common import (
    Builder,
    ConstructionError,
    ConstructionReport,
    coord_scale,
    finalize,
    run_interpolation,
    run_placement,
    run_separation,
)
from .hardmax import check_placed

__all__ = [
    "CalibrationError",
    "SoftmaxPlan",
    "calibrate_tau",
    "collapse_ff",
    "build_softmax",
    "softmax_bound",
]

MAX_HALVINGS = 60


class CalibrationError(ConstructionError):
    pass


def softmax_bound(m) -> int:
    return 2 * sum(m) + 3 * len(m)


@dataclass
class SoftmaxPlan:
    delta: float
    w: np.ndarray
    radii: list
    zeta: float
    taus: list = field(default_factory=list)
    collapse_constants: list = field(default_factory=list)  # (s, c_pos, c_neg) per iteration
    leader_projections: list = field(default_factory=list)

    @property
    def tau_min(self) -> float:
        return min(self.taus) if self.taus else 1.0

    def projection_separation(self) -> float:
        """Smallest ``|<w, q - q'>|`` over distinct placed leaders."""
        p = np.sort(np.asarray(self.leader_projections))
        return float(np.min(np.diff(p))) if p.size > 1 else np.inf

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "w": self.w.tolist(),
            "R": self.radii,
            "zeta": self.zeta,
            "taus": self.taus,
            "tau_min": self.tau_min,
            "collapse_constants": [list(c) for c in self.collapse_constants],
        }


def calibrate_tau(layer, states, predicate: Callable, fixed_tau: Optional[float] = None) -> float:
    """Temperature at which the softmax version of ``layer`` meets ``predicate``.

    ``layer`` is a hardmax :class:`SelfAttention` (or a :class:`Block` whose FF
    is applied first).  ``predicate(outputs)`` returns a margin; the softmax
    margin must be positive and at least half the hardmax margin.  Starts at
    ``tau = 1`` and halves; with ``fixed_tau`` only that value is tried.
    """
    if isinstance(layer, Block):
        states = [layer.ff(X) for X in states]
        layer = layer.sa
    if layer.A.is_zero() or layer.V.is_zero():
        return 1.0 if fixed_tau is None else fixed_tau
    target = 0.5 * predicate([layer.with_tau(None)(X) for X in states])
    if not target > 0:
        raise CalibrationError("the hardmax layer already fails its own postcondition")
    taus = [fixed_tau] if fixed_tau is not None else [0.5**k for k in range(MAX_HALVINGS + 1)]
    margin = -np.inf
    for tau in taus:
        sa = layer.with_tau(tau)
        margin = predicate([sa(X) for X in states])
        if margin >= target and margin > 0:
            return tau
    raise CalibrationError(f"no temperature reached the required margin {target:.3g} (last margin {margin:.3g})")


def collapse_ff(w, s: float, c_pos: float, c_neg: float) -> FeedForward:
    """Non-residual width-3 layer ``x -> g(<-w, x>) w``.

    ``g`` vanishes for projections ``p >= s + c_pos`` (so a whole ball there
    lands exactly on the origin), rises linearly back to ``0`` on ``[s, s + c_pos]``
    and is strictly decreasing on ``(-inf, s]`` with a zero at ``s - c_neg``.
    """
    if not (c_pos > 0 and c_neg > 0):
        raise ValueError("c_pos and c_neg must be positive")
    w = np.asarray(w, dtype=float)
    W = np.stack([-w, (c_pos / c_neg + 1.0) * w, -(c_pos / (2.0 * c_neg)) * w], axis=1)
    U = np.stack([w, w, w])
    b = np.array([s + c_pos, s, s - c_neg])
    return FeedForward(0.0, W, U, b)


def _cloud_membership(m, n):
    """Per sequence: indices of tokens that end on the apex (all except the sphere leaders)."""
    return [list(range(0, 1)) + list(range(mj, nj)) for mj, nj in zip(m, n)]


def _run_collapse_ff(builder: Builder, plan: SoftmaxPlan, m, identity_sa):
    w = plan.w
    n = [X.shape[0] for X in builder.states]
    clouds = _cloud_membership(m, n)
    remaining = list(range(len(builder.states)))
    for _ in range(len(builder.states)):
        proj = [X @ (-w) for X in builder.states]
        lo = {j: float(proj[j][clouds[j]].min()) for j in remaining}
        target = max(remaining, key=lambda j: lo[j])
        rest = [j for j in remaining if j != target]
        others = []
        for j, p in enumerate(proj):
            mask = np.ones(p.size, bool)
            if j == target:
                mask[clouds[j]] = False
            others.append(p[mask])
        others = np.concatenate(others)
        top_rest = float(others.max()) if others.size else lo[target] - 1.0
        G = lo[target] - top_rest
        if not G > 0:
            raise ConstructionError("the farthest ball is not separated from the rest along the collapse line")
        s = top_rest + G / 4.0
        c = G / 2.0
        cloud_pts = np.concatenate([proj[j][clouds[j]] for j in rest]) if rest else np.array([])
        settled = np.concatenate([np.delete(proj[j], clouds[j]) for j in range(len(proj))] + [
            proj[j][clouds[j]] for j in range(len(proj)) if j not in remaining
        ])
        if cloud_pts.size:
            hi = float(settled.max()) if settled.size else float(cloud_pts.min()) - 2.0 * G
            lo_c = float(cloud_pts.min())
            if not hi < lo_c:
                raise ConstructionError("uncollapsed balls are interleaved with settled points")
            zero_at = 0.5 * (hi + lo_c)
        else:
            hi = float(settled.max()) if settled.size else s - 2.0 * c
            zero_at = 0.5 * (hi + s)
        c_neg = s - zero_at
        ff = collapse_ff(w, s, c, c_neg)
        builder.push("collapse", Block(ff, identity_sa), f"collapse sequence {target} to the origin")
        plan.collapse_constants.append((s, c, c_neg))
        if np.any(builder.states[target][clouds[target]] != 0.0):
            raise ConstructionError(f"ball of sequence {target} did not land exactly on the origin")
        remaining.remove(target)


def build_softmax(D: Dataset, tau: Optional[float] = None, check_global_tau: bool = True):
    """Returns ``(transformer, report, plan)``.

    With ``tau`` every attention layer uses that temperature (its postcondition
    is still checked).  Otherwise temperatures are calibrated per layer and,
    when ``check_global_tau`` is set, the whole construction is repeated at the
    smallest of them; the outcome is stored in ``report.extras["global_tau"]``.
    """
    v = validate_dataset(D)
    if v is not None:
        raise ValueError(str(v))
    m = D.m
    rep = ConstructionReport("softmax", bound_L=softmax_bound(m), sum_m=sum(m), d=D.d)
    rep.extras["_inputs"] = [X.copy() for X in D.inputs]
    b = Builder(D.inputs, rep)
    ident = SelfAttention.identity(1.0)
    taus = []

    def calibrated(sa, Z, predicate):
        t = calibrate_tau(sa, Z, predicate, fixed_tau=tau)
        taus.append(t)
        soft = sa.with_tau(t)
        return soft, [soft(X) for X in Z]

    b.snapshot("input")
    rep.extras["delta1"] = run_separation(b, calibrated, ident)
    b.snapshot("separation")
    placement = run_placement(b, m, ident)
    check_placed(b.states, placement)
    rep.extras["radii"] = placement.radii
    rep.extras["leaders"] = placement.leaders

    w = placement.w
    q = []
    for j, T in enumerate(placement.targets):
        q.extend(T @ (-w))
    q = np.sort(np.array(q))
    gap = float(np.min(np.diff(q))) if q.size > 1 else 1.0
    delta = gap / 20.0
    plan = SoftmaxPlan(delta, w, placement.radii, gap / max(placement.radii), leader_projections=list(q))

    # attention collapse shares the block of the last leader move
    hard = SelfAttention(0.0, ScaledIdentity(1.0), ScaledIdentity(1.0))
    Z = b.states
    images = [hard(X) for X in Z]

    def in_balls(S):
        return 0.5 * delta - max(float(np.max(np.linalg.norm(Y - H, axis=1))) for Y, H in zip(S, images))

    soft, out = calibrated(hard, Z, in_balls)
    b.replace_last_sa(soft, "attention collapse", out)
    b.snapshot("leader_selection")
    _run_collapse_ff(b, plan, m, ident)
    for j, X in enumerate(b.states):
        k = unique_points(X, 1e-12 * coord_scale(b.states)).shape[0]
        if k != m[j]:
            raise ConstructionError(f"sequence {j} collapsed to {k} points, expected {m[j]}")
    b.snapshot("collapse")
    slack = rep.bound_L - len(b.blocks) - sum(m)
    rep.extras["detours"] = run_interpolation(b, D.outputs, ident, slack)
    b.snapshot("interpolation")
    T = finalize(b, D.outputs)
    plan.taus = taus
    rep.extras["taus"] = taus
    rep.extras["tau_min"] = plan.tau_min
    if tau is None and check_global_tau:
        try:
            T_glob, rep_glob, _ = build_softmax(D, tau=plan.tau_min, check_global_tau=False)
            rep.extras["global_tau"] = {
                "tau": plan.tau_min,
                "passed": True,
                "max_distance": max(rep_glob.extras["final_distances"]),
            }
        except ConstructionError as exc:
            rep.extras["global_tau"] = {"tau": plan.tau_min, "passed": False, "fallback": "per-layer", "reason": str(exc)}
    return T, rep, plan
