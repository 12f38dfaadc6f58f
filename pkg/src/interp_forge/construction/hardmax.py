"""Exact interpolation with hardmax attention.

Four stages, each emitting blocks into one transformer:

1. separation: make the input sequences pairwise disjoint as token sets;
2. leader selection: move ``m_j`` tokens of sequence ``j`` into the
   apex/sphere configuration that hardmax attention with ``A = I`` preserves;
3. collapse: one attention block sends every non-leader onto its apex;
4. interpolation: hat layers move each surviving token to an output token.
"""

from __future__ import annotations

import numpy as np

from ..core import Block, Dataset, FeedForward, ScaledIdentity, SelfAttention, validate_dataset
from ..dynamics import HypothesisError, check_partial_hypotheses
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

__all__ = [
    "build_hardmax",
    "build_separation",
    "build_leader_selection",
    "build_collapse",
    "build_interpolation",
    "collapse_block",
    "hardmax_bound",
]


def hardmax_bound(m) -> int:
    return 2 * sum(m) + 2 * len(m) + 1


def _require_valid(D: Dataset) -> None:
    v = validate_dataset(D)
    if v is not None:
        raise ValueError(str(v))


def _keep(sa, Z, predicate):
    return sa, [sa(X) for X in Z]


def collapse_block(d: int) -> Block:
    """FF identity followed by ``X -> mean of hardmax cluster`` with ``A = I``."""
    return Block(FeedForward.identity(d), SelfAttention(0.0, ScaledIdentity(1.0), ScaledIdentity(1.0)))


def build_separation(D: Dataset):
    """Blocks making the inputs pairwise disjoint; returns ``(blocks, states, delta1)``."""
    _require_valid(D)
    b = Builder(D.inputs, ConstructionReport("hardmax", d=D.d))
    delta1 = run_separation(b, _keep, SelfAttention.identity())
    return b.blocks, b.states, delta1


def build_leader_selection(states, m):
    """Returns ``(blocks, placed states, placement plan)``."""
    b = Builder(states, ConstructionReport("hardmax", d=states[0].shape[1]))
    plan = run_placement(b, list(m), SelfAttention.identity())
    return b.blocks, b.states, plan


def check_placed(states, plan) -> None:
    for j, X in enumerate(states):
        try:
            check_partial_hypotheses(X, plan.leaders[j], plan.radii[j])
        except HypothesisError as exc:
            raise ConstructionError(f"sequence {j}: {exc}") from exc


def build_collapse(states=None, plan=None, d=None):
    """The collapse block; with ``states`` and ``plan`` the lemma hypotheses are checked first.

    Returns the block, or ``(block, collapsed states)`` when states are given.
    """
    if states is None:
        if d is None:
            raise ValueError("need either states or the dimension d")
        return collapse_block(d)
    d = states[0].shape[1]
    blk = collapse_block(d)
    if plan is not None:
        check_placed(states, plan)
    out = [blk(X) for X in states]
    if plan is not None:
        for j, Y in enumerate(out):
            k = unique_points(Y, 1e-12 * coord_scale(out)).shape[0]
            if k != len(plan.leaders[j]):
                raise ConstructionError(f"sequence {j} collapsed to {k} points, expected {len(plan.leaders[j])}")
    return blk, out


def build_interpolation(states, outputs, slack: int = 0):
    b = Builder(states, ConstructionReport("hardmax", d=states[0].shape[1]))
    run_interpolation(b, [np.asarray(Y, dtype=float) for Y in outputs], SelfAttention.identity(), slack)
    return b.blocks


def build_hardmax(D: Dataset):
    """Returns ``(transformer, report)``; raises if the result does not interpolate within 1e-9."""
    _require_valid(D)
    m = D.m
    rep = ConstructionReport("hardmax", bound_L=hardmax_bound(m), sum_m=sum(m), d=D.d)
    rep.extras["_inputs"] = [X.copy() for X in D.inputs]
    b = Builder(D.inputs, rep)
    ident = SelfAttention.identity()
    b.snapshot("input")
    rep.extras["delta1"] = run_separation(b, _keep, ident)
    b.snapshot("separation")
    plan = run_placement(b, m, ident)
    b.snapshot("leader_selection")
    rep.extras["radii"] = plan.radii
    rep.extras["leaders"] = plan.leaders
    blk, out = build_collapse(b.states, plan)
    b.push("collapse", blk, "hardmax mean with A = I", out)
    b.snapshot("collapse")
    slack = rep.bound_L - len(b.blocks) - sum(m)
    rep.extras["detours"] = run_interpolation(b, D.outputs, ident, slack)
    b.snapshot("interpolation")
    T = finalize(b, D.outputs)
    return T, rep
