"""Pieces shared by the hardmax and softmax constructions."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, List, Optional

import numpy as np

from ..core import (
    Block,
    FeedForward,
    RankOneSym,
    ScaledIdentity,
    SelfAttention,
    Transformer,
    _pairwise_dist,
    hausdorff_distance,
    param_count,
)
from ..geometry import GeometryError, choose_leader_ff, extreme_certificate, hat_ff, unique_points


class ConstructionError(RuntimeError):
    pass


# points closer than this (relative to the coordinate scale) are treated as one point
MERGE_RTOL = 1e-11
# sequences closer than this are treated as overlapping during separation
OVERLAP_RTOL = 1e-6


def coord_scale(states) -> float:
    return 1.0 + max(float(np.abs(X).max()) for X in states)


def apply_all(layer, states) -> list:
    return [layer(X) for X in states]


# --------------------------------------------------------------------------
# report


@dataclass
class ConstructionReport:
    mode: str
    ledger: list = field(default_factory=list)
    intermediate_states: dict = field(default_factory=dict)
    L: int = 0
    P: int = 0
    bound_L: int = 0
    sum_m: int = 0
    d: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def bound_P_coeff(self) -> float:
        return self.P / (self.d * self.sum_m)

    def record(self, step: str, block: Block, note: str = "") -> None:
        ff, sa = block.ff, block.sa
        self.ledger.append(
            {
                "step": step,
                "ff_width": ff.width,
                "ff_shapes": {"W": list(ff.W.shape), "U": list(ff.U.shape), "b": list(ff.b.shape)},
                "sa_kind": sa.kind,
                "tau": sa.tau,
                "note": note,
            }
        )

    def blocks_per_step(self) -> dict:
        out = {}
        for e in self.ledger:
            out[e["step"]] = out.get(e["step"], 0) + 1
        return out

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "L": self.L,
            "P": self.P,
            "bound_L": self.bound_L,
            "bound_P_coeff": self.bound_P_coeff,
            "blocks_per_step": self.blocks_per_step(),
            "ledger": self.ledger,
            "intermediate_states": {
                k: [X.tolist() for X in v] for k, v in self.intermediate_states.items()
            },
            "extras": _jsonable(self.extras),
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


class Builder:
    """Accumulates blocks while tracking the current states of all sequences."""

    def __init__(self, inputs, report: ConstructionReport):
        self.states = [np.array(X, dtype=float) for X in inputs]
        self.blocks: List[Block] = []
        self.report = report
        self.d = self.states[0].shape[1]

    def push(self, step: str, block: Block, note: str = "", states=None) -> None:
        self.blocks.append(block)
        self.report.record(step, block, note)
        self.states = states if states is not None else apply_all(block, self.states)

    def replace_last_sa(self, sa: SelfAttention, note: str, states) -> None:
        blk = self.blocks[-1]
        self.blocks[-1] = Block(blk.ff, sa)
        entry = self.report.ledger[-1]
        entry.update(sa_kind=sa.kind, tau=sa.tau, note=(entry["note"] + "; " + note).strip("; "))
        self.states = states

    def snapshot(self, step: str) -> None:
        self.report.intermediate_states[step] = [X.copy() for X in self.states]

    def union(self) -> np.ndarray:
        allx = np.vstack(self.states)
        return unique_points(allx, MERGE_RTOL * coord_scale(self.states))

    def hat_block(self, source, target, identity_sa: SelfAttention) -> Block:
        """Block whose FF moves the point at ``source`` (in every sequence) to ``target``."""
        pts = self.union()
        dist = np.linalg.norm(pts - source, axis=1)
        i = int(np.argmin(dist))
        if dist[i] > MERGE_RTOL * coord_scale(self.states) * 10:
            raise ConstructionError("hat source is not a current token")
        try:
            ff = hat_ff(pts, i, target)
        except GeometryError as exc:
            raise ConstructionError(str(exc)) from exc
        return Block(ff, identity_sa)

    def transformer(self) -> Transformer:
        return Transformer(tuple(self.blocks), self.d)


def finalize(builder: Builder, outputs, tol: float = 1e-9) -> Transformer:
    T = builder.transformer()
    rep = builder.report
    rep.L = len(T)
    rep.P = param_count(T)
    dists = []
    for X, Y in zip(builder.report.extras.pop("_inputs"), outputs):
        dists.append(hausdorff_distance(T(X), Y))
    rep.extras["final_distances"] = dists
    if rep.L > rep.bound_L:
        raise ConstructionError(f"block count {rep.L} exceeds the bound {rep.bound_L}")
    if max(dists) > tol:
        raise ConstructionError(f"interpolation failed: per-sequence distances {dists}")
    return T


# --------------------------------------------------------------------------
# separation


def _alpha_candidates(max_den: int = 9) -> list:
    seen = []
    for q in range(2, max_den + 1):
        for p in range(1, q):
            f = Fraction(p, q)
            if f not in seen:
                seen.append(f)
    # 1/2 first, then the rest by denominator
    return [float(f) for f in seen]


ALPHAS = _alpha_candidates()


def _min_cross(X, Y) -> float:
    return float(_pairwise_dist(X, Y).min())


def _min_within(X) -> float:
    if X.shape[0] < 2:
        return np.inf
    D = _pairwise_dist(X, X)
    np.fill_diagonal(D, np.inf)
    return float(D.min())


def separation_score(states, required_pairs) -> float:
    """Smallest of: cross distances on required pairs, within-sequence gaps, pairwise Hausdorff gaps."""
    s = np.inf
    for j, k in required_pairs:
        s = min(s, _min_cross(states[j], states[k]))
    for X in states:
        s = min(s, _min_within(X))
    N = len(states)
    for j in range(N):
        for k in range(j):
            s = min(s, hausdorff_distance(states[j], states[k]))
    return s


def leader_attention(alpha: float, v: np.ndarray, tau: Optional[float] = None) -> SelfAttention:
    return SelfAttention(1.0 - alpha, ScaledIdentity(alpha), RankOneSym(v, 1), tau)


def _pick_alpha(Z, v, required_pairs):
    best = None
    scale = coord_scale(Z)
    for alpha in ALPHAS:
        sa = leader_attention(alpha, v)
        out = apply_all(sa, Z)
        sc = separation_score(out, required_pairs)
        if best is None or sc > best[0]:
            best = (sc, alpha, out)
    if best[0] <= 1e-9 * scale:
        raise ConstructionError(f"no mixing weight keeps the sequences apart (best score {best[0]:.3g})")
    return best


def _overlaps(states, k, j, tol) -> bool:
    return _min_cross(states[k], states[j]) <= tol


def _fresh_tokens(states, k, prev, tol) -> list:
    if not prev:
        return list(range(states[k].shape[0]))
    P = np.vstack([states[j] for j in prev])
    D = _pairwise_dist(states[k], P).min(axis=1)
    return [int(i) for i in np.flatnonzero(D > tol)]


def _leader_layer(states, jstar, candidates):
    """Width-1 (extreme candidate) or width-4 (hat + shift) layer with prescribed leader in ``jstar``.

    Tries extreme candidates by decreasing certificate margin, then falls back to
    lifting the first candidate above every token with a hat layer.
    """
    X = states[jstar]
    certs = []
    for i in candidates:
        c = extreme_certificate(X, i)
        if c is not None:
            certs.append((c.margin / np.linalg.norm(c.v), i))
    certs.sort(key=lambda t: -t[0])
    for _, i in certs:
        try:
            ff, v, leaders = choose_leader_ff(states, jstar, i)
            return ff, v, leaders, "extreme leader"
        except GeometryError:
            continue
    allx = np.vstack(states)
    y = allx.max(axis=0) + 1.0
    pts = unique_points(allx, MERGE_RTOL * coord_scale(states))
    for i in candidates:
        idx = int(np.argmin(np.linalg.norm(pts - X[i], axis=1)))
        try:
            hat = hat_ff(pts, idx, y)
            lifted = apply_all(hat, states)
            shift, v, leaders = choose_leader_ff(lifted, jstar, i)
        except GeometryError:
            continue
        return hat.stack(shift), v, leaders, "lifted leader (width 4)"
    raise ConstructionError(f"no usable leader in sequence {jstar}")


def run_separation(builder: Builder, sa_hook: Callable, identity_sa: SelfAttention) -> float:
    """Make all sequences pairwise disjoint; returns half the smallest cross-sequence distance.

    ``sa_hook(sa, Z, predicate)`` returns ``(sa_used, states)``; the hardmax
    builder uses the layer as is, the softmax builder calibrates a temperature.
    """
    states = builder.states
    N = len(states)
    shift = float(max(np.abs(X).max() for X in states)) + 1.0
    builder.push("separation", Block(FeedForward.shift(np.full(builder.d, shift)), identity_sa), "global shift")

    def block(jstar, candidates, required, note):
        Z_in = builder.states
        ff, v, leaders, how = _leader_layer(Z_in, jstar, candidates)
        Z = apply_all(ff, Z_in)
        score, alpha, _ = _pick_alpha(Z, v, required)
        sa = leader_attention(alpha, v)
        pred = lambda S: separation_score(S, required)  # noqa: E731
        sa, out = sa_hook(sa, Z, pred)
        builder.push("separation", Block(ff, sa), f"{note}; {how}; alpha={alpha}", out)

    for k in range(1, N):
        prev = list(range(k))
        for _round in range(3):
            tol = OVERLAP_RTOL * coord_scale(builder.states)
            over = [j for j in prev if _overlaps(builder.states, k, j, tol)]
            if not over:
                break
            all_pairs = [(a, b) for a in range(k) for b in range(a)]
            fresh = _fresh_tokens(builder.states, k, prev, tol)
            if fresh:
                block(k, fresh, all_pairs + [(k, j) for j in prev], f"separate sequence {k}")
                continue
            S = builder.states
            partial = [j for j in over if _fresh_tokens(S, j, [k], tol)]
            if partial:
                j = partial[0]
                block(j, _fresh_tokens(S, j, [k], tol), all_pairs + [(k, j)], f"prepare sequence {k} via {j}")
            else:
                # every overlapping sequence lies inside sequence k: lead with an extreme token of k
                ext = [i for i in range(S[k].shape[0]) if extreme_certificate(S[k], i) is not None]
                ff, v, leaders, how = _leader_layer(S, k, ext)
                Z = apply_all(ff, S)
                lead_tok = Z[k][leaders[k]]
                sep = [j for j in over if np.min(np.linalg.norm(Z[j] - lead_tok, axis=1)) > tol]
                required = all_pairs + [(k, j) for j in sep]
                score, alpha, _ = _pick_alpha(Z, v, required)
                sa, out = sa_hook(leader_attention(alpha, v), Z, lambda s: separation_score(s, required))
                builder.push("separation", Block(ff, sa), f"prepare sequence {k}; {how}; alpha={alpha}", out)
        else:
            raise ConstructionError(f"sequence {k} still overlaps an earlier sequence")
    S = builder.states
    gaps = [_min_cross(S[a], S[b]) for a in range(N) for b in range(a)]
    delta1 = 0.5 * min(gaps) if gaps else np.inf
    if gaps and delta1 <= 0:
        raise ConstructionError("separation left two sequences touching")
    return delta1


# --------------------------------------------------------------------------
# leader placement


@dataclass
class Placement:
    a1: float
    a2: float
    radii: list
    leaders: list  # per sequence, token indices; first one goes to the apex R_j 1_d
    targets: list  # per sequence, array (m_j, d)
    w: np.ndarray


def _orthonormal_pair(d: int):
    e = np.ones(d) / np.sqrt(d)
    f = np.zeros(d)
    f[0], f[1] = 1.0, -1.0
    f -= (f @ e) * e
    return e, f / np.linalg.norm(f)


def plan_placement(states, m, w=None) -> Placement:
    d = states[0].shape[1]
    allx = np.vstack(states)
    a1, a2 = float(allx.min()), float(allx.max())
    if a1 <= 0:
        raise ConstructionError("tokens must sit in the positive orthant before placement")
    e, f = _orthonormal_pair(d)
    theta_max = np.arctan(np.sqrt(2.0 / d))
    c_min = float(np.cos(0.9 * theta_max))
    ratio = 1.05 / c_min
    t0 = a2 + 3.0
    radii, leaders, targets = [], [], []
    for j, (X, mj) in enumerate(zip(states, m)):
        t = t0 * ratio**j
        radii.append(t)
        leaders.append(list(range(mj)))
        T = [t * np.ones(d)]
        k = mj - 1
        cosines = [1.0] if k == 1 else list(np.linspace(1.0, c_min, k)) if k > 1 else []
        for c in cosines:
            s = np.sqrt(max(0.0, 1.0 - c * c))
            T.append(-t * (c * e + s * f))
        targets.append(np.array(T))
    if w is None:
        w = -e
    return Placement(a1, a2, radii, leaders, targets, w)


def run_placement(builder: Builder, m, identity_sa: SelfAttention) -> Placement:
    allx = np.vstack(builder.states)
    u = (1.0 + abs(float(allx.min()))) * np.ones(builder.d)
    builder.push("leader_selection", Block(FeedForward.shift(u), identity_sa), "shift into the positive cube")
    plan = plan_placement(builder.states, m)
    for j in range(len(builder.states)):
        for r, i in enumerate(plan.leaders[j]):
            src = builder.states[j][i].copy()
            blk = builder.hat_block(src, plan.targets[j][r], identity_sa)
            builder.push("leader_selection", blk, f"sequence {j} leader {r}")
    return plan


# --------------------------------------------------------------------------
# interpolation


def _lex_sorted(P: np.ndarray) -> np.ndarray:
    return P[np.lexsort(P.T[::-1])]


def run_interpolation(builder: Builder, outputs, identity_sa: SelfAttention, slack: int) -> int:
    """Move every collapsed token to its output; returns the number of detour blocks used."""
    scale = coord_scale(builder.states + list(outputs))
    tol = MERGE_RTOL * scale * 10
    moves = []
    for j, Y in enumerate(outputs):
        cur = _lex_sorted(unique_points(builder.states[j], tol))
        if cur.shape[0] != Y.shape[0]:
            raise ConstructionError(f"sequence {j} has {cur.shape[0]} distinct tokens, expected {Y.shape[0]}")
        for z, y in zip(cur, _lex_sorted(np.asarray(Y, dtype=float))):
            moves.append([z.copy(), y.copy()])
    detours = 0
    pending = moves

    def blocked(mv, others):
        return any(np.linalg.norm(mv[1] - o[0]) <= tol and np.linalg.norm(mv[0] - o[0]) > tol for o in others)

    while pending:
        for idx, mv in enumerate(pending):
            if not blocked(mv, pending):
                break
        else:
            if detours >= slack:
                raise ConstructionError("interpolation needs more detours than the block budget allows")
            mv = pending[0]
            allp = np.vstack(builder.states + [np.array([p[1] for p in pending])])
            park = allp.max(axis=0) + 2.0
            builder.push("interpolation", builder.hat_block(mv[0], park, identity_sa), "detour")
            mv[0] = park
            detours += 1
            continue
        src, dst = pending.pop(idx)
        builder.push("interpolation", builder.hat_block(src, dst, identity_sa), "move to output")
    return detours
