"""JSON/CSV formats and the random dataset generator.

Floats are written with ``repr`` (shortest round-trip form), so parsing a
serialized object gives back bit-identical parameters.
"""

from __future__ import annotations

import json
from typing import Optional, Union

import numpy as np

from .core import (
    Block,
    Dataset,
    Dense,
    FeedForward,
    RankOneSym,
    ScaledIdentity,
    SelfAttention,
    Transformer,
    validate_dataset,
)
from .dynamics import DynamicsConfig


class InputError(ValueError):
    """A file does not match its schema; the message names the offending field."""


def dumps(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


# --------------------------------------------------------------------------
# helpers


def _array(value, path: str, ndim: int) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: not a numeric array ({exc})") from None
    if arr.ndim != ndim:
        raise InputError(f"{path}: expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{path}: non-finite entry")
    return arr


def _get(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise InputError(f"{path}: missing field {key!r}")
    return obj[key]


# --------------------------------------------------------------------------
# datasets


def dataset_to_json(D: Dataset) -> dict:
    return {"d": D.d, "pairs": [{"input": X.tolist(), "output": Y.tolist()} for X, Y in D.pairs()]}


def dataset_from_json(obj, validate: bool = True) -> Dataset:
    d = _get(obj, "d", "$")
    if not isinstance(d, int) or isinstance(d, bool):
        raise InputError("$.d: expected an integer")
    pairs = _get(obj, "pairs", "$")
    if not isinstance(pairs, list) or not pairs:
        raise InputError("$.pairs: expected a non-empty list")
    ins, outs = [], []
    for j, p in enumerate(pairs):
        for key, acc in (("input", ins), ("output", outs)):
            path = f"$.pairs[{j}].{key}"
            arr = _array(_get(p, key, f"$.pairs[{j}]"), path, 2)
            if arr.shape[0] == 0:
                raise InputError(f"{path}: empty sequence")
            if arr.shape[1] != d:
                raise InputError(f"{path}: tokens have dimension {arr.shape[1]}, header says d={d}")
            acc.append(arr)
    D = Dataset(ins, outs)
    if validate:
        v = validate_dataset(D)
        if v is not None:
            raise InputError(f"dataset violates {v.clause}: {v.message}")
    return D


def random_dataset(rng: np.random.Generator, d: int, N: int, n_max: int, m_policy: Union[str, int] = "uniform",
                   overlap: float = 0.5, lattice: bool = False, max_tries: int = 1000) -> Dataset:
    """Seeded random dataset meeting the assumptions.

    With probability ``overlap`` a sequence draws some of its tokens from a
    small shared pool, so different inputs share tokens and the separation
    stage has work to do.  ``m_policy`` is ``"uniform"`` (``m ~ U{1..n}``) or
    a fixed integer (capped at ``n``).  ``lattice`` draws input tokens from the
    integer grid ``{-2..2}^d``, which produces collinear and tied configurations.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    if N < 1 or n_max < 1:
        raise ValueError("N and n_max must be positive")
    def draw(k):
        return rng.integers(-2, 3, size=(k, d)).astype(float) if lattice else rng.normal(size=(k, d))

    pool = draw(max(2, n_max))
    ins, outs, keys = [], [], set()
    tries = 0
    while len(ins) < N:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("rejection sampling cap exceeded")
        n = int(rng.integers(1, n_max + 1))
        if rng.random() < overlap:
            k = int(rng.integers(1, min(n, pool.shape[0]) + 1))
            X = np.vstack([pool[rng.choice(pool.shape[0], k, replace=False)], draw(n - k)])
        else:
            X = draw(n)
        key = frozenset(map(tuple, X))
        if key in keys or len(key) != n:
            continue
        m = int(rng.integers(1, n + 1)) if m_policy == "uniform" else min(int(m_policy), n)
        ins.append(X)
        outs.append(rng.normal(size=(m, d)))
        keys.add(key)
    D = Dataset(ins, outs)
    assert validate_dataset(D) is None
    return D


# --------------------------------------------------------------------------
# transformers


def matrix_to_json(M) -> dict:
    if isinstance(M, ScaledIdentity):
        return {"scaled_identity": M.xi}
    if isinstance(M, RankOneSym):
        return {"rank_one": {"v": M.v.tolist(), "sign": M.sign}}
    return {"dense": M.M.tolist()}


def matrix_from_json(obj, path: str):
    if not isinstance(obj, dict) or len(obj) != 1:
        raise InputError(f"{path}: expected one of dense / scaled_identity / rank_one")
    (tag, val), = obj.items()
    if tag == "scaled_identity":
        if not isinstance(val, (int, float)) or isinstance(val, bool) or not np.isfinite(val):
            raise InputError(f"{path}.scaled_identity: expected a finite number")
        return ScaledIdentity(float(val))
    if tag == "rank_one":
        v = _array(_get(val, "v", f"{path}.rank_one"), f"{path}.rank_one.v", 1)
        sign = _get(val, "sign", f"{path}.rank_one")
        if sign not in (1, -1):
            raise InputError(f"{path}.rank_one.sign: must be 1 or -1")
        return RankOneSym(v, sign)
    if tag == "dense":
        return Dense(_array(val, f"{path}.dense", 2))
    raise InputError(f"{path}: unknown matrix tag {tag!r}")


def transformer_to_json(T: Transformer) -> dict:
    blocks = []
    for blk in T.blocks:
        ff, sa = blk.ff, blk.sa
        kind = "hardmax" if sa.tau is None else {"softmax": {"tau": sa.tau}}
        blocks.append(
            {
                "ff": {"eta": ff.eta, "W": ff.W.tolist(), "U": ff.U.tolist(), "b": ff.b.tolist()},
                "sa": {"rho": sa.rho, "V": matrix_to_json(sa.V), "A": matrix_to_json(sa.A), "kind": kind},
            }
        )
    return {"d": T.d, "blocks": blocks}


def transformer_from_json(obj) -> Transformer:
    d = _get(obj, "d", "$")
    raw = _get(obj, "blocks", "$")
    if not isinstance(raw, list):
        raise InputError("$.blocks: expected a list")
    blocks = []
    for k, b in enumerate(raw):
        p = f"$.blocks[{k}]"
        ff, sa = _get(b, "ff", p), _get(b, "sa", p)
        try:
            layer = FeedForward(
                float(_get(ff, "eta", p + ".ff")),
                _array(_get(ff, "W", p + ".ff"), p + ".ff.W", 2),
                _array(_get(ff, "U", p + ".ff"), p + ".ff.U", 2),
                _array(_get(ff, "b", p + ".ff"), p + ".ff.b", 1),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"{p}.ff: {exc}") from None
        kind = _get(sa, "kind", p + ".sa")
        if kind == "hardmax":
            tau = None
        elif isinstance(kind, dict) and "softmax" in kind:
            tau = _get(kind["softmax"], "tau", p + ".sa.kind.softmax")
            if not isinstance(tau, (int, float)) or not tau > 0:
                raise InputError(f"{p}.sa.kind.softmax.tau: must be a positive number")
        else:
            raise InputError(f"{p}.sa.kind: expected 'hardmax' or {{'softmax': {{'tau': ...}}}}")
        attn = SelfAttention(
            float(_get(sa, "rho", p + ".sa")),
            matrix_from_json(_get(sa, "V", p + ".sa"), p + ".sa.V"),
            matrix_from_json(_get(sa, "A", p + ".sa"), p + ".sa.A"),
            tau,
        )
        blocks.append(Block(layer, attn))
    try:
        return Transformer(tuple(blocks), d)
    except ValueError as exc:
        raise InputError(f"$: {exc}") from None


# --------------------------------------------------------------------------
# dynamics inputs


def dynamics_config_from_json(obj) -> DynamicsConfig:
    gamma = _get(obj, "gamma", "$")
    A = matrix_from_json(_get(obj, "A", "$"), "$.A")
    try:
        return DynamicsConfig(float(gamma), A)
    except (TypeError, ValueError) as exc:
        raise InputError(f"$: {exc}") from None


def dynamics_config_to_json(cfg: DynamicsConfig) -> dict:
    return {"gamma": cfg.gamma, "A": matrix_to_json(cfg.A)}


def state_from_json(obj) -> np.ndarray:
    tokens = obj.get("tokens") if isinstance(obj, dict) else obj
    if tokens is None:
        raise InputError("$: missing field 'tokens'")
    return _array(tokens, "$.tokens", 2)


def load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def write_text(path: Optional[str], text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)
