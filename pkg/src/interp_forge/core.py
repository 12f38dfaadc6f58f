"""Sequences, layers and transformers.

A sequence is a float array of shape ``(n, d)``; row ``i`` is token ``x_i``.
Sequences are compared as sets through the Hausdorff distance, so the row
order never matters for equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Dense",
    "ScaledIdentity",
    "RankOneSym",
    "FeedForward",
    "SelfAttention",
    "Block",
    "Transformer",
    "Dataset",
    "Violation",
    "relu",
    "ff_apply",
    "attention_scores",
    "hardmax_matrix",
    "softmax_matrix",
    "hardmax_weights",
    "softmax_weights",
    "sa_apply",
    "transformer_apply",
    "hausdorff_distance",
    "sequences_equal_as_sets",
    "param_count",
    "validate_dataset",
    "as_sequence",
    "TIE_RTOL",
]

# relative band for hardmax ties: ell is in C_i iff max - s_il <= TIE_RTOL * (1 + |max|)
TIE_RTOL = 1e-9


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameters must be finite")
    arr.setflags(write=False)
    return arr


def as_sequence(X) -> np.ndarray:
    """Coerce ``X`` to a ``(n, d)`` float array with n >= 1."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"a sequence needs shape (n, d) with n >= 1, got {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# attention / value matrices in the three shapes the constructions emit


@dataclass(frozen=True)
class Dense:
    M: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M", _frozen(self.M, 2))

    def rows(self, X: np.ndarray) -> np.ndarray:
        """Return ``X @ M.T``, i.e. ``M x_i`` for every row."""
        return X @ self.M.T

    def to_dense(self, d: int) -> np.ndarray:
        return np.array(self.M)

    def nnz(self) -> int:
        return int(np.count_nonzero(self.M))

    def is_zero(self) -> bool:
        return not np.any(self.M)


@dataclass(frozen=True)
class ScaledIdentity:
    xi: float

    def __post_init__(self):
        if not np.isfinite(self.xi):
            raise ValueError("scale must be finite")
        object.__setattr__(self, "xi", float(self.xi))

    def rows(self, X: np.ndarray) -> np.ndarray:
        return self.xi * X

    def to_dense(self, d: int) -> np.ndarray:
        return self.xi * np.eye(d)

    def nnz(self) -> int:
        return int(self.xi != 0.0)

    def is_zero(self) -> bool:
        return self.xi == 0.0


@dataclass(frozen=True)
class RankOneSym:
    """``sign * v v^T`` stored in factored form."""

    v: np.ndarray
    sign: int = 1

    def __post_init__(self):
        object.__setattr__(self, "v", _frozen(self.v, 1))
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        object.__setattr__(self, "sign", int(self.sign))

    def rows(self, X: np.ndarray) -> np.ndarray:
        return self.sign * np.outer(X @ self.v, self.v)

    def to_dense(self, d: int) -> np.ndarray:
        return self.sign * np.outer(self.v, self.v)

    def nnz(self) -> int:
        return int(np.count_nonzero(self.v))

    def is_zero(self) -> bool:
        return not np.any(self.v)


Matrix = Union[Dense, ScaledIdentity, RankOneSym]


# --------------------------------------------------------------------------
# layers


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class FeedForward:
    """Token-wise map ``x -> eta*x + W relu(U x + b)`` of width ``U.shape[0]``."""

    eta: float
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "W", _frozen(self.W, 2))
        object.__setattr__(self, "U", _frozen(self.U, 2))
        object.__setattr__(self, "b", _frozen(self.b, 1))
        width = self.U.shape[0]
        if width < 1 or self.W.shape[1] != width or self.b.shape[0] != width:
            raise ValueError(
                f"inconsistent widths: W {self.W.shape}, U {self.U.shape}, b {self.b.shape}"
            )
        if self.W.shape[0] != self.U.shape[1]:
            raise ValueError(f"W has {self.W.shape[0]} rows but U has {self.U.shape[1]} columns")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def width(self) -> int:
        return self.U.shape[0]

    @classmethod
    def identity(cls, d: int) -> "FeedForward":
        return cls(1.0, np.zeros((d, 1)), np.zeros((1, d)), np.zeros(1))

    @classmethod
    def shift(cls, u) -> "FeedForward":
        """Constant translation ``x -> x + u`` (``U = 0``, ``b = 1``)."""
        u = np.asarray(u, dtype=float)
        return cls(1.0, u[:, None], np.zeros((1, u.size)), np.ones(1))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.d:
            raise ValueError(f"token dimension {X.shape[-1]} does not match layer dimension {self.d}")
        return self.eta * X + relu(X @ self.U.T + self.b) @ self.W.T

    def stack(self, other: "FeedForward") -> "FeedForward":
        """Concatenate hidden units: ``x -> eta*x + W1 h1 + W2 h2``; keeps this layer's eta."""
        return FeedForward(
            self.eta,
            np.hstack([self.W, other.W]),
            np.vstack([self.U, other.U]),
            np.concatenate([self.b, other.b]),
        )


@dataclass(frozen=True)
class SelfAttention:
    """``SA_i(X) = rho x_i + V sum_l pi_il(X, A) x_l``.

    ``tau is None`` selects hardmax weights, otherwise softmax at temperature ``tau``.
    """

    rho: float
    V: Matrix
    A: Matrix
    tau: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "rho", float(self.rho))
        if self.tau is not None:
            if not (self.tau > 0 and np.isfinite(self.tau)):
                raise ValueError("softmax temperature must be positive and finite")
            object.__setattr__(self, "tau", float(self.tau))

    @property
    def kind(self) -> str:
        return "hardmax" if self.tau is None else "softmax"

    @classmethod
    def identity(cls, tau: Optional[float] = None) -> "SelfAttention":
        return cls(1.0, ScaledIdentity(0.0), ScaledIdentity(0.0), tau)

    def with_tau(self, tau: Optional[float]) -> "SelfAttention":
        return SelfAttention(self.rho, self.V, self.A, tau)

    def weights(self, X: np.ndarray) -> np.ndarray:
        S = attention_scores(X, self.A)
        return hardmax_matrix(S) if self.tau is None else softmax_matrix(S, self.tau)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.V.is_zero():
            # the weighted mean is multiplied by zero anyway
            return self.rho * X
        M = self.weights(X) @ X
        if isinstance(self.V, ScaledIdentity) and self.V.xi == 1.0 - self.rho:
            # same map, but a token equal to its cluster mean is returned bit-exactly
            return M + self.rho * (X - M)
        return self.rho * X + self.V.rows(M)


@dataclass(frozen=True)
class Block:
    ff: FeedForward
    sa: SelfAttention

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.sa(self.ff(X))


@dataclass(frozen=True)
class Transformer:
    blocks: tuple = ()
    d: Optional[int] = None

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        dims = {b.ff.d for b in blocks}
        if len(dims) > 1:
            raise ValueError(f"blocks disagree on the ambient dimension: {sorted(dims)}")
        if dims:
            (d,) = dims
            if self.d is not None and self.d != d:
                raise ValueError(f"declared d={self.d} but blocks have d={d}")
            object.__setattr__(self, "d", d)

    def __len__(self) -> int:
        return len(self.blocks)

    def __call__(self, X) -> np.ndarray:
        return transformer_apply(self, X)

    @property
    def max_width(self) -> int:
        return max((b.ff.width for b in self.blocks), default=0)


# --------------------------------------------------------------------------
# spec-level operations


def ff_apply(layer: FeedForward, x) -> np.ndarray:
    """Evaluate a feed-forward layer on one token (or a stack of tokens)."""
    return layer(np.asarray(x, dtype=float))


def attention_scores(X: np.ndarray, A: Matrix) -> np.ndarray:
    """Matrix of inner products ``S[i, l] = <A x_i, x_l>``."""
    X = np.asarray(X, dtype=float)
    if isinstance(A, RankOneSym):
        p = X @ A.v
        return A.sign * np.outer(p, p)
    return A.rows(X) @ X.T


def hardmax_matrix(S: np.ndarray, tie_rtol: float = TIE_RTOL) -> np.ndarray:
    top = S.max(axis=1, keepdims=True)
    mask = (top - S) <= tie_rtol * (1.0 + np.abs(top))
    return mask / mask.sum(axis=1, keepdims=True)


def softmax_matrix(S: np.ndarray, tau: float) -> np.ndarray:
    Z = (S - S.max(axis=1, keepdims=True)) / tau
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def hardmax_weights(X, A: Matrix, i: int) -> np.ndarray:
    """Row ``i`` of the hardmax attention matrix (0-based ``i``)."""
    X = as_sequence(X)
    if not 0 <= i < X.shape[0]:
        raise IndexError(f"token index {i} out of range for a sequence of length {X.shape[0]}")
    return hardmax_matrix(attention_scores(X, A)[i : i + 1])[0]


def softmax_weights(X, A: Matrix, tau: float, i: int) -> np.ndarray:
    X = as_sequence(X)
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not 0 <= i < X.shape[0]:
        raise IndexError(f"token index {i} out of range for a sequence of length {X.shape[0]}")
    return softmax_matrix(attention_scores(X, A)[i : i + 1], tau)[0]


def sa_apply(layer: SelfAttention, X) -> np.ndarray:
    return layer(as_sequence(X))


def transformer_apply(T: Transformer, X) -> np.ndarray:
    X = as_sequence(X)
    if T.d is not None and X.shape[1] != T.d:
        raise ValueError(f"sequence dimension {X.shape[1]} does not match transformer dimension {T.d}")
    for block in T.blocks:
        X = block(X)
    return X


def _pairwise_dist(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def hausdorff_distance(X, Y) -> float:
    X, Y = as_sequence(X), as_sequence(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sequences live in different dimensions")
    D = _pairwise_dist(X, Y)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def sequences_equal_as_sets(X, Y, tol: float = 1e-9) -> bool:
    return hausdorff_distance(X, Y) <= tol


def param_count(T: Transformer) -> int:
    """Nonzero scalars; a scaled identity counts once and ``v v^T`` counts ``nnz(v)``."""
    total = 0
    for blk in T.blocks:
        ff, sa = blk.ff, blk.sa
        total += int(ff.eta != 0.0)
        total += int(np.count_nonzero(ff.W) + np.count_nonzero(ff.U) + np.count_nonzero(ff.b))
        total += int(sa.rho != 0.0) + sa.V.nnz() + sa.A.nnz()
    return total


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    inputs: tuple
    outputs: tuple

    def __post_init__(self):
        ins = tuple(as_sequence(X) for X in self.inputs)
        outs = tuple(as_sequence(Y) for Y in self.outputs)
        if len(ins) != len(outs):
            raise ValueError(f"{len(ins)} inputs but {len(outs)} outputs")
        if not ins:
            raise ValueError("a dataset needs at least one pair")
        object.__setattr__(self, "inputs", ins)
        object.__setattr__(self, "outputs", outs)

    @property
    def d(self) -> int:
        return self.inputs[0].shape[1]

    @property
    def N(self) -> int:
        return len(self.inputs)

    @property
    def n(self) -> list:
        return [X.shape[0] for X in self.inputs]

    @property
    def m(self) -> list:
        return [Y.shape[0] for Y in self.outputs]

    def pairs(self) -> Iterable:
        return zip(self.inputs, self.outputs)


@dataclass(frozen=True)
class Violation:
    clause: str
    message: str
    indices: tuple = field(default_factory=tuple)

    def __str__(self) -> str:
        return f"{self.clause}: {self.message}"


def _first_repeat(X: np.ndarray) -> Optional[tuple]:
    seen = {}
    for i, row in enumerate(map(tuple, X)):
        if row in seen:
            return seen[row], i
        seen[row] = i
    return None


def validate_dataset(D: Dataset) -> Optional[Violation]:
    """Check the dataset assumptions; return the first violation or ``None``."""
    d = D.inputs[0].shape[1]
    if d < 2:
        return Violation("dimension", f"tokens must live in R^d with d >= 2, got d={d}")
    for j, (X, Y) in enumerate(D.pairs()):
        for name, S in (("input", X), ("output", Y)):
            if S.shape[1] != d:
                return Violation("dimension", f"{name} {j} has dimension {S.shape[1]}, expected {d}", (j,))
            if not np.all(np.isfinite(S)):
                return Violation("finite", f"{name} {j} has a non-finite coordinate", (j,))
    keys = [frozenset(map(tuple, X)) for X in D.inputs]
    for j in range(len(keys)):
        for k in range(j):
            if keys[j] == keys[k]:
                return Violation("assumption-1-i", f"inputs {k} and {j} are equal as sets", (k, j))
    for j, (X, Y) in enumerate(D.pairs()):
        for name, S in (("input", X), ("output", Y)):
            rep = _first_repeat(S)
            if rep is not None:
                return Violation(
                    "assumption-1-ii", f"{name} {j} repeats a token at positions {rep[0]} and {rep[1]}", (j, *rep)
                )
        if Y.shape[0] > X.shape[0]:
            return Violation("length", f"output {j} has {Y.shape[0]} tokens but input has {X.shape[0]}", (j,))
    return None
