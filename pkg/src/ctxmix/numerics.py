"""Dense float64 arithmetic shared by the model, scorers and evaluation code.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

_TINY = 1e-12


class ShapeError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only source of randomness in the package."""
    return np.random.default_rng(seed)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Normalize over the last axis with the biased (1/d) variance."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"gain {gain.shape} / bias {bias.shape} do not match input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


class Distance(enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    SPEARMAN = "spearman"


@dataclass(frozen=True)
class DistanceKind:
    """Distance used to compare an original and a perturbed representation.

    With ``normalize_representations`` set, both vectors are standardized
    per dimension with caller-supplied ``(mean, std)`` statistics before
    measuring. This is a reconstruction of the rogue-dimension correction;
    the exact published recipe is not available.
    """

    kind: Distance = Distance.COSINE
    normalize_representations: bool = False

    @classmethod
    def parse(cls, name: str, normalize: bool = False) -> "DistanceKind":
        try:
            return cls(Distance(name.lower()), normalize)
        except ValueError:
            valid = ", ".join(d.value for d in Distance)
            raise ValueError(f"unknown distance {name!r}; expected one of {valid}") from None


def rankdata(a) -> np.ndarray:
    """Fractional ranks starting at 1; tied entries share their average rank."""
    a = as_tensor(a).ravel()
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(len(a), dtype=np.float64)
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(a, b) -> float:
    a = as_tensor(a)
    b = as_tensor(b)
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return math.nan
    return float(np.clip((da @ db) / denom, -1.0, 1.0))


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns ``nan`` when either input is constant: the correlation is
    undefined there and callers must treat it as degenerate, not as zero.
    """
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise ValueError("spearman_rho needs at least two observations")
    return pearson(rankdata(a), rankdata(b))


def is_degenerate(value: float) -> bool:
    return math.isnan(value)


def distance(
    u,
    v,
    kind: DistanceKind = DistanceKind(),
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> float:
    u = as_tensor(u)
    v = as_tensor(v)
    if u.shape != v.shape or u.ndim != 1 or len(u) == 0:
        raise ShapeError(f"distance needs two equal-length vectors, got {u.shape} and {v.shape}")
    return float(pairwise_distance(u[None], v[None], kind, stats)[0])


def pairwise_distance(
    U,
    V,
    kind: DistanceKind = DistanceKind(),
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """Row-by-row distance between two stacks of vectors of shape (..., d)."""
    U = as_tensor(U)
    V = as_tensor(V)
    if U.shape != V.shape:
        raise ShapeError(f"shape mismatch: {U.shape} vs {V.shape}")
    if kind.normalize_representations:
        if stats is None:
            raise ValueError("normalize_representations requires (mean, std) statistics")
        mean, std = stats
        std = np.where(std < _TINY, 1.0, std)
        U = (U - mean) / std
        V = (V - mean) / std

    if kind.kind is Distance.EUCLIDEAN:
        return np.sqrt(np.sum((U - V) ** 2, axis=-1))
    if kind.kind is Distance.COSINE:
        return _cosine_distance(U, V)
    return _spearman_distance(U, V)


def _cosine_distance(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(U, axis=-1)
    nv = np.linalg.norm(V, axis=-1)
    du = nu < _TINY
    dv = nv < _TINY
    safe = ~(du | dv)
    cos = np.zeros_like(nu)
    cos[safe] = np.sum(U * V, axis=-1)[safe] / (nu[safe] * nv[safe])
    out = 1.0 - np.clip(cos, -1.0, 1.0)
    # zero-norm convention: both degenerate -> 0, exactly one -> 1
    out[du & dv] = 0.0
    out[du ^ dv] = 1.0
    return out


def _spearman_distance(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    flat_u = U.reshape(-1, U.shape[-1])
    flat_v = V.reshape(-1, V.shape[-1])
    out = np.empty(len(flat_u))
    for r, (u, v) in enumerate(zip(flat_u, flat_v)):
        if np.array_equal(u, v):
            out[r] = 0.0
            continue
        rho = pearson(rankdata(u), rankdata(v))
        # a constant vector has no ranking; treat it like a zero-norm cosine
        out[r] = 1.0 if math.isnan(rho) else 1.0 - rho
    return out.reshape(U.shape[:-1])


def normalize_rows(C, tol: float = _TINY) -> np.ndarray:
    """Divide each row by its sum; rows with (near) zero mass become uniform."""
    C = as_tensor(C)
    sums = C.sum(axis=-1, keepdims=True)
    dead = np.abs(sums) < tol
    out = C / np.where(dead, 1.0, sums)
    return np.where(dead, 1.0 / C.shape[-1], out)
