"""Context-mixing maps and token attribution scores.

Every map is an ``n x n`` matrix whose row ``i`` says how much token ``i`` draws
on each context token ``j`` at one encoder layer. Gradient methods instead
produce a single score vector for the masked position.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .model import (
    ForwardTrace,
    ModelInputError,
    ModelWeights,
    forward,
    hidden_states_batch,
    run_layer_with_value_mask,
    target_and_gradient,
)
from .numerics import DistanceKind, make_rng, normalize_rows, pairwise_distance

STOCHASTIC_TOL = 1e-9


@dataclass
class MixingMap:
    layer: int
    matrix: np.ndarray
    method: str
    normalized: bool = True

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class ScoreVector:
    scores: np.ndarray
    mask_position: int
    method: str
    layer: Union[int, str]


def _normalize_vector(scores: np.ndarray) -> np.ndarray:
    return normalize_rows(scores[None])[0]


def _maps(matrices, method: str, normalize: bool = True) -> List[MixingMap]:
    return [
        MixingMap(layer=l, matrix=normalize_rows(C) if normalize else C, method=method, normalized=normalize)
        for l, C in enumerate(matrices, start=1)
    ]


# ---------------------------------------------------------------------------
# value zeroing


def value_zeroing_layer(
    weights: ModelWeights, trace: ForwardTrace, layer: int, distance: DistanceKind = DistanceKind()
) -> np.ndarray:
    """Raw n x n scores for one layer: distance between x_i with and without v_j."""
    n = trace.n
    zeroed = run_layer_with_value_mask(weights, trace, layer, 1.0 - np.eye(n)).outputs  # [j, i, :]
    original = trace.layer(layer).outputs
    stats = None
    if distance.normalize_representations:
        stats = (original.mean(axis=0), original.std(axis=0))
    # C[i, j] compares x_i^{-j} with x_i
    return pairwise_distance(zeroed.transpose(1, 0, 2), np.broadcast_to(original[:, None], zeroed.shape), distance, stats)


def value_zeroing(
    weights: ModelWeights,
    token_ids: Sequence[int],
    distance: DistanceKind = DistanceKind(),
    trace: Optional[ForwardTrace] = None,
    normalize: bool = True,
) -> List[MixingMap]:
    trace = trace or forward(weights, token_ids)
    raw = [value_zeroing_layer(weights, trace, l, distance) for l in range(1, weights.config.num_layers + 1)]
    return _maps(raw, "value_zeroing", normalize)


# ---------------------------------------------------------------------------
# attention-based maps


def attn_raw(trace: ForwardTrace) -> List[MixingMap]:
    return [MixingMap(lt.layer, lt.alpha.mean(axis=0), "attn", True) for lt in trace.layers]


def _check_stochastic(C: np.ndarray, tol: float = 1e-6) -> None:
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"expected a square map, got {C.shape}")
    if np.any(C < -tol) or not np.allclose(C.sum(axis=1), 1.0, atol=tol, rtol=0):
        raise ValueError("rollout needs row-stochastic maps")


def attn_rollout(maps: Sequence[MixingMap], add_identity: bool = True) -> List[MixingMap]:
    """Cumulative products R_l = C_l R_{l-1}, optionally with C_l -> (C_l + I) / 2."""
    if not maps:
        return []
    n = maps[0].n
    R = np.eye(n)
    out = []
    for mp in maps:
        _check_stochastic(mp.matrix)
        C = 0.5 * mp.matrix + 0.5 * np.eye(n) if add_identity else mp.matrix
        R = C @ R
        out.append(MixingMap(mp.layer, R, f"{mp.method}_rollout", True))
    return out


def head_projected_values(trace: ForwardTrace, weights: ModelWeights, layer: int) -> np.ndarray:
    """v_j^h pushed through the W_O rows of head h: shape H x n x d."""
    lt = trace.layer(layer)
    H, n, dh = lt.values.shape
    w_o = weights.layers[layer - 1].w_o.reshape(H, dh, -1)
    return np.einsum("hjk,hkd->hjd", lt.values, w_o)


def attention_contributions(trace: ForwardTrace, weights: ModelWeights, layer: int) -> np.ndarray:
    """Per-source terms of the attention output: [i, j, :] = sum_h alpha_ij^h v_j^h W_O^h."""
    lt = trace.layer(layer)
    return np.einsum("hij,hjd->ijd", lt.alpha, head_projected_values(trace, weights, layer))


def residual_contributions(trace: ForwardTrace, weights: ModelWeights, layer: int) -> np.ndarray:
    """Attention terms with the residual x_i credited wholly to token i."""
    g = attention_contributions(trace, weights, layer).copy()
    idx = np.arange(trace.n)
    g[idx, idx] += trace.layer(layer).inputs
    return g


def ln_contributions(trace: ForwardTrace, weights: ModelWeights, layer: int):
    """Push each residual term linearly through LN_MHA.

    Returns ``(terms, bias)`` with ``terms.sum(axis=1) + bias`` equal to the
    post-LN context vectors.
    """
    lw = weights.layers[layer - 1]
    g = residual_contributions(trace, weights, layer)
    pre = trace.layer(layer).pre_ln_mha
    std = np.sqrt(pre.var(axis=-1) + weights.config.ln_eps)
    centered = g - g.mean(axis=-1, keepdims=True)
    return centered / std[:, None, None] * lw.ln_mha_gain, lw.ln_mha_bias


def attn_norm(trace: ForwardTrace, weights: ModelWeights) -> List[MixingMap]:
    raw = [np.linalg.norm(attention_contributions(trace, weights, l), axis=-1) for l in range(1, len(trace.layers) + 1)]
    return _maps(raw, "attn_norm")


def attn_norm_res(trace: ForwardTrace, weights: ModelWeights) -> List[MixingMap]:
    raw = [np.linalg.norm(residual_contributions(trace, weights, l), axis=-1) for l in range(1, len(trace.layers) + 1)]
    return _maps(raw, "attn_norm_res")


def attn_norm_res_ln(trace: ForwardTrace, weights: ModelWeights) -> List[MixingMap]:
    raw = [np.linalg.norm(ln_contributions(trace, weights, l)[0], axis=-1) for l in range(1, len(trace.layers) + 1)]
    return _maps(raw, "attn_norm_res_ln")


# ---------------------------------------------------------------------------
# gradient attributions


def grad_x_input_raw(
    weights: ModelWeights, token_ids, layer: int, target_id: int, mask: int, objective: str = "logit"
) -> np.ndarray:
    x = hidden_states_batch(weights, token_ids)[layer][0]
    _, grad = target_and_gradient(weights, x, layer, mask, target_id, objective)
    return np.linalg.norm(grad * x, axis=-1)


def grad_x_input(
    weights: ModelWeights, token_ids, layer: int, target_id: int, mask: int, objective: str = "logit"
) -> ScoreVector:
    raw = grad_x_input_raw(weights, token_ids, layer, target_id, mask, objective)
    return ScoreVector(_normalize_vector(raw), mask, "grad_x_input", layer)


class BaselineKind(str, enum.Enum):
    ZERO = "zero"
    TOKEN = "token"


@dataclass(frozen=True)
class Baseline:
    """Integration start point: the zero vector, or a sequence of one placeholder token."""

    kind: BaselineKind = BaselineKind.ZERO
    token_id: Optional[int] = None

    @classmethod
    def parse(cls, spec: str) -> "Baseline":
        if spec == "zero":
            return cls()
        if spec.startswith("token:"):
            return cls(BaselineKind.TOKEN, int(spec.split(":", 1)[1]))
        raise ValueError(f"baseline must be 'zero' or 'token:<id>', got {spec!r}")

    def representation(self, weights: ModelWeights, n: int, layer: int) -> np.ndarray:
        if self.kind is BaselineKind.ZERO:
            return np.zeros((n, weights.config.model_dim))
        if self.token_id is None or not 0 <= self.token_id < weights.config.vocab_size:
            raise ModelInputError(f"invalid baseline token id {self.token_id}")
        return hidden_states_batch(weights, [self.token_id] * n)[layer][0]


def integrated_gradients_raw(
    weights: ModelWeights,
    token_ids,
    layer: int,
    target_id: int,
    mask: int,
    steps: int = 64,
    baseline: Baseline = Baseline(),
    objective: str = "logit",
) -> np.ndarray:
    """Per-coordinate attributions (n x d), midpoint Riemann rule along the straight path."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = hidden_states_batch(weights, token_ids)[layer][0]
    base = baseline.representation(weights, x.shape[0], layer)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path = base[None] + alphas[:, None, None] * (x - base)[None]
    grads = np.zeros_like(x)
    chunk = 64
    for s in range(0, steps, chunk):
        _, g = target_and_gradient(weights, path[s : s + chunk], layer, mask, target_id, objective)
        grads += g.sum(axis=0)
    return (x - base) * grads / steps


def integrated_gradients(
    weights: ModelWeights,
    token_ids,
    layer: int,
    target_id: int,
    mask: int,
    steps: int = 64,
    baseline: Baseline = Baseline(),
    objective: str = "logit",
) -> ScoreVector:
    ig = integrated_gradients_raw(weights, token_ids, layer, target_id, mask, steps, baseline, objective)
    return ScoreVector(_normalize_vector(np.linalg.norm(ig, axis=-1)), mask, "ig", layer)


# ---------------------------------------------------------------------------
# score vectors


def mask_row(
    mp: MixingMap, m: int, exclude: Sequence[int] = ()
) -> ScoreVector:
    """Row ``m`` renormalized to sum to one, with ``exclude`` positions zeroed."""
    if not 0 <= m < mp.n:
        raise IndexError(f"mask position {m} out of range for n={mp.n}")
    row = np.array(mp.matrix[m], dtype=np.float64)
    row[list(exclude)] = 0.0
    return ScoreVector(_normalize_vector(row), m, mp.method, mp.layer)


def random_scores(n: int, seed) -> ScoreVector:
    """IID uniform scores normalized to one; ``seed`` may be an int or a sequence of ints."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(np.random.SeedSequence(seed) if not isinstance(seed, int) else seed)
    return ScoreVector(_normalize_vector(rng.uniform(size=n)), -1, "rand", "aggregated")


def is_probability_vector(v: np.ndarray, tol: float = STOCHASTIC_TOL) -> bool:
    v = np.asarray(v)
    return bool(np.all(v >= 0) and abs(v.sum() - 1.0) <= tol)
