"""Cue alignment, online-code MDL probing and blank-out faithfulness."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .data import UNK_ID, AgreementExample, Dataset
from .model import ModelWeights, forward_batch
from .numerics import make_rng, softmax, spearman_rho

# ---------------------------------------------------------------------------
# cue alignment metrics


def _check_cues(scores, xi) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    c = np.asarray(xi)
    if s.shape != c.shape:
        raise ValueError(f"length mismatch: scores {s.shape}, cue vector {c.shape}")
    return s, c.astype(bool)


def alignment_dot(scores, xi) -> float:
    s, c = _check_cues(scores, xi)
    return float(s @ c)


def ranking(scores) -> np.ndarray:
    """Positions by descending score; equal scores keep ascending position order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def alignment_ap(scores, xi) -> float:
    s, c = _check_cues(scores, xi)
    total = int(c.sum())
    if total == 0:
        raise ValueError("cue vector has no cue positions")
    hits = c[ranking(s)]
    ranks = np.flatnonzero(hits) + 1
    # each hit raises recall by 1/total; precision there is (#hits so far)/rank
    return float(np.sum(np.arange(1, total + 1) / ranks) / total)


def probes_needed(scores, xi) -> int:
    """Non-cue tokens scoring strictly above the best cue (ties do not count)."""
    s, c = _check_cues(scores, xi)
    if not c.any():
        raise ValueError("cue vector has no cue positions")
    return int(np.sum(s[~c] > s[c].max()))


# ---------------------------------------------------------------------------
# MDL probing


class Probe(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray, num_classes: int) -> "Probe": ...

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


class UniformProbe:
    def fit(self, X, y, num_classes):
        self.k = num_classes
        return self

    def predict_proba(self, X):
        return np.full((len(X), self.k), 1.0 / self.k)


class LogisticProbe:
    """Multinomial logistic regression, full-batch gradient descent on standardized inputs."""

    def __init__(self, epochs: int = 100, lr: float = 0.03, l2: float = 1e-4):
        self.epochs, self.lr, self.l2 = epochs, lr, l2

    def fit(self, X, y, num_classes):
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        self.std = np.where(X.std(axis=0) < 1e-12, 1.0, X.std(axis=0))
        Xs = (X - self.mean) / self.std
        N, d = Xs.shape
        Y = np.eye(num_classes)[y]
        self.W = np.zeros((d, num_classes))
        self.b = np.zeros(num_classes)
        for _ in range(self.epochs):
            P = softmax(Xs @ self.W + self.b, axis=1)
            G = (P - Y) / N
            self.W -= self.lr * (Xs.T @ G + self.l2 * self.W)
            self.b -= self.lr * G.sum(axis=0)
        return self

    def predict_proba(self, X):
        Xs = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        return softmax(Xs @ self.W + self.b, axis=1)


DEFAULT_FRACTIONS = (0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.0)


def chunk_boundaries(N: int, num_classes: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> List[int]:
    first = min(N, max(2 * num_classes, int(round(fractions[0] * N))))
    out = [first]
    for f in fractions[1:]:
        b = min(N, max(first, int(round(f * N))))
        if b > out[-1]:
            out.append(b)
    if out[-1] != N:
        out.append(N)
    return out


@dataclass
class ProbeReport:
    layer: Optional[int]
    mdl: float
    compression: float
    N: int
    K: int
    boundaries: List[int]
    chunk_bits: List[float]


def mdl_online(
    representations,
    labels,
    num_classes: int = 2,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    probe_factory: Callable[[], Probe] = LogisticProbe,
    seed: int = 0,
    layer: Optional[int] = None,
) -> ProbeReport:
    """Online (prequential) codelength of ``labels`` given ``representations``."""
    X = np.asarray(representations, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    N, K = len(y), num_classes
    if N < 2 * K:
        raise ValueError(f"need at least {2 * K} points, got {N}")
    if y.min() < 0 or y.max() >= K:
        raise ValueError("labels outside 0..K-1")
    order = make_rng(seed).permutation(N)
    X, y = X[order], y[order]
    bounds = chunk_boundaries(N, K, fractions)
    bits = [bounds[0] * math.log2(K)]
    for start, stop in zip(bounds[:-1], bounds[1:]):
        prefix = y[:start]
        if len(np.unique(prefix)) < 2:
            # single-class prefix: smoothed class prior
            prior = (np.bincount(prefix, minlength=K) + 1.0) / (len(prefix) + K)
            p = prior[y[start:stop]]
        else:
            probe = probe_factory().fit(X[:start], prefix, K)
            p = probe.predict_proba(X[start:stop])[np.arange(stop - start), y[start:stop]]
        bits.append(float(-np.sum(np.log2(np.clip(p, 1e-300, None)))))
    mdl = float(sum(bits))
    return ProbeReport(layer, mdl, N * math.log2(K) / mdl, N, K, bounds, bits)


# ---------------------------------------------------------------------------
# blank-out faithfulness


def _target_prob(logits_m: np.ndarray, target: int, foil: int) -> np.ndarray:
    margin = logits_m[..., target] - logits_m[..., foil]
    return 1.0 / (1.0 + np.exp(-margin))


def target_probability(weights: ModelWeights, example: AgreementExample) -> float:
    logits = forward_batch(weights, [example.token_ids])
    return float(_target_prob(logits[0, example.mask_position], example.target_id, example.foil_id))


def blank_out_scores(weights: ModelWeights, example: AgreementExample, unk_id: int = UNK_ID) -> np.ndarray:
    """Drop in the two-way target probability when token i becomes [UNK].

    The mask position and tokens that already are [UNK] score exactly 0.
    """
    n, m = example.n, example.mask_position
    positions = [i for i in range(n) if i != m and example.token_ids[i] != unk_id]
    out = np.zeros(n)
    if not positions:
        return out
    batch = np.tile(np.asarray(example.token_ids), (len(positions) + 1, 1))
    for row, i in enumerate(positions, start=1):
        batch[row, i] = unk_id
    logits = forward_batch(weights, batch)[:, m]
    p = _target_prob(logits, example.target_id, example.foil_id)
    out[positions] = p[0] - p[1:]
    return out


def layerwise_correlation(alignments: Sequence[float], compressions: Sequence[float]) -> float:
    """Spearman rho across layers; ``nan`` marks a constant (degenerate) series."""
    if len(alignments) != len(compressions):
        raise ValueError("layer series differ in length")
    return spearman_rho(alignments, compressions)


@dataclass
class FaithfulnessReport:
    per_example: Dict[str, np.ndarray]  # method -> rho per scored example (nan if degenerate)
    blank_out: List[np.ndarray]
    skipped_short: int = 0

    def mean_rho(self, method: str) -> float:
        vals = self.per_example[method]
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if len(vals) else math.nan

    def degenerate(self, method: str) -> int:
        return int(np.isnan(self.per_example[method]).sum())


def faithfulness_correlation(
    weights: ModelWeights,
    dataset: Dataset,
    method_scores: Dict[str, Sequence[np.ndarray]],
    blank_outs: Optional[Sequence[np.ndarray]] = None,
    exclude: Optional[Sequence[Sequence[int]]] = None,
) -> FaithfulnessReport:
    """Per-example Spearman rho between blank-out drops and aggregated scores.

    The mask position is left out of every correlation: its blank-out score is
    zero by convention rather than measured. ``exclude`` optionally lists more
    positions per example (e.g. special tokens). Examples with fewer than three
    tokens are skipped and counted.
    """
    if blank_outs is None:
        blank_outs = [blank_out_scores(weights, ex) for ex in dataset]
    rhos: Dict[str, List[float]] = defaultdict(list)
    skipped = 0
    for idx, ex in enumerate(dataset):
        if ex.n < 3:
            skipped += 1
            continue
        drop = {ex.mask_position, *(exclude[idx] if exclude else ())}
        keep = np.array([i for i in range(ex.n) if i not in drop])
        for method, scores in method_scores.items():
            s = np.asarray(scores[idx])
            rhos[method].append(spearman_rho(blank_outs[idx][keep], s[keep]) if len(keep) >= 2 else math.nan)
    return FaithfulnessReport({k: np.array(v) for k, v in rhos.items()}, list(blank_outs), skipped)


# ---------------------------------------------------------------------------
# dataset-level summaries


@dataclass
class CueAlignmentReport:
    """Per (method, layer) arrays of per-example dot / AP / probes-needed values."""

    values: Dict[Tuple[str, object], Dict[str, np.ndarray]] = field(default_factory=dict)

    def add(self, method: str, layer, dot: Sequence[float], ap: Sequence[float], pn: Sequence[float]) -> None:
        self.values[(method, layer)] = {
            "dot": np.asarray(dot, dtype=np.float64),
            "ap": np.asarray(ap, dtype=np.float64),
            "probes_needed": np.asarray(pn, dtype=np.float64),
        }

    def mean(self, method: str, layer, metric: str = "dot") -> float:
        return float(self.values[(method, layer)][metric].mean())

    def layers(self, method: str) -> List:
        return [l for (m, l) in self.values if m == method]

    def layer_series(self, method: str, metric: str = "dot", layers: Optional[Sequence[int]] = None) -> List[float]:
        layers = layers if layers is not None else [l for l in self.layers(method) if isinstance(l, int)]
        return [self.mean(method, l, metric) for l in layers]

    def best_layer(self, method: str, metric: str = "dot"):
        ints = [l for l in self.layers(method) if isinstance(l, int)]
        return max(ints, key=lambda l: self.mean(method, l, metric))

    def rows(self):
        for (method, layer), metrics in self.values.items():
            for metric, vals in metrics.items():
                yield method, layer, metric, float(vals.mean())


def cue_alignment(
    dataset: Dataset, vectors: Dict[Tuple[str, object], Sequence[np.ndarray]]
) -> CueAlignmentReport:
    """``vectors[(method, layer)]`` holds one mask-row score vector per example."""
    from .data import cue_vector

    cues = [cue_vector(ex) for ex in dataset]
    report = CueAlignmentReport()
    for (method, layer), vecs in vectors.items():
        report.add(
            method, layer,
            [alignment_dot(s, c) for s, c in zip(vecs, cues)],
            [alignment_ap(s, c) for s, c in zip(vecs, cues)],
            [probes_needed(s, c) for s, c in zip(vecs, cues)],
        )
    return report


def bootstrap_ci(
    values: Sequence[float], n_boot: int = 2000, confidence: float = 0.95, seed: int = 0
) -> Tuple[float, float, float]:
    """Percentile bootstrap of the mean: (mean, lower, upper)."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if len(v) == 0:
        return math.nan, math.nan, math.nan
    rng = make_rng(seed)
    means = v[rng.integers(0, len(v), size=(n_boot, len(v)))].mean(axis=1)
    tail = (1.0 - confidence) / 2.0
    return float(v.mean()), float(np.quantile(means, tail)), float(np.quantile(means, 1.0 - tail))
