"""Run scoring methods over datasets and assemble evaluation inputs."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import scorers
from .data import CLS_ID, PAD_ID, SEP_ID, AgreementExample, Dataset
from .evaluation import blank_out_scores, mdl_online, ProbeReport
from .model import ModelWeights, forward, hidden_states_batch
from .numerics import DistanceKind, normalize_rows

MAP_METHODS = ("attn", "attn_norm", "attn_norm_res", "attn_norm_res_ln", "value_zeroing")
GRADIENT_METHODS = ("grad_x_input", "ig")
OTHER_METHODS = ("rand", "blank_out")
ALL_METHODS = MAP_METHODS + GRADIENT_METHODS + OTHER_METHODS

# residual already lives inside value-zeroing outputs; attention-style maps get the 0.5 I mix
DEFAULT_IDENTITY = {
    "attn": True,
    "attn_norm": True,
    "attn_norm_res": False,
    "attn_norm_res_ln": False,
    "value_zeroing": False,
}


class UnknownMethodError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown method {name!r}; valid methods: {', '.join(ALL_METHODS)}")


@dataclass(frozen=True)
class ScoreOptions:
    distance: DistanceKind = DistanceKind()
    add_identity: Optional[bool] = None  # None -> per-method default
    ig_steps: int = 64
    baseline: scorers.Baseline = scorers.Baseline()
    objective: str = "logit"
    exclude_special_tokens: bool = False
    seed: int = 0

    def identity_for(self, method: str) -> bool:
        if self.add_identity is not None:
            return self.add_identity
        return DEFAULT_IDENTITY.get(method, False)


@dataclass
class ExampleScores:
    method: str
    maps: Optional[List[np.ndarray]]  # layer-wise normalized maps, layers 1..L
    rollout: Optional[List[np.ndarray]]
    layer_vectors: Dict[int, np.ndarray] = field(default_factory=dict)
    aggregated: Optional[np.ndarray] = None


def special_positions(example: AgreementExample) -> List[int]:
    return [i for i, t in enumerate(example.token_ids) if t in (CLS_ID, SEP_ID, PAD_ID)]


def _row(matrix: np.ndarray, m: int, exclude: Sequence[int]) -> np.ndarray:
    return scorers.mask_row(scorers.MixingMap(0, matrix, ""), m, exclude).scores


def _vector(raw: np.ndarray, exclude: Sequence[int]) -> np.ndarray:
    raw = np.array(raw, dtype=np.float64)
    raw[list(exclude)] = 0.0
    return normalize_rows(raw[None])[0]


def score_example(
    method: str,
    weights: ModelWeights,
    example: AgreementExample,
    index: int = 0,
    options: ScoreOptions = ScoreOptions(),
    layers: Optional[Sequence[int]] = None,
) -> ExampleScores:
    """Layer-wise mask-row vectors plus the aggregated vector for one example.

    Map methods aggregate by rollout; gradient methods aggregate at the embedding
    layer (0). ``layers`` restricts which layers get vectors.
    """
    L = weights.config.num_layers
    ids, m = example.token_ids, example.mask_position
    exclude = special_positions(example) if options.exclude_special_tokens else []

    if method in MAP_METHODS:
        trace = forward(weights, ids)
        if method == "value_zeroing":
            maps = scorers.value_zeroing(weights, ids, options.distance, trace)
        elif method == "attn":
            maps = scorers.attn_raw(trace)
        else:
            maps = getattr(scorers, method)(trace, weights)
        rolled = scorers.attn_rollout(maps, options.identity_for(method))
        wanted = layers if layers is not None else range(1, L + 1)
        return ExampleScores(
            method=method,
            maps=[mp.matrix for mp in maps],
            rollout=[r.matrix for r in rolled],
            layer_vectors={l: _row(maps[l - 1].matrix, m, exclude) for l in wanted},
            aggregated=_row(rolled[-1].matrix, m, exclude),
        )

    if method in GRADIENT_METHODS:
        wanted = sorted(set(layers if layers is not None else range(0, L + 1)) | {0})
        vecs = {}
        for l in wanted:
            if method == "grad_x_input":
                raw = scorers.grad_x_input_raw(weights, ids, l, example.target_id, m, options.objective)
            else:
                ig = scorers.integrated_gradients_raw(
                    weights, ids, l, example.target_id, m, options.ig_steps, options.baseline, options.objective
                )
                raw = np.linalg.norm(ig, axis=-1)
            vecs[l] = _vector(raw, exclude)
        agg = vecs[0]
        if layers is not None and 0 not in layers:
            vecs.pop(0)
        return ExampleScores(method, None, None, vecs, agg)

    if method == "rand":
        wanted = layers if layers is not None else range(0, L + 1)
        vecs = {
            l: _vector(scorers.random_scores(example.n, [options.seed, index, l]).scores, exclude) for l in wanted
        }
        agg = _vector(scorers.random_scores(example.n, [options.seed, index, L + 1]).scores, exclude)
        return ExampleScores(method, None, None, vecs, agg)

    if method == "blank_out":
        return ExampleScores(method, None, None, {}, blank_out_scores(weights, example))

    raise UnknownMethodError(method)


def score_dataset(
    method: str,
    weights: ModelWeights,
    dataset: Dataset,
    options: ScoreOptions = ScoreOptions(),
    layers: Optional[Sequence[int]] = None,
    jobs: int = 1,
) -> List[ExampleScores]:
    if method not in ALL_METHODS:
        raise UnknownMethodError(method)

    def run(i):
        return score_example(method, weights, dataset[i], i, options, layers)

    if jobs <= 1:
        return [run(i) for i in range(len(dataset))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, range(len(dataset))))


def alignment_inputs(results: Dict[str, List[ExampleScores]]) -> Dict[tuple, List[np.ndarray]]:
    """Reshape scored datasets into ``{(method, layer): [vector per example]}``."""
    out: Dict[tuple, List[np.ndarray]] = {}
    for method, per_example in results.items():
        if method == "blank_out" or not per_example:
            continue
        for layer in per_example[0].layer_vectors:
            out[(method, layer)] = [r.layer_vectors[layer] for r in per_example]
        out[(method, "aggregated")] = [r.aggregated for r in per_example]
    return out


def mask_representations(weights: ModelWeights, dataset: Dataset) -> List[np.ndarray]:
    """x_m at every representation level 0..L; one (N, d) array per level."""
    L = weights.config.num_layers
    out = [np.empty((len(dataset), weights.config.model_dim)) for _ in range(L + 1)]
    by_len: Dict[int, List[int]] = {}
    for i, ex in enumerate(dataset):
        by_len.setdefault(ex.n, []).append(i)
    for n in sorted(by_len):
        idx = by_len[n]
        ids = np.array([dataset[i].token_ids for i in idx])
        masks = np.array([dataset[i].mask_position for i in idx])
        states = hidden_states_batch(weights, ids)
        for level, h in enumerate(states):
            out[level][idx] = h[np.arange(len(idx)), masks]
    return out


def probe_layers(weights: ModelWeights, dataset: Dataset, seed: int = 0) -> List[ProbeReport]:
    labels = [ex.number_label.index for ex in dataset]
    return [
        mdl_online(reps, labels, 2, seed=seed, layer=level)
        for level, reps in enumerate(mask_representations(weights, dataset))
    ]
