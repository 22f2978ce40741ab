"""MLM pre-training and prompt fine-tuning with a target/foil-restricted cross-entropy."""
from __future__ import annotations

import csv
import enum
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import SPECIAL_TOKENS, UNK_ID, AgreementExample, Dataset, Split
from .model import EncoderConfig, ModelWeights, NumericError, forward_batch, loss_and_gradients
from .numerics import make_rng

log = logging.getLogger(__name__)


class TrainMode(str, enum.Enum):
    MLM = "mlm"
    FINETUNE = "finetune"


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    mode: TrainMode = TrainMode.FINETUNE
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 600
    eval_interval: int = 100
    seed: int = 0
    unk_rate: float = 0.0  # MLM only: chance each ordinary input token becomes [UNK]

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_steps < 0 or self.eval_interval < 1:
            raise ValueError("learning rate, batch size, steps and eval interval must be non-negative/positive")
        if not 0.0 <= self.unk_rate < 1.0:
            raise ValueError("unk_rate must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam hyperparameters")


@dataclass
class TrainReport:
    losses: List[Tuple[int, float]] = field(default_factory=list)
    accuracy: Optional[float] = None
    steps: int = 0
    evals: List[Tuple[int, float]] = field(default_factory=list)

    def write_csv(self, path: Union[str, os.PathLike], seed: Optional[int] = None) -> None:
        with open(path, "w", newline="") as fh:
            if seed is not None:
                fh.write(f"# seed: {seed}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "metric", "value"])
            for step, loss in self.losses:
                w.writerow([step, "loss", repr(loss)])
            for step, acc in self.evals:
                w.writerow([step, "heldout_accuracy", repr(acc)])
            if self.accuracy is not None:
                w.writerow([self.steps, "final_accuracy", repr(self.accuracy)])


class Adam:
    """Adam with bias correction, operating on dicts of arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def restricted_ce(logits_m: np.ndarray, target_ids, foil_ids) -> Tuple[float, np.ndarray]:
    """Mean two-way cross-entropy over the target and foil logits.

    Returns the loss and its gradient w.r.t. ``logits_m`` (B x V).
    """
    rows = np.arange(len(logits_m))
    margin = logits_m[rows, target_ids] - logits_m[rows, foil_ids]
    # -log sigmoid(margin), stable form
    loss = np.mean(np.logaddexp(0.0, -margin))
    p_foil = 1.0 / (1.0 + np.exp(margin))
    grad = np.zeros_like(logits_m)
    grad[rows, target_ids] = -p_foil / len(rows)
    grad[rows, foil_ids] = p_foil / len(rows)
    return float(loss), grad


def full_ce(logits_m: np.ndarray, target_ids) -> Tuple[float, np.ndarray]:
    rows = np.arange(len(logits_m))
    shifted = logits_m - logits_m.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(logz - shifted[rows, target_ids])
    grad = np.exp(shifted - logz[:, None])
    grad[rows, target_ids] -= 1.0
    return float(loss), grad / len(rows)


def _batch_arrays(examples: Sequence[AgreementExample]):
    ids = np.array([ex.token_ids for ex in examples], dtype=np.int64)
    mask = np.array([ex.mask_position for ex in examples])
    tgt = np.array([ex.target_id for ex in examples])
    foil = np.array([ex.foil_id for ex in examples])
    return ids, mask, tgt, foil


def _length_batches(examples: Sequence[AgreementExample], batch_size: int, rng: np.random.Generator):
    """One epoch of equal-length batches in a seeded random order."""
    by_len = defaultdict(list)
    for i in rng.permutation(len(examples)):
        by_len[examples[i].n].append(examples[i])
    batches = []
    for n in sorted(by_len):
        group = by_len[n]
        batches.extend(group[s : s + batch_size] for s in range(0, len(group), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _corrupt(ids: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    hit = (rng.random(ids.shape) < rate) & (ids >= len(SPECIAL_TOKENS))
    return np.where(hit, UNK_ID, ids)


def _loss_fn(mode: TrainMode, mask, tgt, foil):
    def fn(logits):
        rows = np.arange(len(mask))
        logits_m = logits[rows, mask]
        if mode is TrainMode.FINETUNE:
            loss, g = restricted_ce(logits_m, tgt, foil)
        else:
            loss, g = full_ce(logits_m, tgt)
        dlogits = np.zeros_like(logits)
        dlogits[rows, mask] = g
        return loss, dlogits

    return fn


def train(
    weights: ModelWeights,
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    eval_dataset: Optional[Dataset] = None,
) -> Tuple[ModelWeights, TrainReport]:
    """Adam on equal-length batches.

    MLM mode predicts the verb at the masked slot over the full vocabulary;
    fine-tune mode uses the two-way target/foil cross-entropy.
    """
    if dataset.split is not Split.TRAIN:
        raise ValueError("train() expects a Train split")
    if not dataset.examples:
        raise ValueError("empty training set")
    rng = make_rng(config.seed)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    params = weights.named_tensors()
    report = TrainReport()
    current = weights
    batches: list = []
    for step in range(1, config.max_steps + 1):
        if not batches:
            batches = _length_batches(dataset.examples, config.batch_size, rng)
        ids, mask, tgt, foil = _batch_arrays(batches.pop())
        if config.mode is TrainMode.MLM and config.unk_rate > 0:
            ids = _corrupt(ids, config.unk_rate, rng)
        try:
            # divergence is detected explicitly below, so overflow warnings are noise
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_gradients(current, ids, _loss_fn(config.mode, mask, tgt, foil))
        except NumericError:
            raise DivergenceError(step) from None
        if not np.isfinite(loss):
            raise DivergenceError(step)
        with np.errstate(over="ignore", invalid="ignore"):
            params = opt.step(params, grads)
        current = ModelWeights.from_named(weights.config, params)
        report.losses.append((step, loss))
        if eval_dataset is not None and step % config.eval_interval == 0:
            acc = evaluate_accuracy(current, eval_dataset)
            report.evals.append((step, acc))
            log.info("step %d loss %.4f heldout acc %.4f", step, loss, acc)
    report.steps = config.max_steps
    if eval_dataset is not None:
        report.accuracy = evaluate_accuracy(current, eval_dataset)
    if config.max_steps == 0:
        current = weights
    return current, report


def target_foil_margins(weights: ModelWeights, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Target logit minus foil logit at the mask, one entry per example in order."""
    margins = np.empty(len(dataset))
    by_len = defaultdict(list)
    for i, ex in enumerate(dataset.examples):
        by_len[ex.n].append(i)
    for n in sorted(by_len):
        idx = by_len[n]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            ids, mask, tgt, foil = _batch_arrays([dataset.examples[i] for i in chunk])
            logits = forward_batch(weights, ids)
            rows = np.arange(len(chunk))
            margins[chunk] = logits[rows, mask, tgt] - logits[rows, mask, foil]
    return margins


def evaluate_accuracy(weights: ModelWeights, dataset: Dataset) -> float:
    """Fraction of examples whose target logit beats the foil; ties count as wrong."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(target_foil_margins(weights, dataset) > 0))


# ---------------------------------------------------------------------------
# default recipe


@dataclass(frozen=True)
class Recipe:
    num_layers: int = 3
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    mlm_steps: int = 300
    finetune_steps: int = 600
    unk_rate: float = 0.1
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def encoder_config(self, vocab_size: int, max_positions: int = 32) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            model_dim=self.model_dim,
            ffn_dim=self.ffn_dim,
            vocab_size=vocab_size,
            max_positions=max_positions,
        )


def pretrain_and_finetune(
    weights: ModelWeights, train_set: Dataset, test_set: Optional[Dataset], recipe: Recipe = Recipe()
) -> Tuple[ModelWeights, ModelWeights, TrainReport, TrainReport]:
    """Returns (pre-trained, fine-tuned, mlm report, fine-tune report)."""
    common = dict(batch_size=recipe.batch_size, learning_rate=recipe.learning_rate)
    pre, pre_report = train(
        weights, train_set,
        TrainConfig(
            mode=TrainMode.MLM, max_steps=recipe.mlm_steps, seed=recipe.seed, unk_rate=recipe.unk_rate, **common
        ),
        test_set,
    )
    ft, ft_report = train(
        pre, train_set,
        TrainConfig(mode=TrainMode.FINETUNE, max_steps=recipe.finetune_steps, seed=recipe.seed + 1, **common),
        test_set,
    )
    return pre, ft, pre_report, ft_report
