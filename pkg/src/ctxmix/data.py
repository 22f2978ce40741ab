"""Annotated agreement examples, the synthetic generator and the JSONL dataset format."""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, fields
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .numerics import make_rng

PathLike = Union[str, os.PathLike]

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]")
PAD_ID, UNK_ID, MASK_ID, CLS_ID, SEP_ID = range(5)

NOUN_PAIRS = (
    ("dog", "dogs"), ("cat", "cats"), ("student", "students"), ("teacher", "teachers"),
    ("picture", "pictures"), ("car", "cars"), ("bird", "birds"), ("doctor", "doctors"),
    ("house", "houses"), ("child", "children"), ("tree", "trees"), ("song", "songs"),
)
VERB_PAIRS = (("is", "are"), ("was", "were"), ("has", "have"), ("does", "do"))
FILLERS = (
    "the", "a", "of", "near", "with", "by", "red", "old", "big", "small", "very",
    "quite", "happy", "green", "new", "from", "behind", "and", "often", "today",
)


class Number(str, enum.Enum):
    SINGULAR = "singular"
    PLURAL = "plural"

    @property
    def index(self) -> int:
        return 0 if self is Number.SINGULAR else 1

    def other(self) -> "Number":
        return Number.PLURAL if self is Number.SINGULAR else Number.SINGULAR


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class Vocab:
    """Bidirectional token table; the five special tokens always occupy ids 0-4."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    @property
    def special_ids(self) -> frozenset:
        return frozenset(range(len(SPECIAL_TOKENS)))


def default_vocab() -> Vocab:
    tokens = list(SPECIAL_TOKENS)
    for pair in NOUN_PAIRS + VERB_PAIRS:
        tokens.extend(pair)
    tokens.extend(FILLERS)
    return Vocab(tokens)


class ExampleError(ValueError):
    pass


@dataclass(frozen=True)
class AgreementExample:
    token_ids: Tuple[int, ...]
    mask_position: int
    cue_positions: Tuple[int, ...]
    target_id: int
    foil_id: int
    number_label: Number
    phenomenon: str = "sva"

    @property
    def n(self) -> int:
        return len(self.token_ids)

    def validate(self, vocab_size: Optional[int] = None) -> None:
        n = self.n
        if n < 1:
            raise ExampleError("token_ids: empty sequence")
        if not 0 <= self.mask_position < n:
            raise ExampleError(f"mask_position: {self.mask_position} outside 0..{n - 1}")
        if self.token_ids[self.mask_position] != MASK_ID:
            raise ExampleError("token_ids: the mask position does not hold the [MASK] id")
        if not self.cue_positions:
            raise ExampleError("cue_positions: must not be empty")
        if len(set(self.cue_positions)) != len(self.cue_positions):
            raise ExampleError("cue_positions: duplicate entries")
        if any(not 0 <= c < n for c in self.cue_positions):
            raise ExampleError("cue_positions: index out of range")
        if self.mask_position in self.cue_positions:
            raise ExampleError("cue_positions: contains the mask position")
        if self.target_id == self.foil_id:
            raise ExampleError("foil_id: equals target_id")
        if vocab_size is not None:
            for name in ("target_id", "foil_id"):
                if not 0 <= getattr(self, name) < vocab_size:
                    raise ExampleError(f"{name}: outside vocabulary")
            if any(not 0 <= t < vocab_size for t in self.token_ids):
                raise ExampleError("token_ids: id outside vocabulary")

    def to_record(self, vocab: Optional[Vocab] = None, split: Optional[Split] = None) -> dict:
        rec = {
            "token_ids": list(self.token_ids),
            "mask_position": self.mask_position,
            "cue_positions": list(self.cue_positions),
            "target_id": self.target_id,
            "foil_id": self.foil_id,
            "number_label": self.number_label.value,
            "phenomenon": self.phenomenon,
        }
        if vocab is not None:
            rec["tokens"] = vocab.decode(self.token_ids)
        if split is not None:
            rec["split"] = split.value
        return rec


def cue_vector(example: AgreementExample) -> np.ndarray:
    xi = np.zeros(example.n)
    xi[list(example.cue_positions)] = 1.0
    return xi


@dataclass
class Dataset:
    examples: List[AgreementExample]
    split: Split = Split.TEST

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


def split_equally(examples: Sequence[AgreementExample]) -> Tuple[Dataset, Dataset]:
    half = len(examples) // 2
    return Dataset(list(examples[:half]), Split.TRAIN), Dataset(list(examples[half:]), Split.TEST)


# ---------------------------------------------------------------------------
# synthetic generator


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 2000
    attractor_rate: float = 0.0
    min_length: int = 6
    max_length: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise GeneratorConfigError("n must be non-negative")
        if not 0.0 <= self.attractor_rate <= 1.0:
            raise GeneratorConfigError("attractor_rate must lie in [0, 1]")
        # [CLS] SUBJ [MASK] [SEP] is the shortest template
        if self.min_length < 4:
            raise GeneratorConfigError(f"min_length {self.min_length} too short for the template (needs >= 4)")
        if self.attractor_rate > 0 and self.max_length < 5:
            raise GeneratorConfigError("attractors need max_length >= 5")
        if self.max_length < self.min_length:
            raise GeneratorConfigError("max_length < min_length")

    @classmethod
    def from_text(cls, text: str) -> "GeneratorConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise GeneratorConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise GeneratorConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = float(value) if key == "attractor_rate" else int(value)
        return cls(**kwargs)


def generate_synthetic(config: GeneratorConfig, vocab: Optional[Vocab] = None) -> List[AgreementExample]:
    """Template sentences ``[CLS] filler* SUBJ (filler|ATTRACTOR)* [MASK] filler* [SEP]``.

    The subject noun is the only cue: the label is its number and target/foil are
    the matching/mismatching forms of a verb. With probability
    ``attractor_rate`` one opposite-number noun is placed between subject and
    mask. Labels are balanced pairwise, so any even-length prefix (and hence
    each half of an equal split) has equal singular and plural counts.
    """
    vocab = vocab or default_vocab()
    rng = make_rng(config.seed)
    nouns = [tuple(vocab.id(w) for w in pair) for pair in NOUN_PAIRS]
    verbs = [tuple(vocab.id(w) for w in pair) for pair in VERB_PAIRS]
    fillers = [vocab.id(w) for w in FILLERS]

    # one singular and one plural per consecutive pair, so every even prefix is balanced
    labels = []
    for _ in range((config.n + 1) // 2):
        pair = [Number.SINGULAR, Number.PLURAL]
        if rng.random() < 0.5:
            pair.reverse()
        labels.extend(pair)
    labels = labels[: config.n]
    examples = []
    for label in labels:
        length = int(rng.integers(config.min_length, config.max_length + 1))
        attractor = config.attractor_rate > 0 and length >= 5 and rng.random() < config.attractor_rate
        free = length - 4  # slots left after CLS, SUBJ, MASK, SEP
        mid_min = 1 if attractor else 0
        # split the free slots over before / between / after
        before = int(rng.integers(0, free - mid_min + 1))
        between = int(rng.integers(mid_min, free - before + 1))
        after = free - before - between

        subj_pair = nouns[int(rng.integers(len(nouns)))]
        verb_pair = verbs[int(rng.integers(len(verbs)))]
        subj = subj_pair[label.index]

        def fill(k):
            return [fillers[int(i)] for i in rng.integers(len(fillers), size=k)]

        middle = fill(between)
        if attractor:
            other = [p for p in nouns if p != subj_pair][int(rng.integers(len(nouns) - 1))]
            middle[int(rng.integers(between))] = other[label.other().index]

        ids = [CLS_ID] + fill(before) + [subj] + middle + [MASK_ID] + fill(after) + [SEP_ID]
        ex = AgreementExample(
            token_ids=tuple(ids),
            mask_position=1 + before + 1 + between,
            cue_positions=(1 + before,),
            target_id=verb_pair[label.index],
            foil_id=verb_pair[label.other().index],
            number_label=label,
            phenomenon="sva",
        )
        ex.validate(len(vocab))
        examples.append(ex)
    return examples


def is_attractor(vocab: Vocab, token_id: int, label: Number) -> bool:
    word = vocab.tokens[token_id]
    return any(pair[label.other().index] == word for pair in NOUN_PAIRS)


# ---------------------------------------------------------------------------
# JSONL io


class DatasetFormatError(ValueError):
    def __init__(self, line: int, field_name: str, message: str):
        super().__init__(f"line {line}: field {field_name!r}: {message}")
        self.line = line
        self.field = field_name


_REQUIRED = ("token_ids", "mask_position", "cue_positions", "target_id", "foil_id", "number_label")


def _parse_record(rec, lineno: int, vocab: Optional[Vocab]) -> Tuple[AgreementExample, Optional[str]]:
    if not isinstance(rec, dict):
        raise DatasetFormatError(lineno, "<record>", "not a JSON object")
    for key in _REQUIRED:
        if key not in rec:
            raise DatasetFormatError(lineno, key, "missing")

    def int_list(key):
        v = rec[key]
        if not isinstance(v, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in v):
            raise DatasetFormatError(lineno, key, "expected a list of integers")
        return tuple(v)

    def integer(key):
        v = rec[key]
        if not isinstance(v, int) or isinstance(v, bool):
            raise DatasetFormatError(lineno, key, "expected an integer")
        return v

    try:
        label = Number(rec["number_label"])
    except ValueError:
        raise DatasetFormatError(lineno, "number_label", f"unknown label {rec['number_label']!r}") from None
    ex = AgreementExample(
        token_ids=int_list("token_ids"),
        mask_position=integer("mask_position"),
        cue_positions=int_list("cue_positions"),
        target_id=integer("target_id"),
        foil_id=integer("foil_id"),
        number_label=label,
        phenomenon=str(rec.get("phenomenon", "")),
    )
    try:
        ex.validate(len(vocab) if vocab else None)
    except ExampleError as exc:
        name, _, msg = str(exc).partition(": ")
        raise DatasetFormatError(lineno, name, msg) from None
    if "tokens" in rec and vocab is not None and rec["tokens"] != vocab.decode(ex.token_ids):
        raise DatasetFormatError(lineno, "tokens", "does not match token_ids under the vocabulary")
    return ex, rec.get("split")


def save_dataset(dataset: Dataset, path: PathLike, vocab: Optional[Vocab] = None) -> None:
    vocab = vocab or default_vocab()
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            fh.write(json.dumps(ex.to_record(vocab, dataset.split)) + "\n")


def load_dataset(path: PathLike, vocab: Optional[Vocab] = None, split: Optional[Split] = None) -> Dataset:
    vocab = vocab or default_vocab()
    examples = []
    seen_split = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(lineno, "<record>", f"invalid JSON ({exc.msg})") from None
            ex, rec_split = _parse_record(rec, lineno, vocab)
            if rec_split is not None:
                try:
                    seen_split = Split(rec_split)
                except ValueError:
                    raise DatasetFormatError(lineno, "split", f"unknown split {rec_split!r}") from None
            examples.append(ex)
    return Dataset(examples, split or seen_split or Split.TEST)
