"""Weight files: a one-line JSON manifest followed by a raw little-endian f64 blob.

Layout::

    {"format": "ctxmix-weights", "version": 1, "config": {...},
     "tensors": [{"name": ..., "shape": [...], "dtype": "f64",
                  "offset": <bytes into blob>, "length": <bytes>}, ...]}\\n
    <blob>

A pure-text variant (handy for tiny fixtures) is a single JSON document with
``"payload": "inline"`` where each tensor entry carries ``"data"`` as nested
lists instead of ``offset``/``length``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .model import EncoderConfig, ModelWeights, expected_shapes

FORMAT = "ctxmix-weights"
VERSION = 1
_DTYPE = np.dtype("<f8")

PathLike = Union[str, os.PathLike]


class WeightFileError(ValueError):
    pass


class MalformedHeaderError(WeightFileError):
    pass


class MissingTensorError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class TruncatedBlobError(WeightFileError):
    pass


def _manifest(weights: ModelWeights) -> tuple[dict, bytes]:
    entries = []
    chunks = []
    offset = 0
    for name, arr in weights.named_tensors().items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset, "length": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "config": weights.config.to_dict(), "tensors": entries}
    return header, b"".join(chunks)


def save_weights(weights: ModelWeights, path: PathLike, text: bool = False) -> None:
    path = Path(path)
    if text:
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "payload": "inline",
            "config": weights.config.to_dict(),
            "tensors": [
                {"name": k, "shape": list(v.shape), "dtype": "f64", "data": v.tolist()}
                for k, v in weights.named_tensors().items()
            ],
        }
        path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
        return
    header, blob = _manifest(weights)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def _parse_config(header: dict) -> EncoderConfig:
    if header.get("format") != FORMAT:
        raise MalformedHeaderError(f"unexpected format tag {header.get('format')!r}")
    if header.get("version") != VERSION:
        raise MalformedHeaderError(f"unsupported version {header.get('version')!r}")
    if not isinstance(header.get("config"), dict) or not isinstance(header.get("tensors"), list):
        raise MalformedHeaderError("header needs 'config' and 'tensors'")
    try:
        return EncoderConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad config: {exc}") from exc


def _assemble(config: EncoderConfig, tensors: Dict[str, np.ndarray]) -> ModelWeights:
    expected = expected_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise MissingTensorError(f"tensor {name!r} missing from file")
        if tensors[name].shape != shape:
            raise ShapeMismatchError(f"{name}: manifest shape {tensors[name].shape}, config needs {shape}")
    return ModelWeights.from_named(config, {k: tensors[k] for k in expected})


def load_weights(path: PathLike) -> ModelWeights:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    head = raw if newline < 0 else raw[:newline]
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if header is None:
        # pretty-printed text fixture spanning several lines
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedHeaderError(f"cannot parse header: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header is not a JSON object")
    config = _parse_config(header)

    if header.get("payload") == "inline":
        tensors = {}
        for entry in header["tensors"]:
            try:
                arr = np.asarray(entry["data"], dtype=np.float64)
                shape = tuple(entry["shape"])
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedHeaderError(f"bad inline tensor entry: {exc}") from exc
            if arr.shape != shape:
                raise ShapeMismatchError(f"{entry['name']}: data shape {arr.shape} != declared {shape}")
            tensors[entry["name"]] = arr
        return _assemble(config, tensors)

    blob = memoryview(raw)[newline + 1 :]
    tensors = {}
    for entry in header["tensors"]:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"bad tensor entry {entry!r}: {exc}") from exc
        if dtype != "f64":
            raise MalformedHeaderError(f"{name}: unsupported dtype {dtype!r}")
        if length != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
            raise ShapeMismatchError(f"{name}: byte length {length} does not match shape {shape}")
        if offset < 0 or offset + length > len(blob):
            raise TruncatedBlobError(f"{name}: needs bytes {offset}..{offset + length}, blob has {len(blob)}")
        tensors[name] = np.frombuffer(blob[offset : offset + length], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return _assemble(config, tensors)
