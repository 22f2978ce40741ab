import json
import struct
from pathlib import Path

import numpy as np
import pytest

from ctxmix.model import EncoderConfig, forward, random_weights
from ctxmix.weights_io import (
    MalformedHeaderError,
    MissingTensorError,
    ShapeMismatchError,
    TruncatedBlobError,
    load_weights,
    save_weights,
)

FIXTURES = Path(__file__).parent / "fixtures"


def _same(a, b):
    ta, tb = a.named_tensors(), b.named_tensors()
    return a.config == b.config and ta.keys() == tb.keys() and all(np.array_equal(ta[k], tb[k]) for k in ta)


@pytest.mark.parametrize("tie", [True, False])
@pytest.mark.parametrize("text", [False, True])
def test_round_trip_bit_identical(tmp_path, tie, text):
    cfg = EncoderConfig(num_layers=2, num_heads=2, model_dim=4, ffn_dim=6, vocab_size=7, max_positions=5, tie_head=tie)
    w = random_weights(cfg, seed=1)
    path = tmp_path / "w.bin"
    save_weights(w, path, text=text)
    assert _same(w, load_weights(path))


def _independent_writer(weights, path):
    """Second writer: tensors stored in reverse order, header keys unsorted, packed with struct."""
    named = list(weights.named_tensors().items())[::-1]
    entries, blob = [], b""
    for name, arr in named:
        flat = arr.ravel().tolist()
        payload = struct.pack("<%dd" % len(flat), *flat)
        entries.append({"length": len(payload), "offset": len(blob), "dtype": "f64", "shape": list(arr.shape), "name": name})
        blob += payload
    header = {"tensors": entries, "config": weights.config.to_dict(), "version": 1, "format": "ctxmix-weights"}
    path.write_bytes(json.dumps(header).encode() + b"\n" + blob)


def test_cross_writer_fixture(tmp_path):
    w = random_weights(EncoderConfig(num_layers=1, num_heads=2, model_dim=4, ffn_dim=3, vocab_size=6, max_positions=4), seed=2)
    path = tmp_path / "other.bin"
    _independent_writer(w, path)
    assert _same(w, load_weights(path))


def test_text_fixture():
    w = load_weights(FIXTURES / "tiny_weights.json")
    assert w.config.model_dim == 2 and w.config.vocab_size == 3
    np.testing.assert_array_equal(w.layers[0].w_2, [[3.0, -3.0]])
    np.testing.assert_array_equal(w.head_bias, [0.0, 0.5, -0.5])
    trace = forward(w, [0, 2])
    assert trace.logits.shape == (2, 3)


def _binary(tmp_path):
    w = random_weights(EncoderConfig(num_layers=1, num_heads=1, model_dim=2, ffn_dim=2, vocab_size=3, max_positions=2), seed=0)
    path = tmp_path / "w.bin"
    save_weights(w, path)
    raw = path.read_bytes()
    nl = raw.index(b"\n")
    return path, json.loads(raw[:nl]), raw[nl + 1 :]


def _rewrite(path, header, blob):
    path.write_bytes(json.dumps(header).encode() + b"\n" + blob)


def test_missing_tensor(tmp_path):
    path, header, blob = _binary(tmp_path)
    header["tensors"] = [t for t in header["tensors"] if t["name"] != "layers.0.w_v"]
    _rewrite(path, header, blob)
    with pytest.raises(MissingTensorError, match="layers.0.w_v"):
        load_weights(path)


def test_truncated_blob(tmp_path):
    path, header, blob = _binary(tmp_path)
    _rewrite(path, header, blob[:-8])
    with pytest.raises(TruncatedBlobError):
        load_weights(path)


def test_shape_mismatch(tmp_path):
    path, header, blob = _binary(tmp_path)
    entry = next(t for t in header["tensors"] if t["name"] == "layers.0.w_o")
    entry["shape"] = [4, 1]
    _rewrite(path, header, blob)
    with pytest.raises(ShapeMismatchError):
        load_weights(path)


@pytest.mark.parametrize("head", [b"not json at all", b'{"format": "something-else", "version": 1}', b"[1, 2]"])
def test_malformed_header(tmp_path, head):
    path = tmp_path / "bad.bin"
    path.write_bytes(head + b"\n\x00\x01")
    with pytest.raises(MalformedHeaderError):
        load_weights(path)
