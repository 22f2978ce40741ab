"""Post-LN Transformer encoder with full intermediate capture and a hand-written reverse pass.

Layer indexing: representation 0 is the embedding output and representation
``l`` (1..L) is the output of encoder layer ``l``. Encoder layers are therefore
numbered 1..L everywhere in the public API.

Head ``h`` owns column block ``h*dh:(h+1)*dh`` of ``w_q``/``w_k``/``w_v`` and the
matching row block of ``w_o``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import make_rng, softmax


class ModelInputError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, layer: int, what: str = "activations"):
        super().__init__(f"non-finite {what} at layer {layer}")
        self.layer = layer


class TraceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 3
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 64
    max_positions: int = 32
    ln_eps: float = 1e-5
    tie_head: bool = True

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "ffn_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LayerWeights:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    ln_mha_gain: np.ndarray
    ln_mha_bias: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray
    ln_ffn_gain: np.ndarray
    ln_ffn_bias: np.ndarray


LAYER_TENSORS = tuple(f.name for f in fields(LayerWeights))


@dataclass
class ModelWeights:
    """All trainable tensors. Treated as immutable: updates build a new instance."""

    config: EncoderConfig
    token_embeddings: np.ndarray
    position_embeddings: np.ndarray
    layers: List[LayerWeights]
    head_bias: np.ndarray
    head_weight: Optional[np.ndarray] = None  # d x V; None when tied to the embeddings

    @property
    def head_matrix(self) -> np.ndarray:
        if self.head_weight is None:
            return self.token_embeddings.T
        return self.head_weight

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out = {
            "embeddings.token": self.token_embeddings,
            "embeddings.position": self.position_embeddings,
        }
        for i, lw in enumerate(self.layers):
            for name in LAYER_TENSORS:
                out[f"layers.{i}.{name}"] = getattr(lw, name)
        out["head.bias"] = self.head_bias
        if self.head_weight is not None:
            out["head.weight"] = self.head_weight
        return out

    @classmethod
    def from_named(cls, config: EncoderConfig, tensors: Dict[str, np.ndarray]) -> "ModelWeights":
        expected = expected_shapes(config)
        missing = [k for k in expected if k not in tensors]
        if missing:
            raise KeyError(f"missing tensors: {', '.join(missing)}")
        for name, shape in expected.items():
            if tuple(np.shape(tensors[name])) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(tensors[name])}")
        t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        layers = [
            LayerWeights(**{name: t[f"layers.{i}.{name}"] for name in LAYER_TENSORS})
            for i in range(config.num_layers)
        ]
        return cls(
            config=config,
            token_embeddings=t["embeddings.token"],
            position_embeddings=t["embeddings.position"],
            layers=layers,
            head_bias=t["head.bias"],
            head_weight=None if config.tie_head else t["head.weight"],
        )

    def map_tensors(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ModelWeights":
        return ModelWeights.from_named(self.config, {k: fn(k, v) for k, v in self.named_tensors().items()})

    def copy(self) -> "ModelWeights":
        return self.map_tensors(lambda _, v: v.copy())


def expected_shapes(config: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    d, f, V = config.model_dim, config.ffn_dim, config.vocab_size
    layer = {
        "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,), "w_v": (d, d), "b_v": (d,),
        "w_o": (d, d), "ln_mha_gain": (d,), "ln_mha_bias": (d,),
        "w_1": (d, f), "b_1": (f,), "w_2": (f, d), "b_2": (d,),
        "ln_ffn_gain": (d,), "ln_ffn_bias": (d,),
    }
    out = {"embeddings.token": (V, d), "embeddings.position": (config.max_positions, d)}
    for i in range(config.num_layers):
        for k, s in layer.items():
            out[f"layers.{i}.{k}"] = s
    out["head.bias"] = (V,)
    if not config.tie_head:
        out["head.weight"] = (d, V)
    return out


def init_weights(config: EncoderConfig, seed: int = 0) -> ModelWeights:
    """Training initialization.

    Weight matrices ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings
    ~ U(-sqrt(3/d), sqrt(3/d)) so each row has norm close to 1; biases 0;
    layer-norm gains 1.
    """
    rng = make_rng(seed)
    d = config.model_dim
    tensors = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("embeddings."):
            bound = math.sqrt(3.0 / d)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf.endswith("gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights.from_named(config, tensors)


def random_weights(config: EncoderConfig, seed: int = 0, scale: float = 1.0) -> ModelWeights:
    """Fully random weights (biases and gains included) for property tests."""
    rng = make_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gain"):
            tensors[name] = rng.uniform(0.5, 1.5, size=shape)
        elif len(shape) == 1:
            tensors[name] = scale * rng.uniform(-0.5, 0.5, size=shape)
        else:
            bound = scale * math.sqrt(3.0 / shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights.from_named(config, tensors)


# ---------------------------------------------------------------------------
# forward / backward kernels on batches of shape (B, n, d)


@dataclass
class _LNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def _ln_forward(y, gain, bias, eps):
    mu = y.mean(axis=-1, keepdims=True)
    centered = y - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, _LNCache(xhat, inv_std, gain)


def _ln_backward(dout, c: _LNCache):
    dxhat = dout * c.gain
    dy = c.inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - c.xhat * (dxhat * c.xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(dout.ndim - 1))
    return dy, (dout * c.xhat).sum(axis=lead), dout.sum(axis=lead)


def _split_heads(t, H):
    B, n, d = t.shape
    return t.reshape(B, n, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(t):
    B, H, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, n, H * dh)


@dataclass
class _LayerCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    keep: Optional[np.ndarray]
    alpha: np.ndarray
    head_context: np.ndarray
    concat: np.ndarray
    attn_out: np.ndarray
    pre_ln_mha: np.ndarray
    ln_mha: _LNCache
    z: np.ndarray
    ffn_pre: np.ndarray
    ffn_hidden: np.ndarray
    ffn_out: np.ndarray
    pre_ln_ffn: np.ndarray
    ln_ffn: _LNCache
    out: np.ndarray


def _attention_inputs(lw: LayerWeights, x, H):
    q = _split_heads(x @ lw.w_q + lw.b_q, H)
    k = _split_heads(x @ lw.w_k + lw.b_k, H)
    v = _split_heads(x @ lw.w_v + lw.b_v, H)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(q.shape[-1])
    return q, k, v, softmax(scores, axis=-1)


def _layer_tail(lw: LayerWeights, cfg: EncoderConfig, x, q, k, v, keep, alpha) -> _LayerCache:
    v_used = v if keep is None else v * keep[:, None, :, None]
    head_context = alpha @ v_used
    concat = _merge_heads(head_context)
    attn_out = concat @ lw.w_o
    pre_ln_mha = attn_out + x
    z, ln_mha = _ln_forward(pre_ln_mha, lw.ln_mha_gain, lw.ln_mha_bias, cfg.ln_eps)
    ffn_pre = z @ lw.w_1 + lw.b_1
    ffn_hidden = np.maximum(ffn_pre, 0.0)
    ffn_out = ffn_hidden @ lw.w_2 + lw.b_2
    pre_ln_ffn = ffn_out + z
    out, ln_ffn = _ln_forward(pre_ln_ffn, lw.ln_ffn_gain, lw.ln_ffn_bias, cfg.ln_eps)
    return _LayerCache(
        x=x, q=q, k=k, v=v, keep=keep, alpha=alpha, head_context=head_context,
        concat=concat, attn_out=attn_out, pre_ln_mha=pre_ln_mha, ln_mha=ln_mha, z=z,
        ffn_pre=ffn_pre, ffn_hidden=ffn_hidden, ffn_out=ffn_out, pre_ln_ffn=pre_ln_ffn,
        ln_ffn=ln_ffn, out=out,
    )


def _layer_forward(lw: LayerWeights, cfg: EncoderConfig, x) -> _LayerCache:
    q, k, v, alpha = _attention_inputs(lw, x, cfg.num_heads)
    return _layer_tail(lw, cfg, x, q, k, v, None, alpha)


def _layer_backward(lw: LayerWeights, c: _LayerCache, dout, param_grads: Optional[dict]):
    B, n, d = c.x.shape
    dy2, dg2, db2 = _ln_backward(dout, c.ln_ffn)
    dz = dy2.copy()
    dh = dy2 @ lw.w_2.T
    dpre = dh * (c.ffn_pre > 0)
    dz += dpre @ lw.w_1.T
    dy1, dg1, db1 = _ln_backward(dz, c.ln_mha)
    dx = dy1.copy()
    dconcat = dy1 @ lw.w_o.T
    dhead = _split_heads(dconcat, lw.w_o.shape[0] // c.q.shape[-1])
    v_used = c.v if c.keep is None else c.v * c.keep[:, None, :, None]
    dalpha = dhead @ v_used.transpose(0, 1, 3, 2)
    dv = c.alpha.transpose(0, 1, 3, 2) @ dhead
    if c.keep is not None:
        dv = dv * c.keep[:, None, :, None]
    dscores = c.alpha * (dalpha - np.sum(dalpha * c.alpha, axis=-1, keepdims=True))
    dscores /= math.sqrt(c.q.shape[-1])
    dq = _merge_heads(dscores @ c.k)
    dk = _merge_heads(dscores.transpose(0, 1, 3, 2) @ c.q)
    dv = _merge_heads(dv)
    dx += dq @ lw.w_q.T + dk @ lw.w_k.T + dv @ lw.w_v.T

    if param_grads is not None:
        flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
        xf = flat(c.x)
        param_grads["w_q"] = xf.T @ flat(dq)
        param_grads["b_q"] = flat(dq).sum(0)
        param_grads["w_k"] = xf.T @ flat(dk)
        param_grads["b_k"] = flat(dk).sum(0)
        param_grads["w_v"] = xf.T @ flat(dv)
        param_grads["b_v"] = flat(dv).sum(0)
        param_grads["w_o"] = flat(c.concat).T @ flat(dy1)
        param_grads["ln_mha_gain"] = dg1
        param_grads["ln_mha_bias"] = db1
        param_grads["w_1"] = flat(c.z).T @ flat(dpre)
        param_grads["b_1"] = flat(dpre).sum(0)
        param_grads["w_2"] = flat(c.ffn_hidden).T @ flat(dy2)
        param_grads["b_2"] = flat(dy2).sum(0)
        param_grads["ln_ffn_gain"] = dg2
        param_grads["ln_ffn_bias"] = db2
    return dx


def _check_ids(config: EncoderConfig, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ModelInputError("token_ids must be a non-empty sequence")
    if ids.shape[1] > config.max_positions:
        raise ModelInputError(f"sequence length {ids.shape[1]} exceeds max_positions {config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ModelInputError(f"token id out of range [0, {config.vocab_size})")
    return ids


def embed(weights: ModelWeights, token_ids) -> np.ndarray:
    ids = _check_ids(weights.config, token_ids)
    return weights.token_embeddings[ids] + weights.position_embeddings[: ids.shape[1]]


def _run_layers(weights: ModelWeights, x, start: int = 0) -> List[_LayerCache]:
    caches = []
    for idx in range(start, weights.config.num_layers):
        c = _layer_forward(weights.layers[idx], weights.config, x)
        if not np.all(np.isfinite(c.out)):
            raise NumericError(idx + 1)
        caches.append(c)
        x = c.out
    return caches


# ---------------------------------------------------------------------------
# public single-example API


@dataclass
class LayerTrace:
    """Everything encoder layer ``layer`` (1-based) computed for one input."""

    layer: int
    inputs: np.ndarray  # n x d
    alpha: np.ndarray  # H x n x n
    values: np.ndarray  # H x n x dh
    head_context: np.ndarray  # H x n x dh
    attn_output: np.ndarray  # n x d, concat(heads) @ W_O before the residual
    pre_ln_mha: np.ndarray  # n x d
    context: np.ndarray  # n x d, after LN_MHA
    pre_ln_ffn: np.ndarray  # n x d
    outputs: np.ndarray  # n x d


@dataclass
class ForwardTrace:
    token_ids: Tuple[int, ...]
    embeddings: np.ndarray
    layers: List[LayerTrace]
    logits: np.ndarray  # n x V, MLM head on the final layer

    @property
    def n(self) -> int:
        return len(self.token_ids)

    @property
    def representations(self) -> List[np.ndarray]:
        return [self.embeddings] + [lt.outputs for lt in self.layers]

    def layer(self, layer: int) -> LayerTrace:
        return self.layers[layer - 1]


def _trace_from_cache(layer: int, c: _LayerCache, b: int = 0) -> LayerTrace:
    return LayerTrace(
        layer=layer,
        inputs=c.x[b],
        alpha=c.alpha[b],
        values=c.v[b],
        head_context=c.head_context[b],
        attn_output=c.attn_out[b],
        pre_ln_mha=c.pre_ln_mha[b],
        context=c.z[b],
        pre_ln_ffn=c.pre_ln_ffn[b],
        outputs=c.out[b],
    )


def forward(weights: ModelWeights, token_ids: Sequence[int]) -> ForwardTrace:
    x0 = embed(weights, token_ids)
    if x0.shape[0] != 1:
        raise ModelInputError("forward takes a single sequence")
    caches = _run_layers(weights, x0)
    final = caches[-1].out[0] if caches else x0[0]
    logits = final @ weights.head_matrix + weights.head_bias
    return ForwardTrace(
        token_ids=tuple(int(t) for t in np.asarray(token_ids).ravel()),
        embeddings=x0[0],
        layers=[_trace_from_cache(i + 1, c) for i, c in enumerate(caches)],
        logits=logits,
    )


def forward_batch(weights: ModelWeights, token_ids) -> np.ndarray:
    """Final-layer MLM logits for a (B, n) batch of equal-length sequences."""
    x = embed(weights, token_ids)
    caches = _run_layers(weights, x)
    final = caches[-1].out if caches else x
    return final @ weights.head_matrix + weights.head_bias


def hidden_states_batch(weights: ModelWeights, token_ids) -> List[np.ndarray]:
    """Representations 0..L for a (B, n) batch, each of shape (B, n, d)."""
    x = embed(weights, token_ids)
    return [x] + [c.out for c in _run_layers(weights, x)]


@dataclass
class ZeroedOutputs:
    outputs: np.ndarray  # Z x n x d, one block per zeroing pattern
    alpha: np.ndarray  # H x n x n, shared by all patterns


def run_layer_with_value_mask(
    weights: ModelWeights, trace: ForwardTrace, layer: int, keep: np.ndarray
) -> ZeroedOutputs:
    """Re-run encoder ``layer`` from its recorded inputs with value vectors masked.

    ``keep`` has shape (Z, n); ``keep[z, j] == 0`` zeroes ``v_j`` in every head for
    pattern ``z``. Queries, keys and attention weights are computed once from the
    untouched layer inputs, so they are identical across patterns.
    """
    cfg = weights.config
    if not 1 <= layer <= cfg.num_layers:
        raise ModelInputError(f"layer must be in 1..{cfg.num_layers}, got {layer}")
    if len(trace.layers) != cfg.num_layers:
        raise TraceMismatchError("trace layer count does not match the weights")
    lt = trace.layer(layer)
    lw = weights.layers[layer - 1]
    keep = np.asarray(keep, dtype=np.float64)
    n = trace.n
    if keep.ndim != 2 or keep.shape[1] != n:
        raise ModelInputError(f"keep mask must have shape (Z, {n})")

    x = lt.inputs[None]
    q, k, v, alpha = _attention_inputs(lw, x, cfg.num_heads)
    if not np.array_equal(alpha[0], lt.alpha):
        raise TraceMismatchError(f"attention at layer {layer} differs from the recorded trace")
    Z = keep.shape[0]
    both = np.concatenate([np.ones((1, n)), keep])
    c = _layer_tail(
        lw, cfg,
        np.broadcast_to(x, (Z + 1,) + x.shape[1:]),
        q, k, np.broadcast_to(v, (Z + 1,) + v.shape[1:]),
        both, np.broadcast_to(alpha, (Z + 1,) + alpha.shape[1:]),
    )
    if not np.allclose(c.out[0], lt.outputs, rtol=0, atol=1e-9):
        raise TraceMismatchError(f"layer {layer} outputs do not reproduce the recorded trace")
    return ZeroedOutputs(outputs=c.out[1:], alpha=alpha[0])


def forward_value_zeroed(
    weights: ModelWeights,
    token_ids: Sequence[int],
    layer: int,
    zeroed_token: int,
    prior_trace: ForwardTrace,
) -> ZeroedOutputs:
    """Outputs of ``layer`` when token ``zeroed_token`` contributes a zero value vector."""
    if tuple(int(t) for t in token_ids) != prior_trace.token_ids:
        raise TraceMismatchError("token_ids differ from the trace")
    n = prior_trace.n
    if not 0 <= zeroed_token < n:
        raise ModelInputError(f"zeroed_token {zeroed_token} out of range for n={n}")
    keep = np.ones((1, n))
    keep[0, zeroed_token] = 0.0
    res = run_layer_with_value_mask(weights, prior_trace, layer, keep)
    return ZeroedOutputs(outputs=res.outputs[0], alpha=res.alpha)


def mlm_logits(weights: ModelWeights, trace: ForwardTrace, position: int) -> np.ndarray:
    if not 0 <= position < trace.n:
        raise ModelInputError(f"position {position} out of range for n={trace.n}")
    return trace.representations[-1][position] @ weights.head_matrix + weights.head_bias


# ---------------------------------------------------------------------------
# gradients


def target_and_gradient(
    weights: ModelWeights,
    reps: np.ndarray,
    layer: int,
    position: int,
    target_id: int,
    objective: str = "logit",
) -> Tuple[np.ndarray, np.ndarray]:
    """Target score and its gradient w.r.t. representation ``layer``.

    ``reps`` has shape (n, d) or (B, n, d); the layers above ``layer`` are run on
    it directly. ``objective`` is ``"logit"`` (raw target logit) or ``"logprob"``
    (log-softmax over the full vocabulary).
    """
    cfg = weights.config
    if not 0 <= layer <= cfg.num_layers:
        raise ModelInputError(f"layer must be in 0..{cfg.num_layers}")
    if not 0 <= target_id < cfg.vocab_size:
        raise ModelInputError(f"target id {target_id} out of range")
    if objective not in ("logit", "logprob"):
        raise ValueError(f"unknown objective {objective!r}")
    x = np.asarray(reps, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if not 0 <= position < x.shape[1]:
        raise ModelInputError(f"position {position} out of range")

    caches = _run_layers(weights, x, start=layer)
    final = caches[-1].out if caches else x
    logits_m = final[:, position] @ weights.head_matrix + weights.head_bias
    dlogit = np.zeros_like(logits_m)
    dlogit[:, target_id] = 1.0
    if objective == "logit":
        value = logits_m[:, target_id]
    else:
        p = softmax(logits_m, axis=-1)
        value = np.log(p[:, target_id])
        dlogit -= p
    dx = np.zeros_like(final)
    dx[:, position] = dlogit @ weights.head_matrix.T
    for offset in range(len(caches) - 1, -1, -1):
        dx = _layer_backward(weights.layers[layer + offset], caches[offset], dx, None)
    if not np.all(np.isfinite(dx)):
        raise NumericError(layer, "gradients")
    return (value[0], dx[0]) if single else (value, dx)


def grad_wrt_layer(
    weights: ModelWeights,
    token_ids: Sequence[int],
    layer: int,
    target_id: int,
    mask: int,
    objective: str = "logit",
) -> np.ndarray:
    trace_reps = hidden_states_batch(weights, token_ids)
    _, grad = target_and_gradient(weights, trace_reps[layer][0], layer, mask, target_id, objective)
    return grad


def loss_and_gradients(
    weights: ModelWeights,
    token_ids: np.ndarray,
    loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Full reverse pass for a (B, n) batch.

    ``loss_fn`` maps the (B, n, V) logits to ``(loss, dloss/dlogits)``. Returns
    the loss and one gradient per entry of ``weights.named_tensors()``.
    """
    cfg = weights.config
    ids = _check_ids(cfg, token_ids)
    x0 = embed(weights, ids)
    caches = _run_layers(weights, x0)
    final = caches[-1].out if caches else x0
    logits = final @ weights.head_matrix + weights.head_bias
    loss, dlogits = loss_fn(logits)
    if not np.isfinite(loss):
        raise NumericError(cfg.num_layers, "loss")

    grads: Dict[str, np.ndarray] = {}
    flat_final = final.reshape(-1, cfg.model_dim)
    flat_dlogits = dlogits.reshape(-1, cfg.vocab_size)
    d_head = flat_final.T @ flat_dlogits
    grads["head.bias"] = flat_dlogits.sum(0)
    d_token = np.zeros_like(weights.token_embeddings)
    if cfg.tie_head:
        d_token += d_head.T
    else:
        grads["head.weight"] = d_head
    dx = dlogits @ weights.head_matrix.T
    for idx in range(cfg.num_layers - 1, -1, -1):
        layer_grads: dict = {}
        dx = _layer_backward(weights.layers[idx], caches[idx], dx, layer_grads)
        for k, v in layer_grads.items():
            grads[f"layers.{idx}.{k}"] = v
    np.add.at(d_token, ids.ravel(), dx.reshape(-1, cfg.model_dim))
    grads["embeddings.token"] = d_token
    d_pos = np.zeros_like(weights.position_embeddings)
    d_pos[: ids.shape[1]] = dx.sum(axis=0)
    grads["embeddings.position"] = d_pos
    return float(loss), grads
