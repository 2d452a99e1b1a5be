"""Small pre-norm decoder-only transformer with MLP activation capture.

Architecture (fixed): token + learned absolute position embeddings, then per block
``h += Attn(RMSNorm(h))`` and ``h += MLP(RMSNorm(h))``, a final RMSNorm and an
untied ``lm_head``. Attention is causal multi-head softmax attention without biases.

The captured activation of an MLP is the vector that multiplies ``W_out``:
``gelu_tanh(W_in h + b_in)`` for plain MLPs and ``silu(W_gate h) * (W_in h + b_in)``
for gated ones. Neuron ``j`` is therefore row ``j`` of ``W_in`` (and ``W_gate``),
entry ``j`` of ``b_in`` and column ``j`` of ``W_out``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, ValidationError
from .tensor_store import ArchitectureSpec, ModelCheckpoint, block_prefix, mlp_names

RMS_EPS = 1e-5
_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def gelu_tanh(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + np.float32(0.044715) * x * x * x)))


def silu(x):
    # exp(-x) overflowing to inf for very negative x still yields the right limit (-0).
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def rms_norm(x, gain):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(RMS_EPS)) * gain


@dataclass(frozen=True)
class ActivationTrace:
    """Per-block ``(seq_len, d_ff)`` post-activation matrices."""

    blocks: tuple
    seq_len: int
    mlp_inputs: tuple | None = None

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, layer):
        return self.blocks[layer]


def block_mlp_params(ckpt: ModelCheckpoint, layer: int) -> dict[str, np.ndarray]:
    names = mlp_names(layer)
    params = {key: ckpt.tensors[name] for key, name in names.items() if name in ckpt.tensors}
    return params


def mlp_block(params: Mapping[str, np.ndarray], hidden):
    """Apply one MLP to ``hidden`` (a ``d_model`` vector or a ``(T, d_model)`` matrix).

    Returns ``(output, post_activation)``; ``post_activation`` is exactly what
    enters ``W_out``.
    """
    w_in, b_in, w_out = params["w_in"], params["b_in"], params["w_out"]
    w_gate = params.get("w_gate")
    hidden = np.asarray(hidden, dtype=np.float32)
    d_ff, d_model = w_in.shape
    if hidden.shape[-1] != d_model or b_in.shape != (d_ff,) or w_out.shape != (d_model, d_ff):
        raise ValidationError(
            f"MLP shape mismatch: hidden {hidden.shape}, w_in {w_in.shape}, "
            f"b_in {b_in.shape}, w_out {w_out.shape}"
        )
    if w_gate is not None and w_gate.shape != w_in.shape:
        raise ValidationError(f"gate shape {w_gate.shape} does not match w_in {w_in.shape}")
    up = hidden @ w_in.T + b_in
    if w_gate is None:
        post = gelu_tanh(up)
    else:
        post = silu(hidden @ w_gate.T) * up
    return post @ w_out.T, post


def _attention(x, wq, wk, wv, wo, n_heads):
    seq, d = x.shape
    hd = d // n_heads
    q = (x @ wq.T).reshape(seq, n_heads, hd).transpose(1, 0, 2)
    k = (x @ wk.T).reshape(seq, n_heads, hd).transpose(1, 0, 2)
    v = (x @ wv.T).reshape(seq, n_heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(hd))
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores = np.where(future, np.float32(-np.inf), scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    out = (weights @ v).transpose(1, 0, 2).reshape(seq, d)
    return out @ wo.T


def check_tokens(spec: ArchitectureSpec, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("token_ids must be a non-empty 1-D sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token_ids must be integers, got dtype {ids.dtype}")
    if ids.size > spec.context_length:
        raise InputError(f"sequence length {ids.size} exceeds context limit {spec.context_length}")
    bad = (ids < 0) | (ids >= spec.vocab_size)
    if bad.any():
        pos = int(np.argmax(bad))
        raise InputError(f"token id {int(ids[pos])} at position {pos} outside [0, {spec.vocab_size})")
    return ids.astype(np.int64)


def forward(ckpt: ModelCheckpoint, token_ids: Sequence[int], capture: bool = False,
            capture_inputs: bool = False):
    """Return ``(logits, trace)``; ``trace`` is None unless ``capture`` is set.

    ``capture_inputs`` additionally records the normalized MLP inputs per block.
    """
    spec = ckpt.spec
    ids = check_tokens(spec, token_ids)
    t = ckpt.tensors
    seq = ids.size
    h = t["tok_embed"][ids] + t["pos_embed"][:seq]
    posts, inputs = [], []
    for layer in range(spec.n_blocks):
        p = block_prefix(layer)
        a = rms_norm(h, t[f"{p}.attn_norm"])
        h = h + _attention(a, t[f"{p}.attn.w_q"], t[f"{p}.attn.w_k"], t[f"{p}.attn.w_v"],
                           t[f"{p}.attn.w_o"], spec.n_heads)
        m = rms_norm(h, t[f"{p}.mlp_norm"])
        out, post = mlp_block(block_mlp_params(ckpt, layer), m)
        h = h + out
        if capture:
            posts.append(post)
        if capture_inputs:
            inputs.append(m)
    logits = rms_norm(h, t["final_norm"]) @ t["lm_head"].T
    trace = None
    if capture or capture_inputs:
        trace = ActivationTrace(tuple(posts), seq, tuple(inputs) if capture_inputs else None)
    return logits, trace
