"""Cross-modal fusion: input projections, dummy-token cross attention,
and a pre-norm transformer encoder.

The cross attention computes key weights over query words *plus* learnable
dummy tokens, but sums values over the real words only, so dummy tokens
can absorb attention mass for video content the query does not cover.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

FF_MULT = 4


# --- parameter construction -------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return scale * rng.normal(size=(fan_in, fan_out))


def _linear(params, rng, name, fan_in, fan_out, bias=True):
    params[f"{name}.w"] = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _layer_norm_params(params, name, d):
    params[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{name}.s"] = Tensor(np.zeros(d), requires_grad=True)


def _attention_params(params, rng, name, d):
    for proj in ("wq", "wk", "wv", "wo"):
        params[f"{name}.{proj}"] = Tensor(glorot(rng, d, d), requires_grad=True)


def init_fusion_params(
    rng: np.random.Generator,
    video_dim: int,
    query_dim: int,
    d: int,
    n_dummies: int,
    encoder_layers: int,
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _linear(params, rng, "video_mlp.l1", video_dim, d)
    _linear(params, rng, "video_mlp.l2", d, d)
    _linear(params, rng, "text_mlp.l1", query_dim, d)
    _linear(params, rng, "text_mlp.l2", d, d)
    if n_dummies > 0:
        params["dummy.tokens"] = Tensor(
            0.02 * rng.normal(size=(n_dummies, d)), requires_grad=True
        )
        _attention_params(params, rng, "dummy.attn", d)
        _layer_norm_params(params, "dummy.ln", d)
    _attention_params(params, rng, "aca", d)
    _layer_norm_params(params, "aca.ln", d)
    for i in range(encoder_layers):
        _layer_norm_params(params, f"enc{i}.ln1", d)
        _attention_params(params, rng, f"enc{i}.attn", d)
        _layer_norm_params(params, f"enc{i}.ln2", d)
        _linear(params, rng, f"enc{i}.ff.l1", d, FF_MULT * d)
        _linear(params, rng, f"enc{i}.ff.l2", FF_MULT * d, d)
    return params


# --- forward pieces -----------------------------------------------------------


def linear(x: Tensor, params, name) -> Tensor:
    out = T.matmul(x, params[f"{name}.w"])
    if f"{name}.b" in params:
        out = T.add(out, params[f"{name}.b"])
    return out


def mlp(x: Tensor, params, name) -> Tensor:
    return linear(T.relu(linear(x, params, f"{name}.l1")), params, f"{name}.l2")


def project_inputs(video: Tensor, text: Tensor, params) -> tuple[Tensor, Tensor]:
    """Both modalities into the shared width-d space."""
    if text.data.shape[0] < 1:
        raise ValueError("query must contain at least one token")
    return mlp(video, params, "video_mlp"), mlp(text, params, "text_mlp")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(L, d) -> (heads, L, d/heads), all heads batched."""
    length, d = x.data.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    return T.permute(T.reshape(x, (length, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    heads, length, dh = x.data.shape
    return T.reshape(T.permute(x, (1, 0, 2)), (length, heads * dh))


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params,
    name: str,
    heads: int,
    key_mask=None,
) -> Tensor:
    """Standard multi-head attention; masked keys are excluded per head."""
    d = params[f"{name}.wq"].data.shape[1]
    scale = Tensor(1.0 / math.sqrt(d / heads))
    q3 = split_heads(T.matmul(q_in, params[f"{name}.wq"]), heads)
    k3 = split_heads(T.matmul(kv_in, params[f"{name}.wk"]), heads)
    v3 = split_heads(T.matmul(kv_in, params[f"{name}.wv"]), heads)
    logits = T.mul(T.bmm(q3, T.permute(k3, (0, 2, 1))), scale)
    w = T.masked_softmax(logits, key_mask)
    return T.matmul(merge_heads(T.bmm(w, v3)), params[f"{name}.wo"])


def encode_dummies(params, heads: int) -> Tensor:
    """One pre-norm self-attention block (with residual) over the dummy tokens."""
    d_tokens = params["dummy.tokens"]
    normed = T.layer_norm(d_tokens, params["dummy.ln.g"], params["dummy.ln.s"])
    return T.add(d_tokens, multi_head_attention(normed, normed, params, "dummy.attn", heads))


def adaptive_cross_attention(
    v_proj: Tensor,
    q_proj: Tensor,
    params,
    heads: int,
    query_mask=None,
    residual: bool = True,
    mask_dummies: bool = False,
):
    """Fuse clip features with query words through dummy-augmented attention.

    Returns (fused (L_v, d), attention_mass (L_v,)): the mass is the
    head-averaged weight each clip places on real words, always <= 1, and
    exactly 1 when there are no dummy tokens. ``mask_dummies`` removes the
    dummy keys from the softmax (the minus-infinity-logit limit), a test hook.
    """
    n_words = q_proj.data.shape[0]
    qmask = np.ones(n_words, dtype=bool) if query_mask is None else np.asarray(query_mask, dtype=bool)
    if not qmask.any():
        raise ValueError("all query tokens masked")

    has_dummies = "dummy.tokens" in params
    if has_dummies:
        dummies = encode_dummies(params, heads)
        keys_in = T.concat([q_proj, dummies], axis=0)
        n_dummies = dummies.data.shape[0]
        dmask = np.zeros(n_dummies, dtype=bool) if mask_dummies else np.ones(n_dummies, dtype=bool)
        key_mask = np.concatenate([qmask, dmask])
    else:
        keys_in = q_proj
        key_mask = qmask

    d = params["aca.wq"].data.shape[1]
    scale = Tensor(1.0 / math.sqrt(d / heads))
    q3 = split_heads(T.matmul(v_proj, params["aca.wq"]), heads)
    k3 = split_heads(T.matmul(keys_in, params["aca.wk"]), heads)
    v3 = split_heads(T.matmul(q_proj, params["aca.wv"]), heads)  # values: real words only

    logits = T.mul(T.bmm(q3, T.permute(k3, (0, 2, 1))), scale)
    w = T.masked_softmax(logits, key_mask)  # (heads, L_v, n_words + n_dummies)
    w_words = T.narrow(w, 2, 0, n_words)
    mass = w_words.data.sum(axis=2).mean(axis=0)
    fused = T.matmul(merge_heads(T.bmm(w_words, v3)), params["aca.wo"])
    if residual:
        fused = T.layer_norm(
            T.add(v_proj, fused), params["aca.ln.g"], params["aca.ln.s"]
        )
    return fused, mass


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    dim = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * dim / d))
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def encode(
    x: Tensor,
    params,
    heads: int,
    n_layers: int,
    mask=None,
    positions: bool = True,
) -> Tensor:
    """Pre-norm encoder stack; position signal added once at entry."""
    if n_layers == 0:
        return x
    if positions:
        x = T.add(x, Tensor(sinusoidal_positions(*x.data.shape)))
    for i in range(n_layers):
        h = T.layer_norm(x, params[f"enc{i}.ln1.g"], params[f"enc{i}.ln1.s"])
        x = T.add(x, multi_head_attention(h, h, params, f"enc{i}.attn", heads, key_mask=mask))
        h = T.layer_norm(x, params[f"enc{i}.ln2.g"], params[f"enc{i}.ln2.s"])
        ff = linear(T.relu(linear(h, params, f"enc{i}.ff.l1")), params, f"enc{i}.ff.l2")
        x = T.add(x, ff)
    return x
