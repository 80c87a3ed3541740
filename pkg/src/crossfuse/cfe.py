"""Cross-modal feature enhancement: one direction of the dual
cross-attention pair.

Queries come from the auxiliary modality, keys and values from the
modality being enhanced.  The attention result is reprojected, blended
with the input through learnable scalar coefficients, and refined by a
two-layer feed-forward network:

    z  = multi_head_attention(q=aux, k=v=target)
    t' = alpha * (z @ w_o) + beta * target
    out = gamma * t' + delta * ffn(t')

All four coefficients start at 1.  Heads slice the channel axis into
contiguous blocks; scores are scaled by 1/sqrt(C / heads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import ConfigurationError, DimensionError, Tensor
from .token_codec import TokenSeq


@dataclass
class CfeParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    delta: Tensor
    heads: int = 8

    def __post_init__(self):
        c = self.w_q.shape[0]
        if c % self.heads:
            raise ConfigurationError(
                f"channel width {c} not divisible by {self.heads} heads"
            )

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_w1.shape[1]

    def named_tensors(self, prefix: str = ""):
        for name in ("w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_b1", "ffn_w2",
                     "ffn_b2", "alpha", "beta", "gamma", "delta"):
            yield prefix + name, getattr(self, name)


def init_cfe_params(channels: int, ffn_hidden: int, heads: int,
                    rng: np.random.Generator, dtype=tc.STANDARD,
                    coefficients=(1.0, 1.0, 1.0, 1.0)) -> CfeParams:
    """Projection and FFN weights uniform in +-1/sqrt(C), biases zero,
    residual coefficients at 1 unless overridden."""
    bound = 1.0 / math.sqrt(channels)

    def uniform(shape):
        return Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)

    a, b, g, d = coefficients
    return CfeParams(
        w_q=uniform((channels, channels)),
        w_k=uniform((channels, channels)),
        w_v=uniform((channels, channels)),
        w_o=uniform((channels, channels)),
        ffn_w1=uniform((channels, ffn_hidden)),
        ffn_b1=tc.zeros((ffn_hidden,), dtype=dtype),
        ffn_w2=uniform((ffn_hidden, channels)),
        ffn_b2=tc.zeros((channels,), dtype=dtype),
        alpha=tc.scalar(a, dtype=dtype),
        beta=tc.scalar(b, dtype=dtype),
        gamma=tc.scalar(g, dtype=dtype),
        delta=tc.scalar(d, dtype=dtype),
        heads=heads,
    )


def cross_attention(q_tokens: TokenSeq, kv_tokens: TokenSeq, p: CfeParams,
                    return_weights: bool = False):
    """Multi-head scaled dot-product attention across two token sequences.

    Returns the concatenated head outputs (T_q x C), before the output
    projection.  With ``return_weights`` also returns the per-head
    attention probability matrices.
    """
    if q_tokens.channels != kv_tokens.channels:
        raise DimensionError(
            f"channel widths differ: queries {q_tokens.tokens.shape} vs "
            f"keys/values {kv_tokens.tokens.shape}"
        )
    c = q_tokens.channels
    if c != p.channels:
        raise DimensionError(
            f"token channels {c} do not match parameter channels {p.channels}"
        )
    heads = p.heads
    d_k = c // heads
    scale = 1.0 / math.sqrt(d_k)
    with tc.op_stage("proj"):
        q = tc.matmul(q_tokens.tokens, p.w_q)
        k = tc.matmul(kv_tokens.tokens, p.w_k)
        v = tc.matmul(kv_tokens.tokens, p.w_v)
    outputs = []
    weights = []
    for j in range(heads):
        lo, hi = j * d_k, (j + 1) * d_k
        qj = tc.col_slice(q, lo, hi)
        kj = tc.col_slice(k, lo, hi)
        vj = tc.col_slice(v, lo, hi)
        with tc.op_stage("attention_qk"):
            scores = tc.matmul(qj, tc.transpose(kj))
        probs = tc.softmax_rows(tc.const_scale(scores, scale))
        if return_weights:
            weights.append(probs)
        with tc.op_stage("attention_av"):
            outputs.append(tc.matmul(probs, vj))
    z = outputs[0] if heads == 1 else tc.concat_cols(outputs)
    if return_weights:
        return z, weights
    return z


def ffn(x: Tensor, p: CfeParams) -> Tensor:
    """Two fully-connected layers with a rectifier between them."""
    with tc.op_stage("ffn"):
        hidden = tc.matmul(x, p.ffn_w1)
    hidden = tc.relu(tc.add(hidden, p.ffn_b1))
    with tc.op_stage("ffn"):
        out = tc.matmul(hidden, p.ffn_w2)
    return tc.add(out, p.ffn_b2)


def cfe_forward(t_target: TokenSeq, t_aux: TokenSeq, p: CfeParams,
                attention_kv: TokenSeq | None = None) -> TokenSeq:
    """Enhance `t_target` with information queried from `t_aux`.

    `attention_kv` overrides the key/value source (defaults to the target
    itself); the residual path always keeps the target's own row order.
    """
    kv = t_target if attention_kv is None else attention_kv
    z = cross_attention(t_aux, kv, p)
    with tc.op_stage("proj"):
        z_proj = tc.matmul(z, p.w_o)
    attended = tc.scalar_mul(p.alpha, z_proj)
    t_prime = tc.add(attended, tc.scalar_mul(p.beta, t_target.tokens))
    out = tc.add(tc.scalar_mul(p.gamma, t_prime), tc.scalar_mul(p.delta, ffn(t_prime, p)))
    return TokenSeq(out, t_target.origin_h, t_target.origin_w)
