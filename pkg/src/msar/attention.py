"""Transformer building blocks: scaled dot-product attention, multi-head
attention, the time-restricted (banded) variant, sinusoidal positions, and
pre-norm encoder/decoder layers.

Sequences are (T, d) tensors without a batch axis; batching happens one
utterance at a time at the training level. The banded variant realizes the
per-query key/value window as one boolean mask over the full score matrix,
which is numerically identical to slicing keys and values per query.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .numerics import (
    Tensor,
    dropout,
    einsum,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)


@dataclasses.dataclass
class AttentionConfig:
    """Layer geometry: model width, head count, feed-forward width, and the
    optional (left, right) context window in frames (None = unrestricted)."""

    d_att: int = 256
    n_heads: int = 4
    d_ff: int = 2048
    window: tuple[int, int] | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_att % self.n_heads != 0:
            raise ConfigError(f"d_att {self.d_att} not divisible by {self.n_heads} heads")
        if self.window is not None:
            left, right = self.window
            if left < 0 or right < 0:
                raise ConfigError(f"window sides must be nonnegative, got {self.window}")


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Tensor(xavier_uniform(rng, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNormParams:
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


def band_mask(t: int, left: int, right: int) -> np.ndarray:
    """Boolean (t, t) mask permitting key s for query q iff q-l <= s <= q+r.

    Clipped at the sequence bounds; the diagonal is always permitted, so no
    row is ever empty.
    """
    if left < 0 or right < 0:
        raise ContractError(f"band sides must be nonnegative, got ({left}, {right})")
    q = np.arange(t)[:, None]
    s = np.arange(t)[None, :]
    return (s >= q - left) & (s <= q + right)


def causal_mask(t: int) -> np.ndarray:
    """Strict lower triangle plus diagonal."""
    q = np.arange(t)[:, None]
    s = np.arange(t)[None, :]
    return s <= q


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    if not mask.any(axis=1).all():
        raise ContractError("attention mask leaves a query row with no permitted keys")
    return np.where(mask, 0.0, -np.inf)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """softmax(q k^T / sqrt(d) + mask_bias) v.

    Works on (Tq, d) or head-stacked (h, Tq, d) inputs; disallowed positions
    receive a -inf bias before the softmax.
    """
    d = k.shape[-1]
    if q.shape[-1] != d or v.shape[:-1] != k.shape[:-1]:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if q.ndim == 2:
        scores = einsum("id,jd->ij", q, k) * (1.0 / np.sqrt(d))
    else:
        scores = einsum("hid,hjd->hij", q, k) * (1.0 / np.sqrt(d))
    if mask is not None:
        scores = scores + Tensor(_mask_bias(mask))
    weights = softmax(scores, axis=-1)
    if q.ndim == 2:
        out = einsum("ij,jd->id", weights, v)
    else:
        out = einsum("hij,hjd->hid", weights, v)
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention:
    """Per-head projected attention, concatenated and output-projected.

    The packed q/k/v projections are d_att x d_att; head h owns columns
    [h*dk, (h+1)*dk) with dk = d_att / n_heads.
    """

    def __init__(self, config: AttentionConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_att
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_head = Linear(d, d, rng)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        d, h = self.config.d_att, self.config.n_heads
        if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
            raise ShapeError(f"multi-head width mismatch: expected {d}, "
                             f"got q{q.shape} k{k.shape} v{v.shape}")
        dk = d // h

        def split(t: Tensor, n: int) -> Tensor:
            return transpose(reshape(t, (n, h, dk)), (1, 0, 2))

        tq, tk = q.shape[0], k.shape[0]
        qh = split(self.w_q(q), tq)
        kh = split(self.w_k(k), tk)
        vh = split(self.w_v(v), tk)
        ctx = scaled_dot_attention(qh, kh, vh, mask=mask)
        merged = reshape(transpose(ctx, (1, 0, 2)), (tq, d))
        return self.w_head(merged)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("q", self.w_q), ("k", self.w_k),
                          ("v", self.w_v), ("head", self.w_head)):
            out.update(lin.parameters(f"{prefix}.{name}"))
        return out


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    """Interleaved sin/cos position codes at geometric wavelengths, in [-1, 1]."""
    if d % 2 != 0:
        raise ContractError(f"positional width must be even, got {d}")
    pos = np.arange(t)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    out = np.empty((t, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


class FeedForward:
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.lin1 = Linear(d, d_ff, rng)
        self.lin2 = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.lin1.parameters(f"{prefix}.1"), **self.lin2.parameters(f"{prefix}.2")}


class EncoderLayer:
    """Pre-norm residual block: x + MHA(LN(x)), then + FF(LN(.)).

    When the config carries a window, self-attention is banded to
    [t-l, t+r]; window sides at least T-1 reproduce full attention exactly.
    """

    def __init__(self, config: AttentionConfig, rng: np.random.Generator):
        self.config = config
        self.ln1 = LayerNormParams(config.d_att)
        self.mha = MultiHeadAttention(config, rng)
        self.ln2 = LayerNormParams(config.d_att)
        self.ff = FeedForward(config.d_att, config.d_ff, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        t = x.shape[0]
        mask = None
        if self.config.window is not None:
            mask = band_mask(t, *self.config.window)
        h = self.mha(*(self.ln1(x),) * 3, mask=mask)
        h = self._drop(h, rng)
        x = x + h
        f = self._drop(self.ff(self.ln2(x)), rng)
        return x + f

    def _drop(self, x: Tensor, rng) -> Tensor:
        if self.config.dropout > 0.0:
            if rng is None:
                raise ContractError("dropout enabled but no rng supplied")
            return dropout(x, self.config.dropout, rng)
        return x

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            **self.ln1.parameters(f"{prefix}.ln1"),
            **self.mha.parameters(f"{prefix}.mha"),
            **self.ln2.parameters(f"{prefix}.ln2"),
            **self.ff.parameters(f"{prefix}.ff"),
        }


class DecoderLayer:
    """Causal self-attention, cross-attention over memory, feed-forward,
    each with pre-norm residuals."""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator):
        self.config = config
        self.ln1 = LayerNormParams(config.d_att)
        self.self_mha = MultiHeadAttention(config, rng)
        self.ln2 = LayerNormParams(config.d_att)
        self.cross_mha = MultiHeadAttention(config, rng)
        self.ln3 = LayerNormParams(config.d_att)
        self.ff = FeedForward(config.d_att, config.d_ff, rng)

    def __call__(self, y: Tensor, memory: Tensor,
                 rng: np.random.Generator | None = None) -> Tensor:
        n = y.shape[0]
        h = self.self_mha(*(self.ln1(y),) * 3, mask=causal_mask(n))
        y = y + self._drop(h, rng)
        q = self.ln2(y)
        y = y + self._drop(self.cross_mha(q, memory, memory), rng)
        return y + self._drop(self.ff(self.ln3(y)), rng)

    def _drop(self, x: Tensor, rng) -> Tensor:
        if self.config.dropout > 0.0:
            if rng is None:
                raise ContractError("dropout enabled but no rng supplied")
            return dropout(x, self.config.dropout, rng)
        return x

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            **self.ln1.parameters(f"{prefix}.ln1"),
            **self.self_mha.parameters(f"{prefix}.self"),
            **self.ln2.parameters(f"{prefix}.ln2"),
            **self.cross_mha.parameters(f"{prefix}.cross"),
            **self.ln3.parameters(f"{prefix}.ln3"),
            **self.ff.parameters(f"{prefix}.ff"),
        }
