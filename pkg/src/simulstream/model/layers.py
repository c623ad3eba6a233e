"""Building blocks: linear, layer norm, attention, feed-forward, chunked conformer conv."""

from __future__ import annotations

import math

import numpy as np

from .. import numerics as nx
from ..numerics import Module, Parameter, Tensor


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        limit = math.sqrt(6.0 / (din + dout))
        self.w = Parameter(rng.uniform(-limit, limit, size=(din, dout)))
        self.b = Parameter(np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng, activation: str = "relu"):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = nx.silu(h) if self.activation == "silu" else nx.relu(h)
        return self.fc2(h)


_PE_CACHE: dict[int, np.ndarray] = {}


def sinusoid_table(n: int, d: int) -> np.ndarray:
    tab = _PE_CACHE.get(d)
    if tab is None or len(tab) < n:
        size = max(n, 1024)
        pos = np.arange(size)[:, None]
        div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
        tab = np.zeros((size, d))
        tab[:, 0::2] = np.sin(pos * div)
        tab[:, 1::2] = np.cos(pos * div)[:, : d // 2]
        _PE_CACHE[d] = tab
    return tab[:n]


def positions(start: int, n: int, d: int) -> Tensor:
    return Tensor(sinusoid_table(start + n, d)[start:start + n])


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention.

    Masks are boolean, True = attend, shaped to broadcast against
    (B, heads, Tq, Tk).  ``record`` keeps the last weight tensor for inspection.
    """

    def __init__(self, d: int, heads: int, rng):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.heads = heads
        self.d = d
        self.record = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return nx.transpose(nx.reshape(x, (B, T, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(x)), self._split(self.v(x))

    def attend(self, xq: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
        B, Tq, _ = xq.shape
        q = self._split(self.q(xq))
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d // self.heads))
        w = nx.softmax(scores, mask)
        if self.record:
            self.last_weights = w.data
        ctx = nx.matmul(w, v)
        return self.o(nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, Tq, self.d)))

    def __call__(self, xq: Tensor, xkv: Tensor | None = None, mask=None) -> Tensor:
        k, v = self.project_kv(xq if xkv is None else xkv)
        return self.attend(xq, k, v, mask)


def chunk_end(pos: np.ndarray, chunk: int | None) -> np.ndarray:
    """Exclusive upper bound of the chunk holding 0-indexed ``pos`` (ceil(i/C)*C for 1-indexed i)."""
    pos = np.asarray(pos)
    if chunk is None:
        return np.full(pos.shape, np.iinfo(np.int64).max // 4, dtype=np.int64)
    return (pos // chunk + 1) * chunk


def chunk_attention_mask(n: int, lengths: np.ndarray, chunk: int | None) -> np.ndarray:
    """(B, 1, n, n) boolean: query i may see key j iff j < min(len, chunk_end(i))."""
    lengths = np.asarray(lengths)
    bound = np.minimum(chunk_end(np.arange(n), chunk)[None, :], lengths[:, None])  # (B, n)
    return (np.arange(n)[None, None, :] < bound[:, :, None])[:, None]


def chunk_tap_mask(n: int, lengths: np.ndarray, chunk: int | None, kernel: int, offset: int = 0) -> np.ndarray:
    """(B, n, K) conv tap validity for a window of ``n`` positions starting at global ``offset``.

    Tap k of position t reads t + k - (K-1)/2; valid iff that position lies in
    [offset, min(len, chunk_end(t))).
    """
    h = kernel // 2
    t = np.arange(n) + offset
    src = t[:, None] + np.arange(kernel)[None, :] - h  # (n, K)
    upper = chunk_end(t, chunk)[:, None]
    lengths = np.asarray(lengths)
    return (src[None] >= offset) & (src[None] < np.minimum(upper[None], lengths[:, None, None]))


class ConformerConv(Module):
    def __init__(self, d: int, kernel: int, rng):
        if kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")
        self.pw1 = Linear(d, 2 * d, rng)
        limit = math.sqrt(3.0 / kernel)
        self.dw_w = Parameter(rng.uniform(-limit, limit, size=(kernel, d)))
        self.dw_b = Parameter(np.zeros(d))
        self.norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng)
        self.kernel = kernel

    def gate(self, x: Tensor) -> Tensor:
        return nx.glu(self.pw1(x))

    def finish(self, z: Tensor, tap_mask) -> Tensor:
        y = nx.depthwise_conv1d(z, self.dw_w, self.dw_b, tap_mask)
        return self.pw2(nx.silu(self.norm(y)))

    def __call__(self, x: Tensor, tap_mask) -> Tensor:
        return self.finish(self.gate(x), tap_mask)


class ConformerLayer(Module):
    """Macaron FFN, chunked self-attention, chunked conv module, FFN, final norm."""

    def __init__(self, d: int, heads: int, ffn: int, kernel: int, rng):
        self.ff1_norm = LayerNorm(d)
        self.ff1 = FeedForward(d, ffn, rng, "silu")
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.conv_norm = LayerNorm(d)
        self.conv = ConformerConv(d, kernel, rng)
        self.ff2_norm = LayerNorm(d)
        self.ff2 = FeedForward(d, ffn, rng, "silu")
        self.out_norm = LayerNorm(d)

    def __call__(self, x: Tensor, attn_mask, tap_mask) -> Tensor:
        x = x + 0.5 * self.ff1(self.ff1_norm(x))
        x = x + self.attn(self.attn_norm(x), mask=attn_mask)
        x = x + self.conv(self.conv_norm(x), tap_mask)
        x = x + 0.5 * self.ff2(self.ff2_norm(x))
        return self.out_norm(x)


class DecoderLayer(Module):
    """Pre-norm transformer decoder layer (causal self-attn, cross-attn, FFN)."""

    def __init__(self, d: int, heads: int, ffn: int, rng, cross: bool = True):
        self.self_norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        if cross:
            self.cross_norm = LayerNorm(d)
            self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ff_norm = LayerNorm(d)
        self.ff = FeedForward(d, ffn, rng)
        self.has_cross = cross


class CrossLayer(Module):
    """Cross-attention + FFN block (no self-attention)."""

    def __init__(self, d: int, heads: int, ffn: int, rng):
        self.cross_norm = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ff_norm = LayerNorm(d)
        self.ff = FeedForward(d, ffn, rng)

    def __call__(self, x: Tensor, mem: Tensor, mask) -> Tensor:
        x = x + self.cross_attn(self.cross_norm(x), mem, mask)
        return x + self.ff(self.ff_norm(x))
