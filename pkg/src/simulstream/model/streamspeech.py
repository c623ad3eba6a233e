"""The two-pass simultaneous speech-to-unit network.

Streaming chunked conformer encoder -> two CTC probes (source transcript and
target text) -> autoregressive text decoder whose cross-attention is cut at
the policy's speech prefix -> non-autoregressive text-to-unit generator with a
unit CTC head over r-times upsampled text states.

Full-sequence methods (``encode``, ``decode_teacher``, ``t2u_forward``) are
used for training; the ``*_cache``/``*_state`` helpers extend the same
computations incrementally for streaming inference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..ctc import BLANK, EOS, collapse_continue, ctc_loss, greedy_path
from ..numerics import Module, Parameter, Tensor
from ..policy import training_g
from .config import ModelConfig
from .layers import (
    ConformerLayer,
    CrossLayer,
    DecoderLayer,
    LayerNorm,
    Linear,
    chunk_attention_mask,
    chunk_tap_mask,
    positions,
)

log = logging.getLogger(__name__)


@dataclass
class EncoderCache:
    chunk: int | None
    frames: int = 0
    keys: list = field(default_factory=list)  # per layer (1, h, n, dh)
    values: list = field(default_factory=list)
    conv_left: list = field(default_factory=list)  # per layer (1, <=K//2, d) gated conv inputs
    states: np.ndarray | None = None  # (n, d) encoder outputs so far


@dataclass
class DecoderState:
    tokens: list = field(default_factory=list)  # generated tokens (without the BOS)
    self_k: list = field(default_factory=list)
    self_v: list = field(default_factory=list)
    cross_k: list = field(default_factory=list)
    cross_v: list = field(default_factory=list)
    cross_rows: int = 0
    text_states: list = field(default_factory=list)  # D^text rows, one per generated token
    prefixes: list = field(default_factory=list)  # speech prefix g(i) used for each token


@dataclass
class T2UState:
    self_k: list = field(default_factory=list)
    self_v: list = field(default_factory=list)
    enc: np.ndarray | None = None  # (n, d)
    last_symbol: int | None = None
    units: list = field(default_factory=list)
    unit_log_probs: list = field(default_factory=list)


@dataclass
class LossBundle:
    s2ut: Tensor
    ar_s2tt: Tensor
    asr: Tensor
    nar_s2tt: Tensor
    total: Tensor
    skipped: int = 0
    chunk: int | None = None

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "s2ut": self.s2ut.item(), "ar_s2tt": self.ar_s2tt.item(),
                "asr": self.asr.item(), "nar_s2tt": self.nar_s2tt.item()}


def _cat_kv(old, new):
    return new if old is None else np.concatenate([old, new], axis=2)


def _pad(seqs, fill=0) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(int(lens.max()), 1)), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


class StreamSpeech(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(np.random.SeedSequence([c.init_seed, 7]))
        d = c.d_model
        # streaming encoder
        self.enc_in = Linear(c.frame_dim, d, rng)
        self.enc_layers = [ConformerLayer(d, c.enc_heads, c.enc_ffn, c.conv_kernel, rng) for _ in range(c.enc_layers)]
        # CTC probes
        self.asr_proj = Linear(d, c.src_vocab, rng)
        self.nar_proj = Linear(d, c.tgt_vocab, rng)
        # text decoder
        self.tgt_embed = Parameter(rng.normal(0.0, d ** -0.5, size=(c.tgt_vocab, d)))
        self.dec_layers = [DecoderLayer(d, c.dec_heads, c.dec_ffn, rng) for _ in range(c.dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.dec_out = Linear(d, c.tgt_vocab, rng)
        # text-to-unit
        self.t2u_in = Linear(d, d, rng)
        self.t2u_layers = [DecoderLayer(d, c.dec_heads, c.dec_ffn, rng, cross=False) for _ in range(c.t2u_layers)]
        self.t2u_norm = LayerNorm(d)
        self.slot_embed = Parameter(rng.normal(0.0, 0.5, size=(c.upsample_rate, d)))
        self.unit_layers = [CrossLayer(d, c.dec_heads, c.dec_ffn, rng) for _ in range(c.unit_dec_layers)]
        self.unit_norm = LayerNorm(d)
        self.unit_out = Linear(d, c.unit_vocab, rng)
        self.parameters()  # assign dotted names

    # ------------------------------------------------------------ encoder

    def encode(self, x, lengths=None, chunk: int | None = None, masked: bool = True) -> Tensor:
        """Full-sequence chunked encoding.

        x: (B, T, F) or (T, F) frames.  ``chunk=None`` is offline (C = infinity).
        ``masked=False`` drops the attention mask altogether (reference path
        for the offline-equivalence check).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        d = self.config.d_model
        h = nx.linear(Tensor(x), self.enc_in.w, self.enc_in.b) + positions(0, T, d)
        attn_mask = chunk_attention_mask(T, lengths, chunk) if masked else None
        tap = chunk_tap_mask(T, lengths, chunk, self.config.conv_kernel)
        for layer in self.enc_layers:
            h = layer(h, attn_mask, tap)
        return h

    def new_encoder_cache(self, chunk: int | None) -> EncoderCache:
        n = len(self.enc_layers)
        return EncoderCache(chunk=chunk, keys=[None] * n, values=[None] * n, conv_left=[None] * n)

    def encode_chunk(self, frames, cache: EncoderCache, final: bool = False) -> np.ndarray:
        """Extend ``cache`` by one chunk of frames and return the new hidden states.

        Chunks must have exactly C frames except the last one of the stream.
        Already-encoded positions are never touched.
        """
        frames = np.asarray(frames, dtype=np.float64)
        c = len(frames)
        C = cache.chunk
        if c == 0:
            raise ValueError("empty chunk")
        if C is not None:
            if cache.frames % C:
                raise ValueError(f"cache holds {cache.frames} frames, not a multiple of chunk size {C}")
            if c > C or (c < C and not final):
                raise ValueError(f"chunk of {c} frames does not match chunk size {C}")
        s = cache.frames
        n_total = s + c
        d = self.config.d_model
        K = self.config.conv_kernel
        with nx.no_grad():
            x = nx.linear(Tensor(frames[None]), self.enc_in.w, self.enc_in.b) + positions(s, c, d)
            for li, layer in enumerate(self.enc_layers):
                x = x + 0.5 * layer.ff1(layer.ff1_norm(x))
                xn = layer.attn_norm(x)
                k_new, v_new = layer.attn.project_kv(xn)
                cache.keys[li] = _cat_kv(cache.keys[li], k_new.data)
                cache.values[li] = _cat_kv(cache.values[li], v_new.data)
                x = x + layer.attn.attend(xn, Tensor(cache.keys[li]), Tensor(cache.values[li]), None)
                z_new = layer.conv.gate(layer.conv_norm(x))
                left = cache.conv_left[li]
                z = z_new if left is None else nx.concat([Tensor(left), z_new], axis=1)
                nleft = 0 if left is None else left.shape[1]
                tap = chunk_tap_mask(nleft + c, np.array([n_total]), C, K, offset=s - nleft)
                conv = layer.conv.finish(z, tap)
                x = x + conv[:, nleft:]
                zall = z.data
                cache.conv_left[li] = zall[:, -min(K // 2, zall.shape[1]):] if K > 1 else None
                x = x + 0.5 * layer.ff2(layer.ff2_norm(x))
                x = layer.out_norm(x)
        cache.frames = n_total
        new = x.data[0]
        cache.states = new.copy() if cache.states is None else np.concatenate([cache.states, new], axis=0)
        return new

    # --------------------------------------------------------------- probes

    def ctc_probe(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Log-probabilities (D^asr, D^nar-s2tt) per position."""
        return nx.log_softmax(self.asr_proj(h)), nx.log_softmax(self.nar_proj(h))

    def probe_states(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with nx.no_grad():
            a, y = self.ctc_probe(Tensor(states))
        return a.data, y.data

    # --------------------------------------------------------------- decoder

    def _embed_tokens(self, ids: np.ndarray, start: int) -> Tensor:
        d = self.config.d_model
        e = nx.scale(nx.embedding(self.tgt_embed, ids), math.sqrt(d))
        return e + positions(start, ids.shape[-1], d)

    def decode_teacher(self, prev_tokens, memory: Tensor, prefix, tgt_lengths=None) -> tuple[Tensor, Tensor]:
        """Teacher-forced decoding.

        prev_tokens: (B, L) inputs (BOS = <eos> then y_1..y_{L-1}).
        memory: (B, T, d) encoder states.  prefix: (B, L) speech prefix g(i)
        (1 <= g <= T) each position may attend to.
        Returns (logits (B, L, V), text states (B, L, d)).
        """
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        prefix = np.asarray(prefix, dtype=np.int64)
        B, L = prev_tokens.shape
        T = memory.shape[1]
        if prefix.shape != (B, L):
            raise ValueError(f"prefix shape {prefix.shape} != {(B, L)}")
        if prefix.max() > T or prefix.min() < 1:
            raise ValueError(f"cross-attention prefix outside [1, {T}]")
        tl = np.full(B, L) if tgt_lengths is None else np.asarray(tgt_lengths)
        causal = np.tril(np.ones((L, L), dtype=bool))[None] & (np.arange(L)[None, None, :] < tl[:, None, None])
        self_mask = causal[:, None]
        cross_mask = (np.arange(T)[None, None, :] < prefix[:, :, None])[:, None]
        x = self._embed_tokens(prev_tokens, 0)
        for layer in self.dec_layers:
            x = x + layer.self_attn(layer.self_norm(x), mask=self_mask)
            x = x + layer.cross_attn(layer.cross_norm(x), memory, cross_mask)
            x = x + layer.ff(layer.ff_norm(x))
        states = self.dec_norm(x)
        return self.dec_out(states), states

    def new_decoder_state(self) -> DecoderState:
        n = len(self.dec_layers)
        return DecoderState(self_k=[None] * n, self_v=[None] * n, cross_k=[None] * n, cross_v=[None] * n)

    def decode_step(self, state: DecoderState, memory: np.ndarray, prefix: int) -> tuple[np.ndarray, np.ndarray]:
        """One autoregressive step attending to memory[:prefix].

        ``memory`` holds every encoder state received so far; cross-attention
        projections are cached and extended as it grows.  Returns
        (log-probabilities over the target vocabulary, text state).
        """
        if prefix > len(memory) or prefix < 1:
            raise ValueError(f"cross-attention prefix {prefix} exceeds {len(memory)} encoder states")
        pos = len(state.tokens)
        inp = np.array([[EOS if pos == 0 else state.tokens[-1]]])
        with nx.no_grad():
            if state.cross_rows < len(memory):
                new_rows = Tensor(memory[None, state.cross_rows:])
                for li, layer in enumerate(self.dec_layers):
                    k, v = layer.cross_attn.project_kv(new_rows)
                    state.cross_k[li] = _cat_kv(state.cross_k[li], k.data)
                    state.cross_v[li] = _cat_kv(state.cross_v[li], v.data)
                state.cross_rows = len(memory)
            x = self._embed_tokens(inp, pos)
            for li, layer in enumerate(self.dec_layers):
                xn = layer.self_norm(x)
                k, v = layer.self_attn.project_kv(xn)
                state.self_k[li] = _cat_kv(state.self_k[li], k.data)
                state.self_v[li] = _cat_kv(state.self_v[li], v.data)
                x = x + layer.self_attn.attend(xn, Tensor(state.self_k[li]), Tensor(state.self_v[li]))
                x = x + layer.cross_attn.attend(layer.cross_norm(x), Tensor(state.cross_k[li][:, :, :prefix]),
                                                Tensor(state.cross_v[li][:, :, :prefix]))
                x = x + layer.ff(layer.ff_norm(x))
            st = self.dec_norm(x)
            logp = nx.log_softmax(self.dec_out(st))
        return logp.data[0, 0], st.data[0, 0]

    def commit_token(self, state: DecoderState, token: int, text_state: np.ndarray, prefix: int) -> None:
        state.tokens.append(int(token))
        state.text_states.append(text_state)
        state.prefixes.append(int(prefix))

    # ------------------------------------------------------------ text-to-unit

    def _t2u_input(self, text_states: Tensor, tokens) -> Tensor:
        # a text state is the one that predicted its token, so the token itself is added back
        if tokens is None:
            return text_states
        ids = np.asarray(tokens, dtype=np.int64).reshape(text_states.shape[:-1])
        return text_states + nx.scale(nx.embedding(self.tgt_embed, ids), math.sqrt(self.config.d_model))

    def t2u_forward(self, text_states: Tensor, lengths=None, tokens=None) -> Tensor:
        """Unit CTC log-probabilities (B, n*r, U) from text states (B, n, d) and their tokens (B, n)."""
        B, n, d = text_states.shape
        x = self.t2u_in(self._t2u_input(text_states, tokens)) + positions(0, n, d)
        causal = np.tril(np.ones((n, n), dtype=bool))[None, None]
        for layer in self.t2u_layers:
            x = x + layer.self_attn(layer.self_norm(x), mask=causal)
            x = x + layer.ff(layer.ff_norm(x))
        enc = self.t2u_norm(x)
        return self._unit_head(enc, 0, n)

    def _unit_head(self, enc: Tensor, first: int, last: int) -> Tensor:
        """Unit log-probs for the slots of text positions [first, last) given encoder rows [0, last)."""
        r = self.config.upsample_rate
        slots = np.arange(first * r, last * r)
        group = slots // r
        z = nx.take(enc, group, axis=1) + nx.take(self.slot_embed, slots % r, axis=0)
        n_keys = enc.shape[1]
        mask = (np.arange(n_keys)[None, :] <= group[:, None])[None, None]
        for layer in self.unit_layers:
            z = layer(z, enc, mask)
        return nx.log_softmax(self.unit_out(self.unit_norm(z)))

    def new_t2u_state(self) -> T2UState:
        n = len(self.t2u_layers)
        return T2UState(self_k=[None] * n, self_v=[None] * n)

    def t2u_extend(self, state: T2UState, text_states: np.ndarray, tokens=None) -> list[int]:
        """Emit units for newly generated text positions only.

        The last CTC path symbol is carried across calls so that the
        concatenated output equals collapsing the offline path.
        """
        text_states = np.asarray(text_states, dtype=np.float64).reshape(-1, self.config.d_model)
        m = len(text_states)
        if m == 0:
            return []
        n0 = 0 if state.enc is None else len(state.enc)
        d = self.config.d_model
        with nx.no_grad():
            inp = self._t2u_input(Tensor(text_states[None]), None if tokens is None else [list(tokens)])
            x = self.t2u_in(inp) + positions(n0, m, d)
            mask = (np.arange(n0 + m)[None, :] <= (n0 + np.arange(m))[:, None])[None, None]
            for li, layer in enumerate(self.t2u_layers):
                xn = layer.self_norm(x)
                k, v = layer.self_attn.project_kv(xn)
                state.self_k[li] = _cat_kv(state.self_k[li], k.data)
                state.self_v[li] = _cat_kv(state.self_v[li], v.data)
                x = x + layer.self_attn.attend(xn, Tensor(state.self_k[li]), Tensor(state.self_v[li]), mask)
                x = x + layer.ff(layer.ff_norm(x))
            enc_new = self.t2u_norm(x).data[0]
            state.enc = enc_new if state.enc is None else np.concatenate([state.enc, enc_new], axis=0)
            lp = self._unit_head(Tensor(state.enc[None]), n0, n0 + m).data[0]
        units, state.last_symbol = collapse_continue(greedy_path(lp), state.last_symbol, BLANK)
        state.units.extend(units)
        state.unit_log_probs.append(lp)
        return units

    # ----------------------------------------------------------------- loss

    def compute_multitask_loss(self, samples, chunk: int | None) -> LossBundle:
        """All four task losses from one forward pass over a batch of samples.

        Each CTC term is normalised by its target length and the AR term is the
        per-token mean, then averaged over the samples whose CTC terms are
        feasible.
        """
        c = self.config
        B = len(samples)
        lengths = np.array([s.n_frames for s in samples])
        T = int(lengths.max())
        F = samples[0].x.shape[1]
        x = np.zeros((B, T, F))
        for i, s in enumerate(samples):
            x[i, : s.n_frames] = s.x
        H = self.encode(x, lengths, chunk)
        lp_asr, lp_nar = self.ctc_probe(H)

        src, src_len = _pad([s.a for s in samples])
        tgt_noeos, tgt_noeos_len = _pad([s.y[:-1] for s in samples])
        asr_nll = ctc_loss(lp_asr, src, lengths, src_len)
        nar_nll = ctc_loss(lp_nar, tgt_noeos, lengths, tgt_noeos_len)

        # speech prefixes from the current probes; no gradient through the choice
        p_asr = np.exp(lp_asr.data)
        p_nar = np.exp(lp_nar.data)
        ys, y_len = _pad([s.y for s in samples])
        L = ys.shape[1]
        prefix = np.ones((B, L), dtype=np.int64)
        for i, s in enumerate(samples):
            g = training_g(p_asr[i, : s.n_frames], p_nar[i, : s.n_frames], len(s.y), chunk, c.g_rounding)
            prefix[i, : len(g)] = g
        prev = np.zeros_like(ys)
        prev[:, 0] = EOS
        prev[:, 1:] = ys[:, :-1]
        logits, text_states = self.decode_teacher(prev, H, prefix, y_len)

        n_text = tgt_noeos_len
        text_in = nx.index(text_states, (slice(None), slice(0, int(n_text.max()))))
        lp_unit = self.t2u_forward(text_in, n_text, ys[:, : int(n_text.max())])
        units, unit_len = _pad([s.u for s in samples])
        unit_nll = ctc_loss(lp_unit, units, n_text * c.upsample_rate, unit_len)

        ok = np.isfinite(asr_nll.data) & np.isfinite(nar_nll.data) & np.isfinite(unit_nll.data)
        skipped = int(B - ok.sum())
        if skipped:
            log.warning("skipping %d sample(s) with infeasible CTC alignment", skipped)
        n_ok = max(int(ok.sum()), 1)

        def avg(nll: Tensor, norm: np.ndarray) -> Tensor:
            w = np.where(ok, 1.0 / (np.maximum(norm, 1) * n_ok), 0.0)
            safe = nx.masked_fill(nll, ~ok, 0.0)
            return nx.tsum(nx.mul(safe, Tensor(w)))

        L_asr = avg(asr_nll, src_len)
        L_nar = avg(nar_nll, tgt_noeos_len)
        L_s2ut = avg(unit_nll, unit_len)
        tok_w = (np.arange(L)[None, :] < y_len[:, None]) * (ok / (y_len * n_ok))[:, None]
        L_ar = nx.cross_entropy(logits, ys, tok_w)
        total = (nx.scale(L_s2ut, c.w_s2ut) + nx.scale(L_ar, c.w_ar_s2tt)
                 + nx.scale(L_asr, c.w_asr) + nx.scale(L_nar, c.w_nar_s2tt))
        return LossBundle(s2ut=L_s2ut, ar_s2tt=L_ar, asr=L_asr, nar_s2tt=L_nar, total=total,
                          skipped=skipped, chunk=chunk)
