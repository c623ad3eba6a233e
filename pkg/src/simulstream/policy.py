"""READ/WRITE policy driven by CTC alignment counts, plus wait-k and offline drivers.

The drivers take any object exposing the incremental model API
(``new_encoder_cache``, ``encode_chunk``, ``probe_states``,
``new_decoder_state``, ``decode_step``, ``commit_token``, ``new_t2u_state``,
``t2u_extend``) and record an :class:`EmissionTrace`.
"""

from __future__ import annotations

import enum
import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ctc import EOS, discrete_prefix_counts, expected_prefix_counts

TRACE_FORMAT = "simulstream-trace-v1"
FRAME_MS = 40.0
UNIT_MS = 20.0
WAITK_CHUNK = 8  # 8 frames x 40 ms = 320 ms


class Action(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"


def decide_action(asr_count_before: float, asr_count: float, nar_count: float, emitted: int) -> Action:
    """WRITE iff a new source token was recognised and aligned targets exceed the emitted ones.

    ``asr_count_before`` is the recognised-source count at the last WRITE.
    """
    if asr_count > asr_count_before and nar_count > emitted:
        return Action.WRITE
    return Action.READ


def training_g(asr_probs: np.ndarray, nar_probs: np.ndarray, n_targets: int,
               chunk: int | None, rounding: bool = True) -> np.ndarray:
    """Speech prefix g(i) (1-indexed frame count) for target positions i = 1..n_targets.

    g(i) is the first frame j where the source count increases and the
    aligned-target count reaches i, computed on expected counts.  With
    ``rounding`` the expectations are rounded to the nearest integer first,
    which reproduces the discrete inference counts on peaky distributions.
    Positions without such a frame get the full length.  Prefixes are then
    rounded up to the chunk boundary, since inference always holds whole
    chunks; ``chunk=None`` means the whole utterance.
    """
    T = len(asr_probs)
    n_asr = expected_prefix_counts(asr_probs)
    n_nar = expected_prefix_counts(nar_probs)
    if rounding:
        n_asr = np.round(n_asr)
        n_nar = np.round(n_nar)
    prev = np.concatenate([[0.0], n_asr[:-1]])
    new_src = n_asr > prev
    g = np.full(n_targets, T, dtype=np.int64)
    if chunk is None:
        return g
    frames = np.nonzero(new_src)[0]
    if len(frames):
        counts = n_nar[frames]
        for i in range(1, n_targets + 1):
            hit = np.nonzero(counts >= i)[0]
            if len(hit):
                g[i - 1] = frames[hit[0]] + 1
    g = np.minimum(-(-g // chunk) * chunk, T)
    return g


# ------------------------------------------------------------------ clocks


class WallClock:
    """Measures model calls with ``time.perf_counter``."""

    name = "wall"

    @contextmanager
    def measure(self, **work):
        t0 = time.perf_counter()
        box = [0.0]
        try:
            yield box
        finally:
            box[0] = (time.perf_counter() - t0) * 1000.0


@dataclass
class CostClock:
    """Deterministic compute accounting: fixed milliseconds per unit of work."""

    enc_frame_ms: float = 1.0
    probe_ms: float = 0.2
    dec_step_ms: float = 2.0
    t2u_position_ms: float = 0.5
    name: str = "cost"

    @contextmanager
    def measure(self, enc_frames=0, probes=0, dec_steps=0, t2u_positions=0):
        box = [enc_frames * self.enc_frame_ms + probes * self.probe_ms
               + dec_steps * self.dec_step_ms + t2u_positions * self.t2u_position_ms]
        yield box


def make_clock(name: str):
    if name == "wall":
        return WallClock()
    if name == "cost":
        return CostClock()
    raise ValueError(f"unknown clock {name!r}")


# ------------------------------------------------------------------ traces


@dataclass
class EmissionTrace:
    x_ms: float
    frame_ms: float = FRAME_MS
    unit_ms: float = UNIT_MS
    t: list = field(default_factory=list)  # ideal emission time per output frame (ms)
    t_ca: list = field(default_factory=list)
    segments: list = field(default_factory=list)  # {"start", "length", "emit_ms", "emit_ca_ms"}
    chunk_reads: list = field(default_factory=list)  # {"frames", "ms", "ca_ms"}
    tokens: list = field(default_factory=list)  # {"token", "prefix", "ms", "ca_ms"}
    ref_frames: int | None = None
    flushed_tokens: int = 0
    flags: list = field(default_factory=list)
    mode: str = "simul"
    chunk: int | None = None
    clock: str = "cost"

    @property
    def s_ms(self) -> float:
        return len(self.t) * self.unit_ms

    @property
    def realized_g(self) -> list[int]:
        return [tok["prefix"] for tok in self.tokens]

    def emit(self, n_units: int, t_ms: float, t_ca_ms: float) -> None:
        if n_units <= 0:
            return
        start = len(self.t)
        self.t.extend([t_ms] * n_units)
        self.t_ca.extend([t_ca_ms] * n_units)
        last = self.segments[-1] if self.segments else None
        if last is not None and last["emit_ms"] == t_ms and last["start"] + last["length"] == start:
            last["length"] += n_units
        else:
            self.segments.append({"start": start, "length": n_units, "emit_ms": t_ms, "emit_ca_ms": t_ca_ms})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = TRACE_FORMAT
        d["totals"] = {"x_ms": self.x_ms, "s_ms": self.s_ms}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmissionTrace":
        if d.get("format") != TRACE_FORMAT:
            raise ValueError(f"unsupported trace format {d.get('format')!r}")
        d = {k: v for k, v in d.items() if k not in ("format", "totals")}
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EmissionTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class InferenceResult:
    y: list
    u: list
    trace: EmissionTrace


class _Run:
    """Shared bookkeeping for one streaming run."""

    def __init__(self, model, x, chunk, clock, frame_ms, unit_ms, ref_units, mode):
        self.model = model
        self.x = np.asarray(x, dtype=np.float64)
        self.T = len(self.x)
        self.clock = clock or CostClock()
        self.frame_ms = frame_ms
        self.cache = model.new_encoder_cache(chunk)
        self.dec = model.new_decoder_state()
        self.t2u = model.new_t2u_state()
        self.received = 0
        self.compute = 0.0
        self.trace = EmissionTrace(x_ms=self.T * frame_ms, frame_ms=frame_ms, unit_ms=unit_ms,
                                   ref_frames=None if ref_units is None else len(ref_units),
                                   mode=mode, chunk=chunk, clock=self.clock.name)
        self.cap = None

    @property
    def y(self):
        return self.dec.tokens

    @property
    def finished(self) -> bool:
        return bool(self.y) and self.y[-1] == EOS

    def now(self) -> float:
        return self.received * self.frame_ms

    def read(self, n: int) -> None:
        new = self.x[self.received:self.received + n]
        final = self.received + len(new) == self.T
        with self.clock.measure(enc_frames=len(new)) as box:
            self.model.encode_chunk(new, self.cache, final=final)
        self.compute += box[0]
        self.received += len(new)
        self.trace.chunk_reads.append({"frames": self.received, "ms": self.now(),
                                       "ca_ms": self.now() + self.compute})

    def counts(self) -> tuple[int, int]:
        with self.clock.measure(probes=1) as box:
            lp_a, lp_y = self.model.probe_states(self.cache.states)
        self.compute += box[0]
        return int(discrete_prefix_counts(lp_a)[-1]), int(discrete_prefix_counts(lp_y)[-1])

    def set_cap(self, expected: int) -> None:
        self.cap = 2 * max(expected, 1) + 8

    def generate(self, n_max: int | None) -> list:
        """Greedy tokens until ``n_max`` total tokens, <eos>, or the length cap."""
        new_states = []
        while not self.finished and (n_max is None or len(self.y) < n_max):
            if self.cap is not None and len(self.y) >= self.cap:
                if "length_cap" not in self.trace.flags:
                    self.trace.flags.append("length_cap")
                break
            with self.clock.measure(dec_steps=1) as box:
                logp, st = self.model.decode_step(self.dec, self.cache.states, self.received)
            self.compute += box[0]
            tok = int(np.argmax(logp))
            self.model.commit_token(self.dec, tok, st, self.received)
            self.trace.tokens.append({"token": tok, "prefix": self.received, "ms": self.now(),
                                      "ca_ms": self.now() + self.compute})
            if tok != EOS:
                new_states.append((st, tok))
        return new_states

    def speak(self, states: list) -> None:
        if not states:
            return
        with self.clock.measure(t2u_positions=len(states)) as box:
            units = self.model.t2u_extend(self.t2u, np.stack([st for st, _ in states]),
                                          [tok for _, tok in states])
        self.compute += box[0]
        self.trace.emit(len(units), self.now(), self.now() + self.compute)

    def flush(self) -> None:
        before = len(self.y)
        self.speak(self.generate(None))
        self.trace.flushed_tokens = len(self.y) - before
        if not self.finished and "no_eos" not in self.trace.flags:
            self.trace.flags.append("no_eos")

    def result(self) -> InferenceResult:
        return InferenceResult(y=list(self.y), u=list(self.t2u.units), trace=self.trace)


def run_simul_inference(model, x, chunk: int | None, clock=None, frame_ms: float = FRAME_MS,
                        unit_ms: float = UNIT_MS, ref_units=None) -> InferenceResult:
    """Chunk-by-chunk READ/WRITE loop with a terminal flush at stream end.

    ``chunk=None`` processes the whole stream as one chunk (offline limit).
    """
    if chunk is not None and chunk < 1:
        raise ValueError("chunk size must be >= 1")
    run = _Run(model, x, chunk, clock, frame_ms, unit_ms, ref_units, "simul")
    step = run.T if chunk is None else chunk
    src_count = 0
    n_asr = n_nar = 0
    while run.received < run.T:
        run.read(step)
        if run.finished:
            continue
        n_asr, n_nar = run.counts()
        if decide_action(src_count, n_asr, n_nar, len(run.y)) is Action.WRITE:
            src_count = n_asr
            run.set_cap(max(n_asr, n_nar))
            run.speak(run.generate(n_nar))
    run.set_cap(max(n_asr, n_nar))
    run.flush()
    return run.result()


def run_waitk_inference(model, x, k: int, chunk: int = WAITK_CHUNK, clock=None, frame_ms: float = FRAME_MS,
                        unit_ms: float = UNIT_MS, ref_units=None) -> InferenceResult:
    """Wait k chunks, then one target token per chunk; flush at stream end."""
    if k < 1:
        raise ValueError("k must be >= 1")
    run = _Run(model, x, chunk, clock, frame_ms, unit_ms, ref_units, "waitk")
    run.trace.flags.append(f"k={k}")
    run.set_cap(int(math.ceil(run.T / max(chunk, 1))) + k)
    m = 0
    while run.received < run.T:
        run.read(chunk)
        m += 1
        if m >= k and not run.finished:
            run.speak(run.generate(len(run.y) + 1))
    _, n_nar = run.counts()
    run.set_cap(max(n_nar, len(run.y)))
    run.flush()
    return run.result()


def run_offline_inference(model, x, clock=None, frame_ms: float = FRAME_MS, unit_ms: float = UNIT_MS,
                          ref_units=None) -> InferenceResult:
    """Encode everything, greedy-decode to <eos>, then generate all units."""
    run = _Run(model, x, None, clock, frame_ms, unit_ms, ref_units, "offline")
    run.read(run.T)
    n_asr, n_nar = run.counts()
    run.set_cap(max(n_asr, n_nar))
    run.flush()
    return run.result()
