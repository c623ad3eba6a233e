"""Synthetic parallel corpora shaped like (speech frames, transcript, translation, units).

A source sentence is a sequence of content tokens, each held for a random
number of frames.  Frames are a fixed per-token vector plus Gaussian noise.
The translation substitutes every token through a fixed codebook and then
defers a fixed subset of token types by ``reorder_window`` positions.  Units
are a fixed per-target-token expansion.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc import BLANK, EOS, PAD

FORMAT = "simulstream-corpus-v1"
FIRST_CONTENT_ID = 3  # 0 pad, 1 <eos>, 2 blank

# named RNG substreams
_STREAM_EMBED = 11
_STREAM_CODEBOOK = 12
_STREAM_UNITS = 13
_STREAM_SAMPLES = 14
SPLIT_IDS = {"train": 0, "valid": 1, "test": 2}


class CorpusFormatError(ValueError):
    pass


@dataclass
class ToyLanguageSpec:
    source_vocab_size: int = 20
    target_vocab_size: int = 20
    unit_vocab_size: int = 32
    token_duration_range: tuple[int, int] = (2, 6)
    length_range: tuple[int, int] = (3, 8)
    frame_dim: int = 16
    noise_std: float = 0.5
    unit_length_range: tuple[int, int] = (2, 6)
    unit_expansion: dict[int, list[int]] | None = None
    reorder_window: int = 1
    reorder_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.token_duration_range = tuple(int(v) for v in self.token_duration_range)
        self.length_range = tuple(int(v) for v in self.length_range)
        self.unit_length_range = tuple(int(v) for v in self.unit_length_range)
        self.validate()
        if self.unit_expansion is None:
            self.unit_expansion = _random_expansions(self)
        else:
            self.unit_expansion = {int(k): [int(u) for u in v] for k, v in self.unit_expansion.items()}
        self.validate_expansion()

    def validate(self) -> None:
        for name in ("source_vocab_size", "target_vocab_size", "unit_vocab_size"):
            if getattr(self, name) < 4:
                raise ValueError(f"{name} must be >= 4, got {getattr(self, name)}")
        lo, hi = self.token_duration_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad token_duration_range {self.token_duration_range}")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad length_range {self.length_range}")
        lo, hi = self.unit_length_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad unit_length_range {self.unit_length_range}")
        if self.noise_std < 0 or self.reorder_window < 0 or self.frame_dim < 1:
            raise ValueError("noise_std, reorder_window must be >= 0 and frame_dim >= 1")

    def validate_expansion(self) -> None:
        for tok in self.target_content_ids:
            exp = self.unit_expansion.get(tok)
            if not exp:
                raise ValueError(f"unit_expansion missing or empty for target token {tok}")
            if any(u < FIRST_CONTENT_ID or u >= self.unit_vocab_size for u in exp):
                raise ValueError(f"unit_expansion for {tok} uses reserved or out-of-range ids: {exp}")

    @property
    def source_content_ids(self) -> list[int]:
        return list(range(FIRST_CONTENT_ID, self.source_vocab_size))

    @property
    def target_content_ids(self) -> list[int]:
        return list(range(FIRST_CONTENT_ID, self.target_vocab_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unit_expansion"] = {str(k): v for k, v in sorted(self.unit_expansion.items())}
        d["token_duration_range"] = list(self.token_duration_range)
        d["length_range"] = list(self.length_range)
        d["unit_length_range"] = list(self.unit_length_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyLanguageSpec":
        return cls(**d)


def _rng(spec_seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec_seed & (2**64 - 1), *stream]))


def _random_expansions(spec: ToyLanguageSpec) -> dict[int, list[int]]:
    rng = _rng(spec.seed, _STREAM_UNITS)
    units = np.arange(FIRST_CONTENT_ID, spec.unit_vocab_size)
    lo, hi = spec.unit_length_range
    out = {}
    for tok in spec.target_content_ids:
        n = int(rng.integers(lo, hi + 1))
        seq = [int(rng.choice(units))]
        while len(seq) < n:
            u = int(rng.choice(units))
            if u != seq[-1] or len(units) == 1:
                seq.append(u)
        out[tok] = seq
    return out


@dataclass
class Language:
    """Deterministic tables derived from a spec."""

    spec: ToyLanguageSpec
    embeddings: np.ndarray = field(init=False)
    codebook: dict[int, int] = field(init=False)
    deferred: frozenset[int] = field(init=False)

    def __post_init__(self):
        s = self.spec
        self.embeddings = _rng(s.seed, _STREAM_EMBED).standard_normal((s.source_vocab_size, s.frame_dim))
        rng = _rng(s.seed, _STREAM_CODEBOOK)
        src = s.source_content_ids
        tgt = np.array(s.target_content_ids)
        perm = rng.permutation(len(tgt))
        self.codebook = {a: int(tgt[perm[k % len(tgt)]]) for k, a in enumerate(src)}
        n_def = int(round(s.reorder_fraction * len(src))) if s.reorder_window > 0 else 0
        self.deferred = frozenset(int(a) for a in rng.choice(src, size=n_def, replace=False)) if n_def else frozenset()

    def translate(self, tokens: Sequence[int]) -> list[int]:
        """Codebook substitution plus local reordering; no <eos>."""
        w = self.spec.reorder_window
        keys = [i + (w + 0.5 if a in self.deferred else 0.0) for i, a in enumerate(tokens)]
        order = sorted(range(len(tokens)), key=lambda i: (keys[i], i))
        return [self.codebook[int(tokens[i])] for i in order]

    def expand_units(self, target: Sequence[int]) -> list[int]:
        out = []
        for y in target:
            if y == EOS:
                break
            out.extend(self.spec.unit_expansion[int(y)])
        return out


@dataclass
class Sample:
    x: np.ndarray  # (frames, frame_dim)
    a: list[int]
    a_spans: list[tuple[int, int]]  # [start, end) frame spans per source token
    y: list[int]  # ends in <eos>
    u: list[int]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.a_spans = [(int(s), int(e)) for s, e in self.a_spans]
        if self.x.ndim != 2 or len(self.x) == 0 or not self.a or not self.y or not self.u:
            raise ValueError("samples must have non-empty x, a, y and u")
        if len(self.a_spans) != len(self.a):
            raise ValueError("one frame span per source token required")
        if self.a_spans[-1][1] != len(self.x):
            raise ValueError("source spans must cover every frame")

    @property
    def n_frames(self) -> int:
        return len(self.x)

    def tokens_completed_by(self, frames: int) -> int:
        """Number of source tokens whose span ends within the first ``frames`` frames."""
        return sum(1 for _, end in self.a_spans if end <= frames)

    def equals(self, other: "Sample") -> bool:
        return (np.array_equal(self.x, other.x) and self.a == other.a and self.a_spans == other.a_spans
                and self.y == other.y and self.u == other.u)


@dataclass
class Corpus:
    spec: ToyLanguageSpec
    samples: list[Sample]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    def equals(self, other: "Corpus") -> bool:
        return (self.spec.to_dict() == other.spec.to_dict() and self.split == other.split
                and len(self) == len(other) and all(a.equals(b) for a, b in zip(self.samples, other.samples)))


def featurize_sample(tokens: Sequence[int], durations: Sequence[int], spec: ToyLanguageSpec,
                     rng: np.random.Generator | None = None, language: Language | None = None) -> np.ndarray:
    lo, hi = spec.token_duration_range
    if any(d < lo or d > hi for d in durations):
        raise ValueError(f"durations {list(durations)} outside {spec.token_duration_range}")
    lang = language or Language(spec)
    base = np.repeat(lang.embeddings[np.asarray(tokens, dtype=np.int64)], durations, axis=0)
    if spec.noise_std > 0:
        rng = rng or _rng(spec.seed, _STREAM_SAMPLES)
        base = base + spec.noise_std * rng.standard_normal(base.shape)
    return base


def make_sample(spec: ToyLanguageSpec, rng: np.random.Generator, language: Language) -> Sample:
    content = spec.source_content_ids
    n = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
    tokens: list[int] = []
    while len(tokens) < n:
        a = int(rng.choice(content))
        # identical neighbours would be indistinguishable frame runs
        if tokens and a == tokens[-1] and len(content) > 1:
            continue
        tokens.append(a)
    durations = rng.integers(spec.token_duration_range[0], spec.token_duration_range[1] + 1, size=n)
    x = featurize_sample(tokens, durations, spec, rng, language)
    ends = np.cumsum(durations)
    spans = [(int(e - d), int(e)) for e, d in zip(ends, durations)]
    y = language.translate(tokens) + [EOS]
    u = language.expand_units(y)
    return Sample(x=x, a=tokens, a_spans=spans, y=y, u=u)


def synthesize_corpus(spec: ToyLanguageSpec, n: int, split: str = "train") -> Corpus:
    """Deterministic in (spec.seed, split, n); sample k uses its own counter-based stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}")
    lang = Language(spec)
    samples = [make_sample(spec, _rng(spec.seed, _STREAM_SAMPLES, SPLIT_IDS[split], k), lang)
               for k in range(n)]
    return Corpus(spec=spec, samples=samples, split=split)


def corpus_stats(corpus: Corpus) -> dict:
    xs = np.array([s.n_frames for s in corpus.samples], dtype=float)
    ys = np.array([len(s.y) - 1 for s in corpus.samples], dtype=float)
    us = np.array([len(s.u) for s in corpus.samples], dtype=float)
    ratio = float(np.mean(us / ys)) if len(corpus) else 0.0
    return {
        "samples": len(corpus),
        "mean_frames": float(xs.mean()) if len(xs) else 0.0,
        "max_frames": int(xs.max()) if len(xs) else 0,
        "mean_target_tokens": float(ys.mean()) if len(ys) else 0.0,
        "mean_units": float(us.mean()) if len(us) else 0.0,
        "unit_per_token_ratio": ratio,
        "suggested_upsample_rate": suggested_upsample_rate(corpus),
    }


def suggested_upsample_rate(corpus: Corpus, factor: float = 2.5) -> int:
    """round(factor * mean(|U| / |Y|)), |Y| without <eos>."""
    if not len(corpus):
        return 1
    ratio = np.mean([len(s.u) / (len(s.y) - 1) for s in corpus.samples])
    return max(1, int(round(factor * ratio)))


# ----------------------------------------------------------------- I/O


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        if "w" in mode:
            raw = open(path, "wb")
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            return _ClosingText(gz, raw)
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


class _ClosingText(io.TextIOWrapper):
    def __init__(self, gz, raw):
        super().__init__(gz, encoding="utf-8")
        self._raw = raw

    def close(self):
        super().close()
        self._raw.close()


def write_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "w") as f:
        header = {"format": FORMAT, "split": corpus.split, "count": len(corpus), "spec": corpus.spec.to_dict()}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in corpus.samples:
            rec = {"x": s.x.tolist(), "a": s.a, "a_spans": [list(p) for p in s.a_spans], "y": s.y, "u": s.u}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_corpus(path) -> Corpus:
    path = Path(path)
    with _open(path, "r") as f:
        offset = 0
        lines = []
        for raw in f:
            lines.append((offset, raw))
            offset += len(raw.encode("utf-8"))
    if not lines:
        raise CorpusFormatError(f"{path}: empty file, missing header at line 1 (offset 0)")

    def parse(lineno, off, raw):
        if not raw.endswith("\n"):
            raise CorpusFormatError(f"{path}: truncated record at line {lineno} (offset {off})")
        try:
            return json.loads(raw)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"{path}: invalid JSON at line {lineno} (offset {off + e.pos}): {e.msg}") from None

    header = parse(1, *lines[0])
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CorpusFormatError(f"{path}: line 1 (offset 0): unsupported format {header.get('format')!r}"
                                if isinstance(header, dict) else f"{path}: line 1: header is not an object")
    spec = ToyLanguageSpec.from_dict(header["spec"])
    samples = []
    for k, (off, raw) in enumerate(lines[1:], start=2):
        rec = parse(k, off, raw)
        missing = {"x", "a", "a_spans", "y", "u"} - set(rec) if isinstance(rec, dict) else {"<object>"}
        if missing:
            raise CorpusFormatError(f"{path}: line {k} (offset {off}): missing keys {sorted(missing)}")
        try:
            samples.append(Sample(x=np.array(rec["x"], dtype=np.float64), a=[int(v) for v in rec["a"]],
                                  a_spans=[tuple(p) for p in rec["a_spans"]],
                                  y=[int(v) for v in rec["y"]], u=[int(v) for v in rec["u"]]))
        except (ValueError, TypeError) as e:
            raise CorpusFormatError(f"{path}: line {k} (offset {off}): {e}") from None
    if "count" in header and header["count"] != len(samples):
        raise CorpusFormatError(f"{path}: header declares {header['count']} samples, found {len(samples)}"
                                f" (truncated after offset {lines[-1][0]})")
    return Corpus(spec=spec, samples=samples, split=header.get("split", "train"))


__all__ = [
    "BLANK", "EOS", "PAD", "FORMAT", "Corpus", "CorpusFormatError", "Language", "Sample",
    "ToyLanguageSpec", "corpus_stats", "featurize_sample", "make_sample", "read_corpus",
    "suggested_upsample_rate", "synthesize_corpus", "write_corpus",
]
