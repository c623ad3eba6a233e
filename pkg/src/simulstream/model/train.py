"""Multi-chunk training loop and model checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..numerics import OptimizerState, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint
from ..toyspeech import Corpus, Sample
from .config import ModelConfig
from .streamspeech import StreamSpeech

log = logging.getLogger(__name__)

_STREAM_EPOCH = 31
_STREAM_CHUNK = 32
LOG_FIELDS = ["step", "chunk", "lr", "total", "s2ut", "ar_s2tt", "asr", "nar_s2tt", "grad_norm", "skipped"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became NaN at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 400
    clip_norm: float = 1.0
    seed: int = 0


def sample_chunk(rng: np.random.Generator, max_frames: int, mode: str, fixed: int) -> int | None:
    """C ~ U{1..|X|} for multi-chunk training; None means offline."""
    if mode == "offline":
        return None
    if mode == "fixed":
        return fixed
    c = int(rng.integers(1, max_frames + 1))
    return None if c >= max_frames else c


class Trainer:
    """Deterministic given (corpus, configs, seed); batch k depends only on (seed, k)."""

    def __init__(self, model: StreamSpeech, corpus: Corpus, cfg: TrainConfig,
                 opt: OptimizerState | None = None):
        if not len(corpus):
            raise ValueError("empty training corpus")
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.opt = opt or OptimizerState(lr=cfg.lr, warmup=cfg.warmup)
        self.params = model.parameters()
        self._epoch = None
        self._batches: list[np.ndarray] = []

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.corpus) / self.cfg.batch_size)

    def _epoch_batches(self, epoch: int) -> list[np.ndarray]:
        if self._epoch != epoch:
            rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, _STREAM_EPOCH, epoch]))
            perm = rng.permutation(len(self.corpus))
            B = self.cfg.batch_size
            pool = 8 * B
            lengths = np.array([s.n_frames for s in self.corpus.samples])
            batches = []
            # length-bucketed pools keep padding low
            for p in range(0, len(perm), pool):
                ids = perm[p:p + pool]
                ids = ids[np.argsort(lengths[ids], kind="stable")]
                batches.extend(ids[i:i + B] for i in range(0, len(ids), B))
            order = rng.permutation(len(batches))
            self._batches = [batches[i] for i in order]
            self._epoch = epoch
        return self._batches

    def batch(self, step: int) -> list[Sample]:
        batches = self._epoch_batches(step // self.batches_per_epoch)
        return [self.corpus.samples[i] for i in batches[step % len(batches)]]

    def chunk_for(self, step: int, samples: list[Sample]) -> int | None:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, _STREAM_CHUNK, step]))
        cfg = self.model.config
        return sample_chunk(rng, max(s.n_frames for s in samples), cfg.chunk_mode, cfg.fixed_chunk)

    def train_step(self) -> dict:
        step = self.opt.step  # 0-based index of the update about to happen
        samples = self.batch(step)
        chunk = self.chunk_for(step, samples)
        bundle = self.model.compute_multitask_loss(samples, chunk)
        total = bundle.total.item()
        if not math.isfinite(total):
            raise TrainingDiverged(step + 1)
        for p in self.params:
            p.grad = None
        bundle.total.backward()
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        gnorm = clip_grad_norm(self.params, self.cfg.clip_norm)
        if not math.isfinite(gnorm):
            raise TrainingDiverged(step + 1)
        adam_step(self.opt, self.params)
        row = {"step": self.opt.step, "chunk": "inf" if chunk is None else chunk, "lr": self.opt.current_lr(),
               "grad_norm": gnorm, "skipped": bundle.skipped}
        row.update(bundle.values())
        return row

    def run(self, steps: int, callback=None) -> list[dict]:
        rows = []
        for _ in range(steps):
            row = self.train_step()
            rows.append(row)
            if callback is not None:
                callback(row)
        return rows


def train_multichunk(corpus: Corpus, config: ModelConfig, steps: int, train_cfg: TrainConfig | None = None,
                     callback=None):
    """Train a fresh model; returns (model, optimizer state, log rows)."""
    train_cfg = train_cfg or TrainConfig(steps=steps)
    model = StreamSpeech(config)
    trainer = Trainer(model, corpus, train_cfg)
    rows = trainer.run(steps, callback)
    return model, trainer.opt, rows


def save_model(path, model: StreamSpeech, opt: OptimizerState | None = None, extra: dict | None = None):
    tensors = dict(model.state_dict())
    meta = {"model_config": model.config.to_dict(), "step": 0}
    if opt is not None:
        for name, m in sorted(opt.m.items()):
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = opt.v[name]
        meta["step"] = opt.step
        meta["optimizer"] = {"lr": opt.lr, "warmup": opt.warmup, "betas": list(opt.betas), "eps": opt.eps}
    meta.update(extra or {})
    return save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[StreamSpeech, OptimizerState | None, dict]:
    tensors, meta = load_checkpoint(path)
    model = StreamSpeech(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = OptimizerState(lr=o["lr"], warmup=o["warmup"], betas=tuple(o["betas"]), eps=o["eps"],
                             step=meta["step"])
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                opt.m[k[len("adam.m."):]] = v.copy()
            elif k.startswith("adam.v."):
                opt.v[k[len("adam.v."):]] = v.copy()
    return model, opt, meta


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
