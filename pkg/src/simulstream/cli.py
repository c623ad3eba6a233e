"""Command-line entry point: gen-data, train, eval, curve, inspect.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .ctc import BLANK, greedy_path
from .evalkit import curve_plot_data, evaluate_corpus, parse_grid, quality_latency_curve, rows_to_csv
from .model import (
    LOG_FIELDS,
    ModelConfig,
    StreamSpeech,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    load_model,
    save_model,
)
from .numerics import CheckpointError
from .policy import make_clock, run_simul_inference
from .toyspeech import (
    CorpusFormatError,
    ToyLanguageSpec,
    corpus_stats,
    read_corpus,
    suggested_upsample_rate,
    synthesize_corpus,
    write_corpus,
)

log = logging.getLogger("simulstream")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SPLIT_FILE = "{}.jsonl.gz"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# ------------------------------------------------------------------ helpers


def _chunk_arg(text: str) -> int | None:
    return parse_grid(text)[0]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _snapshot(out: Path, command: str, resolved: dict) -> None:
    _write_json(out / "resolved_config.json", {"command": command, "version": __version__, **resolved})


def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise UsageError(f"invalid TOML in {path}: {e}") from None


def _merge(args: argparse.Namespace, cfg: dict) -> None:
    """File values fill only options the user left unset; flags win."""
    for key, value in cfg.items():
        if isinstance(value, dict):
            continue
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r} for this command")
        if getattr(args, dest) is None:
            setattr(args, dest, value)


def _corpus_path(path: str, split: str) -> Path:
    p = Path(path)
    return p / SPLIT_FILE.format(split) if p.is_dir() else p


def _load_corpus(path: str | None, split: str):
    if not path:
        raise UsageError("--corpus is required")
    return read_corpus(_corpus_path(path, split))


def _default(v, d):
    return d if v is None else v


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg: dict) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    n = _default(args.n, 5000)
    n_eval = _default(args.n_eval, 200)
    if n < 1 or n_eval < 1:
        raise UsageError("sample counts must be >= 1")
    spec_kw = dict(cfg.get("data", {}))
    spec_kw["seed"] = _default(args.seed, spec_kw.get("seed", 0))
    if args.noise_std is not None:
        spec_kw["noise_std"] = args.noise_std
    try:
        spec = ToyLanguageSpec(**spec_kw)
    except TypeError as e:
        raise UsageError(f"bad [data] section: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for split, count in (("train", n), ("valid", n_eval), ("test", n_eval)):
        corpus = synthesize_corpus(spec, count, split)
        write_corpus(corpus, out / SPLIT_FILE.format(split))
        stats[split] = corpus_stats(corpus)
    _write_json(out / "stats.json", stats)
    _snapshot(out, "gen-data", {"n": n, "n_eval": n_eval, "spec": spec.to_dict()})
    print(json.dumps(stats["train"], sort_keys=True))
    return EXIT_OK


def _model_config(args, cfg: dict, corpus) -> ModelConfig:
    kw = dict(cfg.get("model", {}))
    spec = corpus.spec
    kw.setdefault("frame_dim", spec.frame_dim)
    kw.setdefault("src_vocab", spec.source_vocab_size)
    kw.setdefault("tgt_vocab", spec.target_vocab_size)
    kw.setdefault("unit_vocab", spec.unit_vocab_size)
    if args.r is not None:
        kw["upsample_rate"] = args.r
    kw.setdefault("upsample_rate", suggested_upsample_rate(corpus))
    if args.chunk_mode is not None:
        kw["chunk_mode"] = args.chunk_mode
    if args.C is not None:
        if kw.get("chunk_mode") != "fixed":
            raise UsageError("--C for training requires --chunk-mode fixed")
        kw["fixed_chunk"] = args.C
    kw["init_seed"] = _default(args.seed, kw.get("init_seed", 0))
    try:
        return ModelConfig.from_dict(kw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad model config: {e}") from None


def cmd_train(args, cfg: dict) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    corpus = _load_corpus(args.corpus, "train")
    out = Path(args.out)
    ckpt_dir = out / "ckpt"
    steps = _default(args.steps, 2000)
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    tkw = dict(cfg.get("train", {}))
    tkw["seed"] = _default(args.seed, tkw.get("seed", 0))
    tkw["steps"] = steps
    for name in ("batch_size", "lr", "warmup"):
        if getattr(args, name) is not None:
            tkw[name] = getattr(args, name)
    known = {f.name for f in fields(TrainConfig)}
    if set(tkw) - known:
        raise UsageError(f"unknown [train] keys: {sorted(set(tkw) - known)}")
    tcfg = TrainConfig(**tkw)

    if args.ckpt:
        model, opt, meta = load_model(args.ckpt)
        if opt is None:
            raise UsageError(f"{args.ckpt} has no optimizer state to resume from")
        start = opt.step
    else:
        model, opt, start = StreamSpeech(_model_config(args, cfg, corpus)), None, 0
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, corpus, tcfg, opt)
    _snapshot(out, "train", {"corpus": str(_corpus_path(args.corpus, "train")), "resume": args.ckpt,
                             "start_step": start, "train": tkw, "model": model.config.to_dict()})

    log_path = out / "train_log.csv"
    append = start > 0 and log_path.exists()
    t0 = time.perf_counter()
    with open(log_path, "a" if append else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n", extrasaction="ignore")
        if not append:
            w.writeheader()

        def on_row(row):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            if args.log_every and row["step"] % args.log_every == 0:
                log.info("step %d total %.4f", row["step"], row["total"])

        try:
            trainer.run(steps, on_row)
        except TrainingDiverged as e:
            print(f"error: training diverged: {e}", file=sys.stderr)
            return EXIT_RUNTIME
    save_model(ckpt_dir, model, trainer.opt, {"train": tkw})
    # wall-clock timing is kept apart from the deterministic outputs
    _write_json(out / "timing.json", {"seconds": time.perf_counter() - t0, "steps": steps})
    print(json.dumps({"checkpoint": str(ckpt_dir), "step": trainer.opt.step}))
    return EXIT_OK


def _eval_setup(args, split_default="test"):
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    if args.out is None:
        raise UsageError("--out is required")
    corpus = _load_corpus(args.corpus, args.split or split_default)
    model, _, _ = load_model(args.ckpt)
    samples = corpus.samples[: args.limit] if args.limit else corpus.samples
    clock = make_clock(args.clock or "cost")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return model, samples, clock, out


def cmd_eval(args, cfg: dict) -> int:
    mode = args.mode or "simul"
    if args.k is not None and mode != "waitk":
        raise UsageError("--k is only valid with --mode waitk")
    if mode == "waitk" and args.k is None:
        raise UsageError("--mode waitk requires --k")
    if mode == "offline" and args.C is not None:
        raise UsageError("--C is not valid with --mode offline")
    C = args.C if mode == "simul" else None
    model, samples, clock, out = _eval_setup(args)
    report, results = evaluate_corpus(model, samples, mode, C=C, k=args.k, clock=clock)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    with open(out / "traces.jsonl", "w") as f:
        for i, r in enumerate(results):
            rec = {"index": i, "y": r.y, "u": r.u, "trace": r.trace.to_dict()}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _snapshot(out, "eval", {"ckpt": args.ckpt, "corpus": args.corpus, "split": args.split or "test",
                            "mode": mode, "C": C, "k": args.k, "clock": clock.name, "limit": args.limit})
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_curve(args, cfg: dict) -> int:
    grid = parse_grid(args.grid or "2,4,8,16,inf")
    model, samples, clock, out = _eval_setup(args)
    reports = quality_latency_curve(model, samples, grid, clock=clock)
    (out / "curve.csv").write_text(rows_to_csv([r.flat() for r in reports]))
    _write_json(out / "curve_plot.json", curve_plot_data(reports))
    _snapshot(out, "curve", {"ckpt": args.ckpt, "corpus": args.corpus, "split": args.split or "test",
                             "grid": ["inf" if c is None else c for c in grid], "clock": clock.name,
                             "limit": args.limit})
    print((out / "curve.csv").read_text(), end="")
    return EXIT_OK


def cmd_inspect(args, cfg: dict) -> int:
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    corpus = _load_corpus(args.corpus, args.split or "test")
    idx = _default(args.sample, 0)
    if not 0 <= idx < len(corpus):
        raise UsageError(f"--sample must be in [0, {len(corpus)})")
    sample = corpus.samples[idx]
    model, _, _ = load_model(args.ckpt)
    C = args.C
    cache = model.new_encoder_cache(C)
    step = sample.n_frames if C is None else C
    for start in range(0, sample.n_frames, step):
        end = min(start + step, sample.n_frames)
        model.encode_chunk(sample.x[start:end], cache, final=end == sample.n_frames)
    lp_asr, lp_nar = model.probe_states(cache.states)

    def labels(lp):
        # blank frames are omitted
        return [{"frame": j, "label": int(s)} for j, s in enumerate(greedy_path(lp)) if s != BLANK]

    run = run_simul_inference(model, sample.x, C)
    dump = {
        "sample": idx,
        "C": "inf" if C is None else C,
        "frames": sample.n_frames,
        "chunk_boundaries": list(range(step, sample.n_frames, step)),
        "asr": labels(lp_asr),
        "nar_s2tt": labels(lp_nar),
        "source_tokens": sample.a,
        "source_spans": [list(s) for s in sample.a_spans],
        "tokens": [{"token": t["token"], "g": t["prefix"]} for t in run.trace.tokens],
    }
    text = json.dumps(dump, sort_keys=True, indent=1) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"inspect_{idx}.json").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "curve": cmd_curve,
            "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="simulstream", description="Simultaneous speech-to-speech translation on synthetic data.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, corpus=True):
        sp.add_argument("--config", help="TOML file; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if corpus:
            sp.add_argument("--corpus", help="corpus file or gen-data output directory")
            sp.add_argument("--split", choices=["train", "valid", "test"])

    g = sub.add_parser("gen-data", help="synthesize train/valid/test corpora")
    common(g, corpus=False)
    g.add_argument("--n", type=int, help="training samples (default 5000)")
    g.add_argument("--n-eval", type=int, help="valid and test samples each (default 200)")
    g.add_argument("--noise-std", type=float)

    t = sub.add_parser("train", help="multi-task training")
    common(t)
    t.add_argument("--ckpt", help="resume from this checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--chunk-mode", choices=["multi", "fixed", "offline"])
    t.add_argument("--C", type=int, help="chunk size for --chunk-mode fixed")
    t.add_argument("--r", type=int, help="unit upsampling rate (default: derived from corpus)")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--log-every", type=int, default=0)

    for name, hlp in (("eval", "evaluate one policy setting"), ("curve", "quality-latency curve over chunk sizes")):
        e = sub.add_parser(name, help=hlp)
        common(e)
        e.add_argument("--ckpt")
        e.add_argument("--clock", choices=["cost", "wall"])
        e.add_argument("--limit", type=int, help="evaluate the first N samples only")
        if name == "eval":
            e.add_argument("--mode", choices=["offline", "simul", "waitk"])
            e.add_argument("--C", type=_chunk_arg, help="chunk size in frames or 'inf'")
            e.add_argument("--k", type=int)
        else:
            e.add_argument("--grid", help="comma-separated chunk sizes, e.g. 2,4,8,16,inf")

    i = sub.add_parser("inspect", help="dump CTC alignments for one sample")
    common(i)
    i.add_argument("--ckpt")
    i.add_argument("--sample", type=int)
    i.add_argument("--C", type=_chunk_arg, default=None)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_toml(args.config)
        _merge(args, cfg)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusFormatError, CheckpointError, FileNotFoundError, PermissionError,
            NotADirectoryError, IsADirectoryError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
