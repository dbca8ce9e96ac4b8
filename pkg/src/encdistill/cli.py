"""Command-line entry point: ``encdistill <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import checkpoint as ckpt
from .config import RunConfig, load_config
from .corpus import Vocabulary, build_vocab, make_batches, read_corpus
from .distill import DistillConfig
from .encoder import ConfigError, ModelConfig, audit_param_count, init_zeros, param_count
from .evaluation import bench, desk_bench_pair, f1_report, layer_stack_flops, mlm_eval, read_token_file
from .synthetic import bundled_corpus_path
from .training import DataConfig, TrainingDiverged, distill, train_teacher

log = logging.getLogger("encdistill")

LOG_ENV = "ENCDISTILL_LOG_LEVEL"


class UsageError(Exception):
    pass


class _Default(float):
    """Marks a float flag the user did not pass."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prepare_out(out: str | None, force: bool) -> Path | None:
    if out is None:
        return None
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path | None, command: str, config: dict, seed, inputs: dict,
                    outputs: dict, started: float, extra: dict | None = None) -> None:
    if out is None:
        return
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "wall_time_s": time.perf_counter() - started,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _corpus_path(arg: str | None) -> Path:
    return Path(arg) if arg else Path(str(bundled_corpus_path()))


# ---------------------------------------------------------------- commands

def cmd_params(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config).model
    out = _prepare_out(args.out, args.force)
    audit = audit_param_count(init_zeros(cfg))
    formula = param_count(cfg)
    rows = [
        ("L", cfg.num_layers), ("d_h", cfg.hidden_size), ("J", cfg.num_heads),
        ("E", cfg.ff_size), ("|W|", cfg.vocab_size), ("|E|", cfg.max_positions),
        ("formula_count", f"{formula:,}"), ("audited_count", f"{audit['counted']:,}"),
        ("lm_head_extra", f"{audit['lm_head_extra']:,}"),
        ("millions", f"{formula / 1e6:.1f}M"),
    ]
    text = "".join(f"{k}: {v}\n" for k, v in rows)
    sys.stdout.write(text)
    if out is not None:
        (out / "params.txt").write_text(text, encoding="utf-8")
    _write_manifest(out, "params", {"model": cfg.to_dict()}, None, {"config": args.config},
                    {"report": out / "params.txt"} if out else {}, started)
    return 0 if formula == audit["counted"] else 1


def cmd_train_teacher(args) -> int:
    started = time.perf_counter()
    rc = load_config(args.config)
    seed = rc.seed if args.seed is None else args.seed
    out = _prepare_out(args.out, args.force)
    corpus_path = _corpus_path(args.corpus)
    corpus = read_corpus(corpus_path)
    vocab = build_vocab(corpus, rc.model.vocab_size)
    model_cfg = rc.model.replace(vocab_size=len(vocab))
    if len(vocab) != rc.model.vocab_size:
        log.info("vocabulary has %d entries; model.vocab_size resolved to %d", len(vocab), len(vocab))
    result = train_teacher(model_cfg, corpus, vocab, args.steps, seed, rc.data, rc.optimizer,
                           log_path=out / "loss.log")
    vocab.save(out / "vocab.txt")
    meta = dict(result.meta, vocab=list(vocab.tokens))
    ckpt.save_checkpoint(result.model, meta, out / "checkpoint.bin")
    resolved = dict(rc.to_dict(), model=model_cfg.to_dict(), seed=seed)
    _write_manifest(out, "train-teacher", resolved, seed,
                    {"config": args.config, "corpus": corpus_path},
                    {"checkpoint": out / "checkpoint.bin", "loss_log": out / "loss.log",
                     "vocab": out / "vocab.txt"}, started,
                    {"steps": args.steps, "checkpoint_sha256": _sha256(out / "checkpoint.bin")})
    print(f"final mlm loss: {result.history[-1].mlm:.6f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def _vocab_from_checkpoint(c: ckpt.Checkpoint) -> Vocabulary:
    tokens = c.meta.get("vocab")
    if not tokens:
        raise ConfigError("checkpoint carries no vocabulary")
    return Vocabulary(tuple(tokens))


def cmd_distill(args) -> int:
    started = time.perf_counter()
    rc = load_config(args.config) if args.config else None
    teacher = ckpt.load_checkpoint(args.teacher)
    if rc is None:
        # without a config, batch the corpus the way the teacher saw it
        data = DataConfig(**teacher.meta["data"]) if "data" in teacher.meta else DataConfig(
            n_max=min(DataConfig().n_max, teacher.config.max_positions))
        rc = RunConfig(model=teacher.config, data=data)
    weights = {}
    for name in ("alpha", "beta", "gamma"):
        value = getattr(args, name)
        weights[name] = getattr(rc.distill, name) if isinstance(value, _Default) else float(value)
    dcfg = DistillConfig(**dict(dataclasses.asdict(rc.distill), **weights))
    seed = rc.seed if args.seed is None else args.seed
    out = _prepare_out(args.out, args.force)
    layers = rc.student_layers
    if layers is None:
        layers = teacher.config.num_layers // dcfg.copy_stride
    student_cfg = teacher.config.replace(num_layers=layers)
    vocab = _vocab_from_checkpoint(teacher)
    corpus_path = _corpus_path(args.corpus)
    corpus = read_corpus(corpus_path)
    result = distill(teacher, student_cfg, corpus, vocab, args.steps, dcfg, seed, rc.data,
                     rc.optimizer, log_path=out / "loss.log")
    vocab.save(out / "vocab.txt")
    meta = dict(result.meta, vocab=list(vocab.tokens))
    ckpt.save_checkpoint(result.model, meta, out / "checkpoint.bin")
    resolved = rc.to_dict()
    resolved.update(model=student_cfg.to_dict(), seed=seed,
                    distill=dict(dataclasses.asdict(dcfg), student_layers=layers))
    inputs = {"teacher": args.teacher, "corpus": corpus_path}
    if args.config:
        inputs["config"] = args.config
    _write_manifest(out, "distill", resolved, seed, inputs,
                    {"checkpoint": out / "checkpoint.bin", "loss_log": out / "loss.log",
                     "vocab": out / "vocab.txt"}, started,
                    {"steps": args.steps, "checkpoint_sha256": _sha256(out / "checkpoint.bin")})
    last = result.history[-1]
    print(f"final loss: total {last.total:.6f} soft_label {last.soft_label:.6f} "
          f"cosine {last.cosine:.6f} mlm {last.mlm:.6f}")
    return 0


def cmd_eval_mlm(args) -> int:
    started = time.perf_counter()
    c = ckpt.load_checkpoint(args.checkpoint)
    out = _prepare_out(args.out, args.force)
    vocab = _vocab_from_checkpoint(c)
    corpus_path = _corpus_path(args.corpus)
    corpus = read_corpus(corpus_path)
    n_max = min(args.seq_len, c.config.max_positions)
    report = mlm_eval(c.model, make_batches(corpus, vocab, args.batch, n_max, args.seed,
                                            c.config.max_positions))
    text = report.to_text()
    sys.stdout.write(text)
    if out is not None:
        (out / "mlm_eval.txt").write_text(text, encoding="utf-8")
    _write_manifest(out, "eval-mlm", {"model": c.config.to_dict()}, args.seed,
                    {"checkpoint": args.checkpoint, "corpus": corpus_path},
                    {"report": out / "mlm_eval.txt"} if out else {}, started)
    return 0


def cmd_bench(args) -> int:
    started = time.perf_counter()
    out = _prepare_out(args.out, args.force)
    if args.teacher or args.student:
        if not (args.teacher and args.student):
            raise UsageError("--teacher and --student must be given together")
        teacher = ckpt.load_checkpoint(args.teacher).model
        student = ckpt.load_checkpoint(args.student).model
        tc, sc = teacher.config, student.config
    elif args.pair == "base":
        from .encoder import CAMEMBERT_BASE, DISTILCAMEMBERT_BASE
        tc, sc = CAMEMBERT_BASE, DISTILCAMEMBERT_BASE
        teacher = student = None
    else:
        teacher, student = desk_bench_pair(seed=args.seed)
        tc, sc = teacher.config, student.config
    if args.analytic_only:
        tf, sf = layer_stack_flops(tc, args.seq_len, args.batch), layer_stack_flops(sc, args.seq_len, args.batch)
        report = {"seq_len": args.seq_len, "batch": args.batch, "teacher_flops": tf,
                  "student_flops": sf, "flop_ratio": tf / sf}
        text = "".join(f"{k}: {v}\n" for k, v in report.items())
    else:
        if teacher is None:
            from .encoder import init_random
            teacher, student = init_random(tc, args.seed), init_random(sc, args.seed + 1)
        r = bench(teacher, student, args.seq_len, args.batch, args.iters, seed=args.seed)
        text = r.to_text()
        report = r.to_dict()
    sys.stdout.write(text)
    if out is not None:
        (out / "bench.txt").write_text(text, encoding="utf-8")
        (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "bench", {"teacher": tc.to_dict(), "student": sc.to_dict()}, args.seed,
                    {}, {"report": out / "bench.txt"} if out else {}, started)
    return 0


def cmd_f1(args) -> int:
    started = time.perf_counter()
    out = _prepare_out(args.out, args.force)
    pred, gold = read_token_file(args.pred), read_token_file(args.gold)
    report = f1_report(pred, gold)
    text = report.to_text()
    sys.stdout.write(text)
    if out is not None:
        (out / "f1.txt").write_text(text, encoding="utf-8")
        (out / "f1.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "f1", {}, None, {"pred": args.pred, "gold": args.gold},
                    {"report": out / "f1.txt"} if out else {}, started)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="encdistill", formatter_class=fmt,
                                     description="Transformer encoder distillation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory for artifacts and the run manifest")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")

    p = sub.add_parser("params", formatter_class=fmt, help="print the parameter-count table")
    p.add_argument("--config", required=True, help="JSON run config (only `model` is read)")
    common(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train-teacher", formatter_class=fmt, help="MLM-pretrain a teacher")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--corpus", default=None, help="UTF-8 corpus, one document per line; "
                                                  "the bundled synthetic corpus when omitted")
    p.add_argument("--steps", type=int, default=2000, help="optimization steps")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common(p, out_required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", formatter_class=fmt, help="distill a student from a teacher checkpoint")
    p.add_argument("--config", default=None, help="JSON run config; built-in defaults when omitted")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--corpus", default=None, help="corpus file; the bundled synthetic corpus when omitted")
    p.add_argument("--steps", type=int, default=1000, help="optimization steps")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--alpha", type=float, default=_Default(0.5), help="soft-label (KL) weight")
    p.add_argument("--beta", type=float, default=_Default(0.3), help="cosine weight")
    p.add_argument("--gamma", type=float, default=_Default(0.2), help="MLM weight")
    common(p, out_required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval-mlm", formatter_class=fmt, help="masked-token accuracy and perplexity")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--corpus", default=None, help="corpus file; the bundled synthetic corpus when omitted")
    p.add_argument("--seed", type=int, default=0, help="masking seed")
    p.add_argument("--batch", type=int, default=16, help="batch size")
    p.add_argument("--seq-len", type=int, default=64, help="maximum sequence length")
    common(p)
    p.set_defaults(func=cmd_eval_mlm)

    p = sub.add_parser("bench", formatter_class=fmt, help="teacher/student forward-time benchmark")
    p.add_argument("--teacher", default=None, help="teacher checkpoint; the built-in --pair when omitted")
    p.add_argument("--student", default=None, help="student checkpoint")
    p.add_argument("--pair", choices=("desk", "base"), default="desk",
                   help="built-in shape pair when no checkpoints are given")
    p.add_argument("--seq-len", type=int, default=128, help="tokens per sequence")
    p.add_argument("--batch", type=int, default=8, help="sequences per forward pass")
    p.add_argument("--iters", type=int, default=10, help="timed iterations per model")
    p.add_argument("--seed", type=int, default=0, help="input and init seed")
    p.add_argument("--analytic-only", action="store_true", help="report FLOP counts without timing")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("f1", formatter_class=fmt, help="token-overlap F1 between two token files")
    p.add_argument("--pred", required=True, help="predictions, one example per line")
    p.add_argument("--gold", required=True, help="references, one example per line")
    common(p)
    p.set_defaults(func=cmd_f1)
    return parser


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ckpt.CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
