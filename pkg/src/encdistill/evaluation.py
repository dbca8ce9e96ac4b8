"""Token-overlap F1, zero-shot composition, MLM metrics and the speed benchmark."""
from __future__ import annotations

import json
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .corpus import MaskedBatch, NUM_SPECIAL
from .encoder import EncoderModel, ModelConfig, encode, init_random
from .seeding import make_rng


def _as_text(d: dict) -> str:
    lines = []
    for key, value in d.items():
        if isinstance(value, (list, dict)):
            value = json.dumps(value)
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- token F1

@dataclass(frozen=True)
class F1Score:
    precision: float
    recall: float
    f1: float


@dataclass
class F1Report:
    precision: float
    recall: float
    f1: float
    macro_f1: float
    per_example: list[F1Score] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return _as_text({"examples": len(self.per_example), "precision": self.precision,
                         "recall": self.recall, "f1": self.f1, "macro_f1": self.macro_f1})


def _prf(common: int, n_pred: int, n_gold: int) -> F1Score:
    if n_pred == 0 and n_gold == 0:
        return F1Score(1.0, 1.0, 1.0)
    p = common / n_pred if n_pred else 0.0
    r = common / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return F1Score(p, r, f)


def token_f1(predicted: Iterable[str], gold: Iterable[str]) -> F1Score:
    """Precision/recall/F1 over the multiset intersection of two token bags.

    Two empty bags agree perfectly (score 1); one empty bag scores 0.
    """
    pred, ref = Counter(predicted), Counter(gold)
    common = sum((pred & ref).values())
    return _prf(common, sum(pred.values()), sum(ref.values()))


def f1_report(predicted: Sequence[Iterable[str]], gold: Sequence[Iterable[str]]) -> F1Report:
    """Per-example scores, micro-average over pooled counts, and the macro mean F1."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions for {len(gold)} references")
    per, common_t, pred_t, gold_t = [], 0, 0, 0
    for p, g in zip(predicted, gold):
        pc, gc = Counter(p), Counter(g)
        common = sum((pc & gc).values())
        per.append(_prf(common, sum(pc.values()), sum(gc.values())))
        common_t += common
        pred_t += sum(pc.values())
        gold_t += sum(gc.values())
    micro = _prf(common_t, pred_t, gold_t)
    macro = sum(s.f1 for s in per) / len(per) if per else 0.0
    return F1Report(micro.precision, micro.recall, micro.f1, macro, per)


def read_token_file(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


# ---------------------------------------------------------------- zero-shot

def zero_shot_classify(entailment_scores: Mapping[str, float]) -> dict[str, float]:
    """Softmax of per-class entailment scores over the candidate classes."""
    if not entailment_scores:
        raise ValueError("no candidate classes")
    labels = list(entailment_scores)
    scores = np.array([float(entailment_scores[k]) for k in labels], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("entailment scores must be finite")
    e = np.exp(scores - scores.max())
    probs = e / e.sum()
    return {k: float(p) for k, p in zip(labels, probs)}


# ---------------------------------------------------------------- MLM metrics

@dataclass
class MLMEvalReport:
    accuracy: float
    perplexity: float
    mean_nll: float
    masked_count: int

    def to_text(self) -> str:
        return _as_text(asdict(self))


LogProbFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def mlm_eval(model: EncoderModel | LogProbFn, batches: Iterable[MaskedBatch]) -> MLMEvalReport:
    """Top-1 accuracy and perplexity over masked positions.

    ``model`` may be an encoder or any callable ``(ids, valid) -> log_probs [B, V, n]``.
    """
    if isinstance(model, EncoderModel):
        def fn(ids, valid, m=model):
            return encode(m, ids, valid).log_probs.data
    else:
        fn = model
    correct = count = 0
    nll = 0.0
    for batch in batches:
        if batch.empty:
            continue
        lp = np.asarray(fn(batch.token_ids, batch.valid), dtype=np.float64)
        b_idx, pos = np.nonzero(batch.mask)
        truth = batch.labels[b_idx, pos]
        cols = lp[b_idx, :, pos]                       # [masked, V]
        nll -= cols[np.arange(len(truth)), truth].sum()
        correct += int((cols.argmax(axis=1) == truth).sum())
        count += len(truth)
    if count == 0:
        raise ValueError("no masked tokens to evaluate")
    mean_nll = nll / count
    return MLMEvalReport(correct / count, math.exp(mean_nll), mean_nll, count)


# ---------------------------------------------------------------- benchmark

def layer_stack_flops(config: ModelConfig, seq_len: int, batch: int = 1) -> int:
    """Multiply-add FLOPs (2 per MAC) of the Transformer layers, excluding embeddings and head."""
    d, E, n = config.hidden_size, config.ff_size, seq_len
    per_layer = 2 * (4 * d * d * n + 2 * n * n * d + 2 * d * E * n)
    return config.num_layers * per_layer * batch


@dataclass
class BenchReport:
    seq_len: int
    batch: int
    iters: int
    teacher_mean_s: float
    teacher_median_s: float
    student_mean_s: float
    student_median_s: float
    speedup: float
    teacher_flops: int
    student_flops: int
    flop_ratio: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return _as_text(self.to_dict())


def desk_bench_pair(vocab_size: int = 512, seed: int = 0) -> tuple[EncoderModel, EncoderModel]:
    """12-layer and 6-layer desk models sharing every dimension but depth."""
    cfg = ModelConfig(num_layers=12, hidden_size=128, num_heads=4, ff_size=512,
                      vocab_size=vocab_size, max_positions=128)
    return init_random(cfg, seed), init_random(cfg.replace(num_layers=6), seed + 1)


def _time_forward(model: EncoderModel, ids: np.ndarray, iters: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        encode(model, ids)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        encode(model, ids)
        times.append(time.perf_counter() - t0)
    return times


def bench(teacher: EncoderModel, student: EncoderModel, seq_len: int = 128, batch: int = 8,
          iters: int = 10, warmup: int = 2, seed: int = 0) -> BenchReport:
    """Single-thread forward wall time of both models on identical inputs.

    Reports per-model mean and median times; ``speedup`` is the median over
    iterations of teacher time / student time for back-to-back runs.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    tc, sc = teacher.config, student.config
    warnings = []
    if (tc.hidden_size, tc.num_heads, tc.ff_size) != (sc.hidden_size, sc.num_heads, sc.ff_size):
        warnings.append("teacher and student differ in width; the FLOP ratio does not isolate depth")
    vocab = min(tc.vocab_size, sc.vocab_size)
    rng = make_rng(seed)
    ids = rng.integers(NUM_SPECIAL, max(vocab, NUM_SPECIAL + 1), size=(batch, seq_len))
    ids[:, 0] = 0
    with threadpool_limits(limits=1):
        # interleave runs, alternating which goes first, so load drift and
        # cache state after the other model's pass hit both alike
        t_times, s_times = [], []
        _time_forward(teacher, ids, 0, warmup)
        _time_forward(student, ids, 0, warmup)
        for i in range(iters):
            if i % 2:
                s_times += _time_forward(student, ids, 1, 0)
                t_times += _time_forward(teacher, ids, 1, 0)
            else:
                t_times += _time_forward(teacher, ids, 1, 0)
                s_times += _time_forward(student, ids, 1, 0)
    tf = layer_stack_flops(tc, seq_len, batch)
    sf = layer_stack_flops(sc, seq_len, batch)
    # adjacent runs share the same background load, so the median of the
    # paired ratios is steadier than the ratio of the two medians
    speedup = statistics.median(t / s for t, s in zip(t_times, s_times))
    return BenchReport(seq_len, batch, iters, statistics.fmean(t_times), statistics.median(t_times),
                       statistics.fmean(s_times), statistics.median(s_times), speedup, tf, sf,
                       tf / sf if sf else math.inf, warnings)
