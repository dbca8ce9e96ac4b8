"""Training loops for MLM pretraining and distillation, with an Adam optimizer."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint
from .corpus import MaskedBatch, Vocabulary, batch_stream
from .distill import DistillConfig, LossBreakdown, distill_loss, init_student
from .encoder import EncoderModel, ModelConfig, audit_param_count, encode, init_random
from .seeding import derive_seed

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = "step\tsoft_label\tcosine\tmlm\ttotal"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.05
    clip_norm: float = 1.0


@dataclass(frozen=True)
class DataConfig:
    batch_size: int = 16
    n_max: int = 64
    mask_rate: float = 0.15


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


class Adam:
    """Adam with linear warmup and global-norm gradient clipping."""

    def __init__(self, params: Sequence[ad.Tensor], config: OptimizerConfig, total_steps: int):
        self.params = list(params)
        self.config = config
        self.warmup = max(1, math.ceil(config.warmup_fraction * total_steps))
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params],
                                    [np.zeros_like(p.data) for p in self.params])

    def lr_at(self, step: int) -> float:
        return self.config.lr * min(1.0, step / self.warmup)

    def step(self) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip gradient norm."""
        cfg = self.config
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel().astype(np.float64))) for g in grads))
        if not math.isfinite(norm):
            raise FloatingPointError("gradient norm is not finite")
        coef = min(1.0, cfg.clip_norm / (norm + 1e-6)) if cfg.clip_norm else 1.0
        st = self.state
        st.step += 1
        t = st.step
        lr = self.lr_at(t)
        bc1 = 1 - cfg.beta1 ** t
        bc2 = 1 - cfg.beta2 ** t
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            g = g * np.float32(coef)
            m *= np.float32(cfg.beta1)
            m += np.float32(1 - cfg.beta1) * g
            v *= np.float32(cfg.beta2)
            v += np.float32(1 - cfg.beta2) * (g * g)
            p.data -= np.float32(lr) * (m / np.float32(bc1)) / (np.sqrt(v / np.float32(bc2)) + np.float32(cfg.eps))
        return norm


@dataclass
class LossRecord:
    step: int
    soft_label: float
    cosine: float
    mlm: float
    total: float

    def to_line(self) -> str:
        return "\t".join([str(self.step)] + [repr(float(x)) for x in
                                             (self.soft_label, self.cosine, self.mlm, self.total)])

    @classmethod
    def from_line(cls, line: str) -> "LossRecord":
        step, *vals = line.rstrip("\n").split("\t")
        return cls(int(step), *map(float, vals))

    @classmethod
    def from_breakdown(cls, step: int, bd: LossBreakdown) -> "LossRecord":
        return cls(step, bd.soft_label, bd.cosine, bd.mlm, bd.total)


class LossLog:
    """Append-only tab-separated loss log (one record per line)."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[LossRecord] = []
        if self.path is not None:
            self.path.write_text(LOSS_LOG_HEADER + "\n", encoding="utf-8")

    def append(self, rec: LossRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(rec.to_line() + "\n")

    @staticmethod
    def read(path) -> list[LossRecord]:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return [LossRecord.from_line(l) for l in lines[1:] if l]


@dataclass
class TrainResult:
    model: EncoderModel
    history: list[LossRecord]
    final_batch: MaskedBatch
    meta: dict = field(default_factory=dict)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.history])


def _run(model: EncoderModel, batches: Iterator[MaskedBatch], steps: int,
         opt_config: OptimizerConfig, dcfg: DistillConfig, teacher: EncoderModel | None,
         loss_log: LossLog) -> MaskedBatch:
    use_teacher = teacher is not None and (dcfg.alpha > 0 or dcfg.beta > 0)
    opt = Adam(model.parameters(), opt_config, steps)
    expected = audit_param_count(model)["total_stored"]
    batch = None
    for step in range(steps):
        batch = next(batches)
        try:
            t_out = encode(teacher, batch.token_ids, batch.valid) if use_teacher else None
            model.zero_grad()
            with ad.Tape() as tape:
                s_out = encode(model, batch.token_ids, batch.valid)
                bd = distill_loss(s_out, t_out, batch, dcfg)
            ad.backward(tape, bd.total_tensor)
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        loss_log.append(LossRecord.from_breakdown(step, bd))
        if step % 100 == 0:
            log.debug("step %d total %.5f", step, bd.total)
    assert audit_param_count(model)["total_stored"] == expected
    model.zero_grad()
    # final line: the trained model re-scored on the last batch
    t_out = encode(teacher, batch.token_ids, batch.valid) if use_teacher else None
    bd = distill_loss(encode(model, batch.token_ids, batch.valid), t_out, batch, dcfg)
    loss_log.append(LossRecord.from_breakdown(steps, bd))
    return batch


MLM_ONLY = DistillConfig(alpha=0.0, beta=0.0, gamma=1.0)


def train_teacher(config: ModelConfig, corpus: Sequence[str], vocab: Vocabulary, steps: int,
                  seed: int, data: DataConfig = DataConfig(),
                  optimizer: OptimizerConfig = OptimizerConfig(), log_path=None) -> TrainResult:
    """MLM pretraining from a seeded random init."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if config.vocab_size != len(vocab):
        raise ValueError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
    model = init_random(config, derive_seed(seed, 10))
    batches = batch_stream(corpus, vocab, data.batch_size, data.n_max, derive_seed(seed, 20),
                           config.max_positions, data.mask_rate)
    loss_log = LossLog(log_path)
    last = _run(model, batches, steps, optimizer, MLM_ONLY, None, loss_log)
    meta = _meta("train_teacher", seed, steps, loss_log, data, optimizer, None)
    return TrainResult(model, loss_log.records, last, meta)


def distill(teacher: EncoderModel | Checkpoint | str | Path, student_config: ModelConfig,
            corpus: Sequence[str], vocab: Vocabulary, steps: int,
            distill_config: DistillConfig = DistillConfig(), seed: int = 0,
            data: DataConfig = DataConfig(), optimizer: OptimizerConfig = OptimizerConfig(),
            log_path=None, student_init: str = "copy") -> TrainResult:
    """Train a student against a frozen teacher on the blended objective.

    ``student_init="random"`` replaces layer copying by a seeded random
    init (the no-distillation control when combined with MLM-only weights).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(teacher, (str, Path)):
        teacher = load_checkpoint(teacher)
    if isinstance(teacher, Checkpoint):
        teacher = teacher.model
    teacher.requires_grad_(False)
    if student_init == "copy":
        student = init_student(teacher, student_config, distill_config.copy_stride)
    elif student_init == "random":
        init_student(teacher, student_config, distill_config.copy_stride)  # compatibility check
        student = init_random(student_config, derive_seed(seed, 11))
    else:
        raise ValueError(f"unknown student_init {student_init!r}")
    batches = batch_stream(corpus, vocab, data.batch_size, data.n_max, derive_seed(seed, 21),
                           student_config.max_positions, data.mask_rate)
    loss_log = LossLog(log_path)
    last = _run(student, batches, steps, optimizer, distill_config, teacher, loss_log)
    meta = _meta("distill", seed, steps, loss_log, data, optimizer, distill_config)
    meta["student_init"] = student_init
    return TrainResult(student, loss_log.records, last, meta)


def _meta(kind, seed, steps, loss_log, data, optimizer, dcfg) -> dict:
    meta = {
        "kind": kind, "seed": seed, "step": steps,
        "loss_tail": [[r.step, r.soft_label, r.cosine, r.mlm, r.total] for r in loss_log.records[-10:]],
        "data": asdict(data), "optimizer": asdict(optimizer),
    }
    if dcfg is not None:
        meta["distill"] = asdict(dcfg)
    return meta


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Means over consecutive non-overlapping windows (a trailing partial window is dropped)."""
    values = np.asarray(values, dtype=np.float64)
    k = len(values) // window
    return values[: k * window].reshape(k, window).mean(axis=1)
