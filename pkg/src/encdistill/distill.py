"""Student construction and the three-part distillation objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MaskedBatch
from .encoder import ConfigError, EncoderModel, EncoderOutput, ModelConfig, LAYER_FIELDS

KL_STUDENT_TEACHER = "student_teacher"   # D_KL(p_s || p_t), as the objective is written
KL_TEACHER_STUDENT = "teacher_student"
COSINE_ONE_MINUS = "one_minus"           # minimize 1 - cos
COSINE_RAW = "raw"                       # the raw similarity summed into the loss


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    copy_stride: int = 2
    kl_direction: str = KL_STUDENT_TEACHER
    temperature: float = 1.0
    cosine_mode: str = COSINE_ONE_MINUS

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.copy_stride < 1:
            raise ConfigError("copy_stride must be >= 1")
        if self.kl_direction not in (KL_STUDENT_TEACHER, KL_TEACHER_STUDENT):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if self.cosine_mode not in (COSINE_ONE_MINUS, COSINE_RAW):
            raise ConfigError(f"unknown cosine_mode {self.cosine_mode!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass
class LossBreakdown:
    soft_label: float
    cosine: float
    mlm: float
    total: float
    token_count: int
    masked_count: int
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)


def student_layer_sources(teacher_layers: int, student_layers: int, stride: int = 2) -> list[int]:
    """Teacher layer (0-based) copied into each student layer."""
    if student_layers < 0 or stride < 1 or stride * student_layers > teacher_layers:
        raise ConfigError(
            f"cannot pick {student_layers} layers with stride {stride} from {teacher_layers}")
    return [stride * i for i in range(student_layers)]


def init_student(teacher: EncoderModel, student_config: ModelConfig,
                 copy_stride: int = 2) -> EncoderModel:
    """Copy embeddings, embedding norm, LM-head bias and every ``copy_stride``-th teacher layer."""
    tc = teacher.config
    for name in ("hidden_size", "num_heads", "ff_size", "vocab_size", "max_positions"):
        if getattr(tc, name) != getattr(student_config, name):
            raise ConfigError(
                f"student {name}={getattr(student_config, name)} differs from teacher {getattr(tc, name)}")
    if student_config.num_layers > tc.num_layers:
        raise ConfigError("student cannot have more layers than the teacher")
    sources = student_layer_sources(tc.num_layers, student_config.num_layers, copy_stride)
    teacher_state = teacher.state_dict()
    state = {}
    for name in ("word_embedding", "positional_embedding", "embedding_norm_gain",
                 "embedding_norm_bias", "lm_head_bias"):
        state[name] = teacher_state[name].copy()
    for i, src in enumerate(sources):
        for f in LAYER_FIELDS:
            state[f"layers.{i}.{f}"] = teacher_state[f"layers.{src}.{f}"].copy()
    return EncoderModel.from_state_dict(student_config, state)


def _valid_mask(lengths, shape: tuple[int, ...]) -> np.ndarray:
    """Token-validity mask over the columns of a ``[.., rows, n]`` tensor."""
    cols = shape[:-2] + shape[-1:]
    if lengths is None:
        return np.ones(cols, dtype=bool)
    lengths = np.asarray(lengths)
    if lengths.dtype == bool:
        if lengths.shape != cols:
            raise ValueError(f"validity mask {lengths.shape} vs columns {cols}")
        return lengths
    lengths = np.atleast_1d(lengths).astype(np.int64)
    if len(cols) == 1:
        if lengths.shape != (1,):
            raise ValueError("a single sequence takes one length")
        valid = np.arange(cols[0]) < lengths[0]
    else:
        if lengths.shape != (cols[0],):
            raise ValueError(f"{lengths.shape[0]} lengths for a batch of {cols[0]}")
        valid = np.arange(cols[1])[None, :] < lengths[:, None]
    if np.any(lengths < 1) or np.any(lengths > cols[-1]):
        raise ValueError("sequence length out of range")
    return valid


def soft_label_loss(student_logprobs: Tensor, teacher_logprobs: Tensor, lengths=None,
                    direction: str = KL_STUDENT_TEACHER, temperature: float = 1.0) -> Tensor:
    """Mean per-token KL divergence between student and teacher vocabulary distributions.

    ``lengths`` is either per-sequence lengths or a boolean validity mask.
    """
    if student_logprobs.shape != teacher_logprobs.shape:
        raise ValueError(f"student {student_logprobs.shape} vs teacher {teacher_logprobs.shape}")
    valid = _valid_mask(lengths, student_logprobs.shape)
    s = student_logprobs
    t = ad.detach(teacher_logprobs)
    if temperature != 1.0:
        s = ad.log_softmax_columns(ad.scale(s, 1.0 / temperature))
        t = ad.log_softmax_columns(ad.scale(t, 1.0 / temperature))
    per_token = ad.kl_div_log(s, t) if direction == KL_STUDENT_TEACHER else ad.kl_div_log(t, s)
    return ad.masked_mean(per_token, valid)


def cosine_loss(student_hidden: Tensor, teacher_hidden: Tensor, lengths=None,
                mode: str = COSINE_ONE_MINUS) -> Tensor:
    """Mean over tokens of ``1 - cos(h_s, h_t)`` (or of the raw cosine in ``raw`` mode)."""
    if student_hidden.shape != teacher_hidden.shape:
        raise ValueError(f"student {student_hidden.shape} vs teacher {teacher_hidden.shape}")
    valid = _valid_mask(lengths, student_hidden.shape)
    cos = ad.masked_mean(ad.cosine_sim(student_hidden, ad.detach(teacher_hidden)), valid)
    if mode == COSINE_RAW:
        return cos
    return ad.add_scalar(ad.scale(cos, -1.0), 1.0)


def mlm_loss(student_logprobs: Tensor, batch: MaskedBatch) -> Tensor:
    """Mean negative log-probability of the original ids at masked positions."""
    if batch.empty:
        raise EmptyMaskError("batch has no masked positions")
    labels = np.where(batch.mask, batch.labels, 0)
    if student_logprobs.ndim == 2:
        return ad.cross_entropy(labels[0], student_logprobs, batch.mask[0])
    return ad.cross_entropy(labels, student_logprobs, batch.mask)


def distill_loss(student_out: EncoderOutput, teacher_out: EncoderOutput | None,
                 batch: MaskedBatch, config: DistillConfig = DistillConfig()) -> LossBreakdown:
    """Weighted blend ``alpha*soft_label + beta*cosine + gamma*mlm``.

    With ``teacher_out=None`` only the MLM term is evaluated, which requires
    ``alpha == beta == 0``.
    """
    terms, weights = [], []
    soft = cos = 0.0
    if teacher_out is not None:
        valid = batch.valid
        soft_t = soft_label_loss(student_out.log_probs, teacher_out.log_probs, valid,
                                 config.kl_direction, config.temperature)
        cos_t = cosine_loss(student_out.hidden, teacher_out.hidden, valid, config.cosine_mode)
        terms += [soft_t, cos_t]
        weights += [config.alpha, config.beta]
        soft, cos = soft_t.item(), cos_t.item()
    elif config.alpha or config.beta:
        raise ValueError("teacher outputs are required when alpha or beta is non-zero")
    mlm_t = mlm_loss(student_out.log_probs, batch)
    terms.append(mlm_t)
    weights.append(config.gamma)
    total = ad.stack_scalars(terms, weights)
    return LossBreakdown(soft, cos, mlm_t.item(), total.item(), batch.token_count,
                         batch.masked_count, total)
