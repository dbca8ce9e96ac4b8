"""Post-LN Transformer encoder with learned positions and a tied MLM head.

Hidden states use the column convention: ``H`` is ``[d_h, n]`` for one
sequence or ``[B, d_h, n]`` for a padded batch. Each layer computes::

    H <- LN(H + MultiHead(H))
    H <- LN(H + FF(H))

and the MLM head is ``log_softmax(word_embedding @ H + lm_head_bias)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import make_rng

INIT_RANGE = 0.02


class ConfigError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class LengthError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    ff_size: int
    vocab_size: int
    max_positions: int
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for f in ("hidden_size", "num_heads", "ff_size", "vocab_size", "max_positions"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    def replace(self, **changes) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ModelConfig(**values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        required = known - {"layer_norm_eps"}
        missing = sorted(required - set(d))
        if missing:
            raise ConfigError(f"missing model field: {missing[0]}")
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model field: {unknown[0]}")
        kwargs = {}
        for name in known & set(d):
            value = d[name]
            if name == "layer_norm_eps":
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"model field {name} must be a number")
                kwargs[name] = float(value)
            else:
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"model field {name} must be an integer")
                kwargs[name] = value
        return cls(**kwargs)


# Base-size CamemBERT and its 6-layer distilled student.
CAMEMBERT_BASE = ModelConfig(num_layers=12, hidden_size=768, num_heads=12, ff_size=3072,
                             vocab_size=32005, max_positions=514)
DISTILCAMEMBERT_BASE = CAMEMBERT_BASE.replace(num_layers=6)


def param_count(config: ModelConfig) -> int:
    """Trainable scalars of embeddings, layers and norms (no pooler, no LM-head bias)."""
    L, d, E = config.num_layers, config.hidden_size, config.ff_size
    return L * (4 * d * d + 2 * d * E + 9 * d + E) + d * (config.vocab_size + config.max_positions + 2)


LAYER_FIELDS = (
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_out", "b_out",
    "attn_norm_gain", "attn_norm_bias",
    "w_feed", "b_feed", "w_forward", "b_forward",
    "ff_norm_gain", "ff_norm_bias",
)


@dataclass
class LayerWeights:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor
    attn_norm_gain: Tensor
    attn_norm_bias: Tensor
    w_feed: Tensor
    b_feed: Tensor
    w_forward: Tensor
    b_forward: Tensor
    ff_norm_gain: Tensor
    ff_norm_bias: Tensor


def layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, E = config.hidden_size, config.ff_size
    return {
        "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
        "w_v": (d, d), "b_v": (d,), "w_out": (d, d), "b_out": (d,),
        "attn_norm_gain": (d,), "attn_norm_bias": (d,),
        "w_feed": (E, d), "b_feed": (E,), "w_forward": (d, E), "b_forward": (d,),
        "ff_norm_gain": (d,), "ff_norm_bias": (d,),
    }


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in storage/initialization order."""
    d = config.hidden_size
    shapes = {
        "word_embedding": (config.vocab_size, d),
        "positional_embedding": (config.max_positions, d),
        "embedding_norm_gain": (d,),
        "embedding_norm_bias": (d,),
    }
    for i in range(config.num_layers):
        for name, shape in layer_shapes(config).items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["lm_head_bias"] = (config.vocab_size,)
    return shapes


@dataclass
class EncoderModel:
    config: ModelConfig
    word_embedding: Tensor
    positional_embedding: Tensor
    embedding_norm_gain: Tensor
    embedding_norm_bias: Tensor
    layers: list[LayerWeights] = field(default_factory=list)
    lm_head_bias: Tensor | None = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "word_embedding", self.word_embedding
        yield "positional_embedding", self.positional_embedding
        yield "embedding_norm_gain", self.embedding_norm_gain
        yield "embedding_norm_bias", self.embedding_norm_bias
        for i, layer in enumerate(self.layers):
            for name in LAYER_FIELDS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "lm_head_bias", self.lm_head_bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def requires_grad_(self, flag: bool) -> "EncoderModel":
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    @classmethod
    def from_state_dict(cls, config: ModelConfig, state: dict[str, np.ndarray],
                        copy: bool = True) -> "EncoderModel":
        shapes = parameter_shapes(config)
        if set(state) != set(shapes):
            missing = sorted(set(shapes) - set(state))
            extra = sorted(set(state) - set(shapes))
            raise ConfigError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        tensors = {}
        for name, shape in shapes.items():
            arr = np.array(state[name], dtype=np.float32, copy=copy or None)
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            tensors[name] = ad.parameter(arr, name=name)
        layers = [
            LayerWeights(**{f: tensors[f"layers.{i}.{f}"] for f in LAYER_FIELDS})
            for i in range(config.num_layers)
        ]
        return cls(config, tensors["word_embedding"], tensors["positional_embedding"],
                   tensors["embedding_norm_gain"], tensors["embedding_norm_bias"],
                   layers, tensors["lm_head_bias"])

    def clone(self) -> "EncoderModel":
        return EncoderModel.from_state_dict(self.config, {k: v.copy() for k, v in self.state_dict().items()})


def audit_param_count(model: EncoderModel) -> dict[str, int]:
    """Count stored scalars; the LM-head bias is reported apart from the formula total."""
    counted = 0
    for name, t in model.named_parameters():
        if name != "lm_head_bias":
            counted += t.size
    return {"counted": counted, "lm_head_extra": model.lm_head_bias.size,
            "total_stored": counted + model.lm_head_bias.size}


def init_zeros(config: ModelConfig) -> EncoderModel:
    """All-zero model (uniform MLM output); cheap even at full base size."""
    state = {name: np.zeros(shape, dtype=np.float32) for name, shape in parameter_shapes(config).items()}
    return EncoderModel.from_state_dict(config, state, copy=False)


def init_random(config: ModelConfig, seed: int) -> EncoderModel:
    """Weights ~ U(-0.02, 0.02) drawn from PCG64(seed) in canonical order; norms 1/0, biases 0."""
    rng = make_rng(seed)
    state = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm_gain"):
            state[name] = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            state[name] = np.zeros(shape, dtype=np.float32)
        else:
            state[name] = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(np.float32)
    return EncoderModel.from_state_dict(config, state)


@dataclass
class EncoderOutput:
    hidden: Tensor
    log_probs: Tensor
    valid: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


def _as_batch(H: Tensor) -> tuple[Tensor, bool]:
    if H.ndim == 2:
        return ad.reshape(H, (1,) + H.shape), True
    return H, False


def head_attention(model: EncoderModel, H: Tensor, layer: int, head: int,
                   key_mask: np.ndarray | None = None) -> Tensor:
    """One attention head: ``V softmax(Q^T K / sqrt(d_h/J))^T`` for head ``head`` of ``layer``."""
    cfg = model.config
    if H.shape[-1] == 0:
        raise EmptyInputError("attention over an empty sequence")
    if H.shape[-1] > cfg.max_positions:
        raise LengthError(f"sequence length {H.shape[-1]} exceeds {cfg.max_positions}")
    w = model.layers[layer]
    lo, hi = head * cfg.head_size, (head + 1) * cfg.head_size

    def project(weight, bias):
        return ad.add_bias(ad.matmul(ad.slice_rows(weight, lo, hi), H), ad.slice_vector(bias, lo, hi))

    q, k, v = project(w.w_q, w.b_q), project(w.w_k, w.b_k), project(w.w_v, w.b_v)
    scores = ad.scale(ad.matmul(ad.transpose(k), q), 1.0 / math.sqrt(cfg.head_size))
    mask = None if key_mask is None else _key_mask(key_mask)
    return ad.matmul(v, ad.softmax_columns(scores, mask=mask))


def _key_mask(key_mask: np.ndarray) -> np.ndarray:
    key_mask = np.asarray(key_mask, dtype=bool)
    # [.., n_keys] -> [.., n_keys, 1], broadcast over query columns
    return key_mask[..., :, None]


def attention_weights(model: EncoderModel, H: Tensor, layer: int,
                      key_mask: np.ndarray | None = None) -> np.ndarray:
    """Post-softmax weights ``[B, J, n_keys, n_queries]`` of ``layer`` (no tape)."""
    cfg = model.config
    Hb, _ = _as_batch(H)
    B, d, n = Hb.shape
    w = model.layers[layer]
    q = ad.reshape(ad.add_bias(ad.matmul(w.w_q, Hb), w.b_q), (B * cfg.num_heads, cfg.head_size, n))
    k = ad.reshape(ad.add_bias(ad.matmul(w.w_k, Hb), w.b_k), (B * cfg.num_heads, cfg.head_size, n))
    scores = ad.scale(ad.matmul(ad.transpose(k), q), 1.0 / math.sqrt(cfg.head_size))
    mask = None
    if key_mask is not None:
        km = np.repeat(np.asarray(key_mask, dtype=bool).reshape(B, n), cfg.num_heads, axis=0)
        mask = km[:, :, None]
    a = ad.softmax_columns(scores, mask=mask)
    return a.data.reshape(B, cfg.num_heads, n, n)


def multi_head(model: EncoderModel, H: Tensor, layer: int,
               key_mask: np.ndarray | None = None) -> Tensor:
    """All heads of ``layer`` concatenated row-wise, then ``W_out`` and its bias."""
    cfg = model.config
    if H.shape[-1] == 0:
        raise EmptyInputError("attention over an empty sequence")
    Hb, single = _as_batch(H)
    B, d, n = Hb.shape
    J, dk = cfg.num_heads, cfg.head_size
    w = model.layers[layer]
    # row block j of each fused projection is head j, so a reshape splits heads
    q = ad.reshape(ad.add_bias(ad.matmul(w.w_q, Hb), w.b_q), (B * J, dk, n))
    k = ad.reshape(ad.add_bias(ad.matmul(w.w_k, Hb), w.b_k), (B * J, dk, n))
    v = ad.reshape(ad.add_bias(ad.matmul(w.w_v, Hb), w.b_v), (B * J, dk, n))
    scores = ad.scale(ad.matmul(ad.transpose(k), q), 1.0 / math.sqrt(dk))
    mask = None
    if key_mask is not None:
        km = np.repeat(np.asarray(key_mask, dtype=bool).reshape(B, n), J, axis=0)
        mask = km[:, :, None]
    heads = ad.matmul(v, ad.softmax_columns(scores, mask=mask))
    out = ad.add_bias(ad.matmul(w.w_out, ad.reshape(heads, (B, d, n))), w.b_out)
    return ad.reshape(out, (d, n)) if single else out


def feed_forward(model: EncoderModel, H: Tensor, layer: int) -> Tensor:
    w = model.layers[layer]
    inner = ad.relu(ad.add_bias(ad.matmul(w.w_feed, H), w.b_feed))
    return ad.add_bias(ad.matmul(w.w_forward, inner), w.b_forward)


def transformer_layer(model: EncoderModel, H: Tensor, layer: int,
                      key_mask: np.ndarray | None = None) -> Tensor:
    w = model.layers[layer]
    eps = model.config.layer_norm_eps
    H = ad.layer_norm(ad.add(H, multi_head(model, H, layer, key_mask)),
                      w.attn_norm_gain, w.attn_norm_bias, eps)
    return ad.layer_norm(ad.add(H, feed_forward(model, H, layer)),
                         w.ff_norm_gain, w.ff_norm_bias, eps)


def embed(model: EncoderModel, ids: np.ndarray) -> Tensor:
    """``H_0``: normalized sum of word and positional embeddings."""
    n = ids.shape[-1]
    positions = np.broadcast_to(np.arange(n), ids.shape)
    H = ad.add(ad.embedding_lookup(model.word_embedding, ids),
               ad.embedding_lookup(model.positional_embedding, positions))
    return ad.layer_norm(H, model.embedding_norm_gain, model.embedding_norm_bias,
                         model.config.layer_norm_eps)


def check_ids(config: ModelConfig, ids: np.ndarray) -> None:
    if ids.shape[-1] == 0:
        raise EmptyInputError("empty token sequence")
    if ids.shape[-1] > config.max_positions:
        raise LengthError(f"sequence length {ids.shape[-1]} exceeds max_positions {config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        bad = ids[(ids < 0) | (ids >= config.vocab_size)].flat[0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {config.vocab_size}")


def encode(model: EncoderModel, token_ids, valid=None) -> EncoderOutput:
    """Run the encoder on ``[n]`` ids or a padded ``[B, n]`` batch.

    ``valid`` marks real (non-padding) positions; padded positions are
    excluded as attention keys and their outputs are meaningless.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim not in (1, 2):
        raise ValueError(f"token_ids must be 1-D or 2-D, got shape {ids.shape}")
    check_ids(model.config, ids)
    valid = np.ones(ids.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != ids.shape:
        raise ValueError(f"valid mask {valid.shape} does not match ids {ids.shape}")
    key_mask = None if valid.all() else valid
    H = embed(model, ids)
    for layer in range(model.config.num_layers):
        H = transformer_layer(model, H, layer, key_mask)
    logits = ad.add_bias(ad.matmul(model.word_embedding, H), model.lm_head_bias)
    return EncoderOutput(hidden=H, log_probs=ad.log_softmax_columns(logits), valid=valid)
