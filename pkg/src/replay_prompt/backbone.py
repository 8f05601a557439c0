"""Frozen toy multimodal encoder: one pre-norm transformer stack per modality,
mean-pool late fusion and a linear classification head."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffGraph, Tensor
from .optim import Adam
from .rng import substream

logger = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    n_modalities: int = 2
    d_model: int = 32
    n_layers: int = 8
    n_heads: int = 4
    seq_len: int = 8
    n_classes: int = 4
    feature_widths: tuple = ()
    ff_width: int = 256

    def __post_init__(self):
        if not self.feature_widths:
            self.feature_widths = (16,) * self.n_modalities
        self.feature_widths = tuple(int(w) for w in self.feature_widths)

    def validate(self) -> None:
        if self.n_modalities not in (2, 3):
            raise ValueError(f"n_modalities must be 2 or 3, got {self.n_modalities}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if len(self.feature_widths) != self.n_modalities:
            raise ValueError("feature_widths needs one entry per modality")
        for name in ("d_model", "n_layers", "seq_len", "n_classes", "ff_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_widths"] = list(self.feature_widths)
        return d


def _layer_names(m: int, k: int) -> list[str]:
    p = f"m{m}.l{k}."
    return [p + n for n in (
        "ln1.g", "ln1.b", "attn.wqkv", "attn.bqkv", "attn.wo", "attn.bo",
        "ln2.g", "ln2.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2")]


@dataclass
class BackboneWeights:
    config: BackboneConfig
    params: dict
    frozen: bool = False
    eval_record: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: BackboneConfig, rng: np.random.Generator,
             dtype=np.float64) -> "BackboneWeights":
        config.validate()
        D, F = config.d_model, config.ff_width
        p: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out):
            p[name] = rng.normal(scale=1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

        for m in range(config.n_modalities):
            dense(f"m{m}.embed.w", config.feature_widths[m], D)
            p[f"m{m}.embed.b"] = np.zeros(D)
            p[f"m{m}.pos"] = 0.1 * rng.normal(size=(config.seq_len, D))
            for k in range(config.n_layers):
                pre = f"m{m}.l{k}."
                p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(D), np.zeros(D)
                dense(pre + "attn.wqkv", D, 3 * D)
                p[pre + "attn.wqkv"] *= math.sqrt(3.0)  # fan-in is D, not 3D
                p[pre + "attn.bqkv"] = np.zeros(3 * D)
                dense(pre + "attn.wo", D, D)
                p[pre + "attn.bo"] = np.zeros(D)
                # residual branches start small so the deep stack trains stably
                p[pre + "attn.wo"] *= 1.0 / math.sqrt(2 * config.n_layers)
                p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(D), np.zeros(D)
                dense(pre + "ff.w1", D, F)
                p[pre + "ff.b1"] = np.zeros(F)
                dense(pre + "ff.w2", F, D)
                p[pre + "ff.w2"] *= 1.0 / math.sqrt(2 * config.n_layers)
                p[pre + "ff.b2"] = np.zeros(D)
            p[f"m{m}.final_ln.g"], p[f"m{m}.final_ln.b"] = np.ones(D), np.zeros(D)
        dense("head.w", config.n_modalities * D, config.n_classes)
        p["head.b"] = np.zeros(config.n_classes)
        return cls(config, {k: v.astype(dtype) for k, v in p.items()})

    def tensors(self, requires_grad: bool = False) -> dict:
        if requires_grad and self.frozen:
            raise RuntimeError("backbone is frozen")
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def astype(self, dtype) -> "BackboneWeights":
        return BackboneWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                               self.frozen, dict(self.eval_record))

    def copy(self) -> "BackboneWeights":
        return self.astype(next(iter(self.params.values())).dtype)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def embed_modality(params: Mapping[str, Tensor], config: BackboneConfig,
                   raw: np.ndarray, modality: int) -> Tensor:
    """Token embeddings ``(B, seq_len, d_model)`` for raw features ``(B, seq_len, width)``.

    A single sample ``(seq_len, width)`` gives ``(seq_len, d_model)``.
    """
    if not 0 <= modality < config.n_modalities:
        raise IndexError(f"unknown modality index {modality}")
    raw = np.asarray(raw)
    single = raw.ndim == 2
    if single:
        raw = raw[None]
    expected = (config.seq_len, config.feature_widths[modality])
    if raw.shape[1:] != expected:
        raise ad.ShapeError("embed_modality", [raw.shape], f"expected (..., {expected})")
    x = Tensor(raw.astype(params[f"m{modality}.embed.w"].dtype, copy=False))
    h = ad.add_bias(ad.matmul(x, params[f"m{modality}.embed.w"]), params[f"m{modality}.embed.b"])
    h = ad.add_bias(h, params[f"m{modality}.pos"])
    if single:
        h = ad.reshape(h, h.shape[1:])
    return h


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def encoder_layer_forward(params: Mapping[str, Tensor], config: BackboneConfig,
                          state: Tensor, layer: int, modality: int) -> Tensor:
    """One pre-norm block: ``x + MHA(LN(x))`` then ``x + FF(LN(x))``."""
    if not 0 <= layer < config.n_layers:
        raise IndexError(f"layer {layer} out of range [0, {config.n_layers})")
    if state.shape[-1] != config.d_model:
        raise ad.ShapeError("encoder_layer_forward", [state.shape], f"width != {config.d_model}")
    pre = f"m{modality}.l{layer}."
    P = lambda n: params[pre + n]  # noqa: E731
    B, T, D = state.shape
    H = config.n_heads
    dh = D // H

    h = ad.layer_norm(state, P("ln1.g"), P("ln1.b"))

    qkv = ad.reshape(_linear(h, P("attn.wqkv"), P("attn.bqkv")), (B, T, 3, H, dh))
    qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
    q, k, v = (ad.select(qkv, i) for i in range(3))
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    x = ad.add(state, _linear(ctx, P("attn.wo"), P("attn.bo")))

    h2 = ad.layer_norm(x, P("ln2.g"), P("ln2.b"))
    ff = _linear(ad.gelu(_linear(h2, P("ff.w1"), P("ff.b1"))), P("ff.w2"), P("ff.b2"))
    return ad.add(x, ff)


def final_norm(params: Mapping[str, Tensor], state: Tensor, modality: int) -> Tensor:
    return ad.layer_norm(state, params[f"m{modality}.final_ln.g"], params[f"m{modality}.final_ln.b"])


def fuse_and_classify(head: Mapping[str, Tensor], config: BackboneConfig,
                      final_states: Sequence[Tensor]) -> Tensor:
    """Mean-pool tokens per modality, concatenate, apply the linear head."""
    if len(final_states) != config.n_modalities:
        raise ValueError(f"expected {config.n_modalities} modality states, got {len(final_states)}")
    pooled = [ad.mean(s, axis=-2) for s in final_states]
    z = ad.concat(pooled, axis=-1)
    return _linear(z, head["head.w"], head["head.b"])


def encode_modality(params, config, raw, modality) -> Tensor:
    x = embed_modality(params, config, raw, modality)
    for k in range(config.n_layers):
        x = encoder_layer_forward(params, config, x, k, modality)
    return final_norm(params, x, modality)


def forward(params: Mapping[str, Tensor], config: BackboneConfig,
            inputs: Sequence[np.ndarray]) -> Tensor:
    """Plain backbone logits (no prompts) for a batch of per-modality inputs."""
    states = [encode_modality(params, config, inputs[m], m) for m in range(config.n_modalities)]
    return fuse_and_classify(params, config, states)


def predict_logits(weights: BackboneWeights, inputs: Sequence[np.ndarray],
                   batch_size: int = 256) -> np.ndarray:
    params = weights.tensors()
    n = len(inputs[0])
    out = [forward(params, weights.config, [x[i:i + batch_size] for x in inputs]).data
           for i in range(0, n, batch_size)]
    return np.concatenate(out, axis=0)


class ConvergenceError(RuntimeError):
    def __init__(self, accuracy: float, threshold: float, history: list):
        self.accuracy = accuracy
        self.threshold = threshold
        self.history = history
        super().__init__(
            f"backbone pretraining did not converge: held-out accuracy {accuracy:.4f} "
            f"< required {threshold:.2f}")


@dataclass
class PretrainConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 2e-3
    min_accuracy: float = 0.90
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_backbone(config: BackboneConfig, train, val, pretrain: PretrainConfig,
                      seed: int, check: bool = True) -> BackboneWeights:
    """Train every backbone parameter on complete-modality data.

    Raises :class:`ConvergenceError` when held-out accuracy stays below
    ``pretrain.min_accuracy`` and ``check`` is set.
    """
    config.validate()
    weights = BackboneWeights.init(config, substream(seed, "pretrain", 0))
    opt = Adam(lr=pretrain.lr)
    order_rng = substream(seed, "shuffle")
    history = []
    n = len(train)
    for epoch in range(pretrain.epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for i in range(0, n, pretrain.batch_size):
            idx = perm[i:i + pretrain.batch_size]
            params = weights.tensors(requires_grad=True)
            with DiffGraph() as g:
                logits = forward(params, config, [f[idx] for f in train.features])
                loss = ad.cross_entropy(logits, train.labels[idx])
            grads = ad.backward(g, loss)
            opt.step(weights.params, {k: grads[t] for k, t in params.items() if t in grads})
            total += loss.item() * len(idx)
        acc = float((predict_logits(weights, val.features).argmax(1) == val.labels).mean())
        history.append({"epoch": epoch, "loss": total / n, "val_accuracy": acc})
        logger.info("pretrain epoch %d loss %.4f val acc %.4f", epoch, total / n, acc)
    weights.eval_record = {"val_accuracy": history[-1]["val_accuracy"], "history": history}
    if check and history[-1]["val_accuracy"] < pretrain.min_accuracy:
        raise ConvergenceError(history[-1]["val_accuracy"], pretrain.min_accuracy, history)
    weights.frozen = True
    return weights
