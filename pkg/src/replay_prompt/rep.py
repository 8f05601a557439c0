"""Replay prompting: private/shared feature buffers over a frozen backbone.

Layer 0 sees ``[Theta_m(F_s), F_p^m, E_m]`` concatenated along the token axis.
After each layer ``k`` in ``1..d`` the private buffer of every modality is
refreshed from that layer's private-block hidden states through a gated
residual bypass, the shared buffer is refreshed from all private buffers, and
the buffers from layer ``k-1`` are added onto the prompt blocks of the input
to layer ``k``.  Layers past ``d`` run untouched.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Tensor

logger = logging.getLogger(__name__)

NOISE_TYPES = ("gaussian", "uniform", "laplace")


@dataclass
class RepConfig:
    buffer_width: int = 36
    replay_depth: int = 6
    noise_intensity: float = 0.2
    noise_type: str = "gaussian"
    ortho_weight: float = 0.1
    ortho_all_layers: bool = False
    # module toggles, each adds one mechanism on top of the previous
    dynamic_init: bool = True
    dual_buffers: bool = True
    replay: bool = True
    learnable_projection: bool = True
    g_hidden: int = 8
    static_init_std: float = 0.02
    beta_init: float = 0.1
    compose_buffers: bool = True
    # G_m -> identity and H -> mean over modalities; for recurrence oracles
    identity_maps: bool = False

    def validate(self, n_layers: int | None = None) -> None:
        if self.buffer_width < 1:
            raise ValueError(f"buffer_width must be >= 1, got {self.buffer_width}")
        if self.replay_depth < 1:
            raise ValueError(f"replay_depth must be >= 1, got {self.replay_depth}")
        if n_layers is not None and self.replay_depth > n_layers - 1:
            raise ValueError(
                f"replay_depth {self.replay_depth} needs at least {self.replay_depth + 1} "
                f"backbone layers, backbone has {n_layers}")
        if self.noise_intensity < 0:
            raise ValueError(f"noise_intensity must be >= 0, got {self.noise_intensity}")
        if self.noise_type not in NOISE_TYPES:
            raise ValueError(f"noise_type must be one of {NOISE_TYPES}, got {self.noise_type!r}")
        if self.ortho_weight < 0:
            raise ValueError("ortho_weight must be >= 0")
        if self.g_hidden < 1:
            raise ValueError("g_hidden must be >= 1")

    @property
    def uses_recurrence(self) -> bool:
        return self.compose_buffers and (
            self.replay or (self.dual_buffers and self.ortho_weight > 0))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# initialization


def _unit_noise(noise_type: str, rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. zero-mean, unit-variance noise."""
    if noise_type == "gaussian":
        return rng.standard_normal(shape)
    if noise_type == "uniform":
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=shape)
    if noise_type == "laplace":
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), size=shape)
    raise ValueError(f"unknown noise_type {noise_type!r}")


def init_private_buffer(summary: np.ndarray, noise_intensity: float, noise_type: str,
                        rng: np.random.Generator) -> np.ndarray:
    """Pretrained embedding seed plus ``noise_intensity`` times unit-variance noise."""
    if noise_intensity < 0:
        raise ValueError(f"noise_intensity must be >= 0, got {noise_intensity}")
    summary = np.asarray(summary, dtype=np.float64)
    if noise_intensity == 0:
        return summary.copy()
    return summary + noise_intensity * _unit_noise(noise_type, rng, summary.shape)


def init_shared_buffer(width: int, d_model: int, rng: np.random.Generator) -> np.ndarray:
    """A standard Gaussian draw scaled onto the unit hypersphere."""
    if width < 1 or d_model < 1:
        raise ValueError("buffer dimensions must be positive")
    while True:
        xi = rng.standard_normal((width, d_model))
        norm = np.linalg.norm(xi)
        if norm > 0:
            return xi / norm


def embedding_summary(weights: bb.BackboneWeights, calibration: Sequence[np.ndarray],
                      modality: int, width: int) -> np.ndarray:
    """Mean layer-0 content embedding per token position, cycled to ``width`` rows."""
    params = weights.tensors()
    emb = bb.embed_modality(params, weights.config, calibration[modality], modality).data
    per_pos = emb.reshape(-1, emb.shape[-2], emb.shape[-1]).mean(axis=0)
    rows = np.arange(width) % per_pos.shape[0]
    return per_pos[rows].astype(np.float64)


# ---------------------------------------------------------------------------
# state


@dataclass
class RepState:
    """Every learnable REP tensor, plus the tuned copy of the classifier head.

    Names: ``private.{m}``, ``shared``, ``theta.{m}``, ``g.{m}.{w1,b1,w2,b2}``,
    ``h.{w,b}``, ``alpha.{m}``, ``eps_s``, ``beta_p``, ``beta_s``, ``head.{w,b}``.
    Gates are stored as logits; ``alpha = sigmoid(logit)``.
    """

    config: RepConfig
    n_modalities: int
    d_model: int
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: RepConfig, weights: bb.BackboneWeights,
             calibration: Sequence[np.ndarray] | None, rng: np.random.Generator,
             noise_rng: np.random.Generator | None = None, dtype=np.float64) -> "RepState":
        """``rng`` draws weights; ``noise_rng`` (default ``rng``) draws buffer inits."""
        bcfg = weights.config
        config.validate(bcfg.n_layers)
        K, D, l = bcfg.n_modalities, bcfg.d_model, config.buffer_width
        p: dict[str, np.ndarray] = {}
        if config.compose_buffers:
            # one child stream per buffer: independent draws across modalities
            streams = (rng if noise_rng is None else noise_rng).spawn(K + 1)
            for m in range(K):
                if config.dynamic_init:
                    if calibration is None:
                        raise ValueError("dynamic init needs a calibration batch")
                    seed = embedding_summary(weights, calibration, m, l)
                    p[f"private.{m}"] = init_private_buffer(
                        seed, config.noise_intensity, config.noise_type, streams[m])
                else:
                    p[f"private.{m}"] = config.static_init_std * streams[m].standard_normal((l, D))
            if config.dual_buffers:
                if config.dynamic_init:
                    p["shared"] = init_shared_buffer(l, D, streams[K])
                else:
                    p["shared"] = config.static_init_std * streams[K].standard_normal((l, D))
                for m in range(K):
                    p[f"theta.{m}"] = np.eye(D)
            if config.uses_recurrence and not config.identity_maps:
                wrng = rng
                r = config.g_hidden
                for m in range(K):
                    p[f"g.{m}.w1"] = wrng.normal(scale=1 / math.sqrt(D), size=(D, r))
                    p[f"g.{m}.b1"] = np.zeros(r)
                    p[f"g.{m}.w2"] = wrng.normal(scale=1 / math.sqrt(r), size=(r, D))
                    p[f"g.{m}.b2"] = np.zeros(D)
                if config.dual_buffers:
                    p["h.w"] = wrng.normal(scale=1 / math.sqrt(K * D), size=(K * D, D))
                    p["h.b"] = np.zeros(D)
            if config.uses_recurrence:
                for m in range(K):
                    p[f"alpha.{m}"] = np.zeros(1)
                if config.dual_buffers:
                    p["eps_s"] = np.zeros(1)
            if config.replay:
                p["beta_p"] = np.full(1, config.beta_init)
                if config.dual_buffers:
                    p["beta_s"] = np.full(1, config.beta_init)
        p["head.w"] = np.array(weights.params["head.w"], dtype=np.float64)
        p["head.b"] = np.array(weights.params["head.b"], dtype=np.float64)
        return cls(config, K, D, {k: v.astype(dtype) for k, v in p.items()})

    def trainable_names(self) -> list[str]:
        names = list(self.params)
        if not self.config.learnable_projection:
            names = [n for n in names if not n.startswith("theta.")]
        return names

    def tensors(self, requires_grad: bool = False) -> dict:
        trainable = set(self.trainable_names()) if requires_grad else set()
        return {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.params.items()}

    def n_params(self, include_head: bool = True) -> int:
        return sum(v.size for k, v in self.params.items()
                   if include_head or not k.startswith("head."))

    def gate_values(self) -> dict:
        sig = lambda v: float(0.5 * (1.0 + np.tanh(0.5 * float(v[0]))))  # noqa: E731
        out = {}
        for k, v in self.params.items():
            if k.startswith("alpha.") or k == "eps_s":
                out[k] = sig(v)
            elif k.startswith("beta_"):
                out[k] = float(v[0])
        return out

    def copy(self) -> "RepState":
        return RepState(self.config, self.n_modalities, self.d_model,
                        {k: v.copy() for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# the mechanism


@dataclass(frozen=True)
class BlockLayout:
    """Token ranges ``(start, stop)`` of each block in a composed sequence."""

    shared: tuple | None
    private: tuple | None
    content: tuple

    @property
    def length(self) -> int:
        return self.content[1]


def _as_batch(x: Tensor, like: Tensor) -> Tensor:
    if x.ndim == like.ndim:
        return x
    return ad.expand_batch(x, like.shape[0])


def compose_layer0_input(F_s: Tensor | None, F_p: Tensor | None, E0: Tensor,
                         theta: Tensor | None = None):
    """Concatenate ``[theta(F_s), F_p, E0]`` along the token axis.

    Either buffer may be ``None`` (block omitted).  Returns the sequence and
    its :class:`BlockLayout`.
    """
    D = E0.shape[-1]
    blocks, spans, pos = [], {}, 0
    for name, buf in (("shared", F_s), ("private", F_p)):
        if buf is None:
            spans[name] = None
            continue
        if buf.shape[-1] != D:
            raise ad.ShapeError("compose_layer0_input", [buf.shape, E0.shape], "width mismatch")
        if name == "shared" and theta is not None:
            buf = ad.matmul(buf, theta)
        blocks.append(_as_batch(buf, E0))
        spans[name] = (pos, pos + buf.shape[-2])
        pos += buf.shape[-2]
    layout = BlockLayout(spans["shared"], spans["private"], (pos, pos + E0.shape[-2]))
    if not blocks:
        return E0, layout
    return ad.concat_along_sequence(blocks + [E0]), layout


def extract_layer_features(hidden: Tensor, layout: BlockLayout | None, block: str) -> Tensor:
    """Layer-normalized hidden states at the ``block`` positions."""
    span = None if layout is None else getattr(layout, block, None)
    if span is None:
        raise ValueError(f"no recorded positions for block {block!r}")
    return ad.layer_norm(ad.slice_sequence(hidden, *span))


def _one_minus(gate: Tensor) -> Tensor:
    return ad.sub(Tensor(np.ones(gate.shape, dtype=gate.dtype)), gate)


def update_private_buffer(Z: Tensor, F_prev: Tensor, alpha: Tensor,
                          G: Callable[[Tensor], Tensor]) -> Tensor:
    """``alpha * G(Z) + (1 - alpha) * F_prev``."""
    F_prev = _as_batch(F_prev, Z)
    if Z.shape != F_prev.shape:
        raise ad.ShapeError("update_private_buffer", [Z.shape, F_prev.shape])
    return ad.add(ad.scalar_mul(G(Z), alpha), ad.scalar_mul(F_prev, _one_minus(alpha)))


def update_shared_buffer(F_p_all: Sequence[Tensor], F_s_prev: Tensor, eps_s: Tensor,
                         H: Callable[[Tensor], Tensor], n_modalities: int | None = None) -> Tensor:
    """``eps_s * H(concat_features(F_p_all)) + (1 - eps_s) * F_s_prev``."""
    if n_modalities is not None and len(F_p_all) != n_modalities:
        raise ValueError(f"expected {n_modalities} private buffers, got {len(F_p_all)}")
    cat = ad.concat(list(F_p_all), axis=-1)
    F_s_prev = _as_batch(F_s_prev, cat)
    return ad.add(ad.scalar_mul(H(cat), eps_s), ad.scalar_mul(F_s_prev, _one_minus(eps_s)))


def replay_inject(E: Tensor, layout: BlockLayout | None, F_p_prev: Tensor | None,
                  F_s_prev: Tensor | None, beta_p, beta_s, layer: int, depth: int) -> Tensor:
    """Add ``beta_p * F_p_prev`` / ``beta_s * F_s_prev`` onto the prompt blocks.

    Content tokens are untouched; outside ``1 <= layer <= depth`` the input
    passes through as is.
    """
    if not 1 <= layer <= depth:
        return E
    if layout is None:
        raise ValueError("replay_inject needs the block layout")
    pieces = []
    for span, buf, beta in ((layout.shared, F_s_prev, beta_s),
                            (layout.private, F_p_prev, beta_p)):
        if span is None:
            continue
        block = ad.slice_sequence(E, *span)
        if buf is not None and beta is not None:
            block = ad.add(block, ad.scalar_mul(_as_batch(buf, block), beta))
        pieces.append(block)
    pieces.append(ad.slice_sequence(E, *layout.content))
    return ad.concat_along_sequence(pieces)


def orthogonality_loss(F_s: Tensor | None, F_p_all: Sequence[Tensor],
                       batch_dims: int = 0) -> Tensor:
    """Sum of squared cosine similarities over (shared, private_m) and
    unordered (private_m, private_m') pairs; averaged over batch entries.

    A pair involving an all-zero buffer contributes 0 (with a warning).
    """
    pairs = []
    if F_s is not None:
        pairs += [(F_s, fp) for fp in F_p_all]
    for i in range(len(F_p_all)):
        for j in range(i + 1, len(F_p_all)):
            pairs.append((F_p_all[i], F_p_all[j]))
    total = None
    for a, b in pairs:
        if a.shape != b.shape:
            raise ad.ShapeError("orthogonality_loss", [a.shape, b.shape])
        ip = ad.frobenius_inner_product(a, b, batch_dims)
        den = ad.elementwise_mul(ad.l2_norm(a, batch_dims), ad.l2_norm(b, batch_dims)) \
            if batch_dims else ad.scalar_mul(ad.l2_norm(a), ad.l2_norm(b))
        dead = den.data == 0
        if np.any(dead):
            warnings.warn("orthogonality_loss: zero-norm buffer, pair contributes 0",
                          RuntimeWarning, stacklevel=2)
            den = ad.add(den, Tensor(dead.astype(den.dtype)))
        if batch_dims:
            cos = ad.div(ip, den)
        else:
            cos = ad.div(ad.reshape(ip, (1,)), ad.reshape(den, (1,)))
        term = ad.frobenius_inner_product(cos, cos)
        total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(0.0)
    n = int(np.prod(F_p_all[0].shape[:batch_dims])) if batch_dims else 1
    return ad.scalar_mul(total, 1.0 / n)


# ---------------------------------------------------------------------------
# forward


def _gate(t: Tensor | None) -> Tensor | None:
    return None if t is None else ad.sigmoid(t)


def private_map(state: Mapping[str, Tensor], m: int, identity: bool):
    if identity:
        return lambda z: z

    def G(z):
        h = ad.gelu(ad.add_bias(ad.matmul(z, state[f"g.{m}.w1"]), state[f"g.{m}.b1"]))
        return ad.add_bias(ad.matmul(h, state[f"g.{m}.w2"]), state[f"g.{m}.b2"])

    return G


def shared_map(state: Mapping[str, Tensor], n_modalities: int, identity: bool):
    if identity:
        def H_mean(cat):
            D = cat.shape[-1] // n_modalities
            parts = [ad.slice_sequence(ad.transpose(cat, _swap_last(cat.ndim)), m * D, (m + 1) * D)
                     for m in range(n_modalities)]
            acc = parts[0]
            for p in parts[1:]:
                acc = ad.add(acc, p)
            return ad.transpose(ad.scalar_mul(acc, 1.0 / n_modalities), _swap_last(cat.ndim))
        return H_mean

    def H(cat):
        return ad.gelu(ad.add_bias(ad.matmul(cat, state["h.w"]), state["h.b"]))

    return H


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class RepOutput:
    logits: Tensor
    ortho_loss: Tensor | None
    # per modality: [F_p[0], ..., F_p[d]] as detached arrays; likewise shared
    private_trajectory: list
    shared_trajectory: list
    layouts: list


def rep_forward(inputs: Sequence[np.ndarray], backbone: Mapping[str, Tensor],
                bconfig: bb.BackboneConfig, state: Mapping[str, Tensor],
                config: RepConfig) -> RepOutput:
    """Logits (and orthogonality loss) for a batch whose missing modalities
    have already been replaced by placeholders."""
    K = bconfig.n_modalities
    d = config.replay_depth
    use_buffers = config.compose_buffers
    dual = use_buffers and config.dual_buffers and "shared" in state
    recur = config.uses_recurrence
    replay = use_buffers and config.replay

    xs, layouts = [], []
    for m in range(K):
        E0 = bb.embed_modality(backbone, bconfig, inputs[m], m)
        if use_buffers:
            theta = state.get(f"theta.{m}") if dual else None
            X, layout = compose_layer0_input(state["shared"] if dual else None,
                                             state[f"private.{m}"], E0, theta)
        else:
            X, layout = E0, BlockLayout(None, None, (0, E0.shape[-2]))
        xs.append(X)
        layouts.append(layout)

    F_p = [state[f"private.{m}"] for m in range(K)] if use_buffers else []
    F_s = state["shared"] if dual else None
    p_traj = [[f.data] for f in F_p]
    s_traj = [F_s.data] if F_s is not None else []
    alphas = [_gate(state.get(f"alpha.{m}")) for m in range(K)] if recur else []
    eps_s = _gate(state.get("eps_s")) if recur and dual else None
    beta_p = state.get("beta_p") if replay else None
    beta_s = state.get("beta_s") if replay and dual else None
    Gs = [private_map(state, m, config.identity_maps) for m in range(K)] if recur else []
    H = shared_map(state, K, config.identity_maps) if recur and dual else None
    ortho_terms = []

    for k in range(bconfig.n_layers):
        if replay and 1 <= k <= d:
            xs = [replay_inject(xs[m], layouts[m], F_p[m], F_s, beta_p, beta_s, k, d)
                  for m in range(K)]
        xs = [bb.encoder_layer_forward(backbone, bconfig, xs[m], k, m) for m in range(K)]
        if recur and 1 <= k <= d:
            F_p = [update_private_buffer(extract_layer_features(xs[m], layouts[m], "private"),
                                         F_p[m], alphas[m], Gs[m]) for m in range(K)]
            if dual:
                F_s = update_shared_buffer(F_p, F_s, eps_s, H, K)
                s_traj.append(F_s.data)
            for m in range(K):
                p_traj[m].append(F_p[m].data)
            if dual and config.ortho_weight > 0 and (config.ortho_all_layers or k == d):
                ortho_terms.append(orthogonality_loss(F_s, F_p, batch_dims=1))

    finals = [bb.final_norm(backbone, ad.slice_sequence(xs[m], *layouts[m].content), m)
              for m in range(K)]
    logits = bb.fuse_and_classify(state, bconfig, finals)
    ortho = None
    for t in ortho_terms:
        ortho = t if ortho is None else ad.add(ortho, t)
    return RepOutput(logits, ortho, p_traj, s_traj, layouts)


def with_overrides(config: RepConfig, **kw) -> RepConfig:
    return replace(config, **kw)
