"""REP tuning loop, evaluation under missing-modality scenarios, parameter accounting."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .data import Dataset
from .metrics import classification_metrics
from .missing import Scenario, apply_pattern, sample_missing_pattern
from .optim import SGDMomentum
from .rep import RepConfig, RepState, rep_forward
from .rng import substream

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    # train on complete data instead of the evaluation scenario
    train_complete: bool = False
    precision: str = "float32"
    calibration_size: int = 256
    eval_batch_size: int = 250

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TuneResult:
    state: RepState
    log: list


@dataclass
class MetricsReport:
    """Top-level metrics are the unweighted mean over ``breakdown`` entries."""

    accuracy: float
    f1_macro: float
    auroc: float
    breakdown: dict
    param_fraction: float
    seed: int
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def training_pattern_rng(seed: int) -> np.random.Generator:
    return substream(seed, "pattern", 0)


def eval_pattern_rng(seed: int, index: int) -> np.random.Generator:
    return substream(seed, "pattern", 1, index)


def masked(dataset: Dataset, scenario: Scenario, rng: np.random.Generator) -> Dataset:
    pattern = sample_missing_pattern(len(dataset), scenario, rng, dataset.n_modalities)
    return apply_pattern(dataset, pattern)


def init_state(weights: bb.BackboneWeights, rep_config: RepConfig, calibration: Dataset,
               optim: OptimConfig, seed: int) -> RepState:
    dtype = DTYPES[optim.precision]
    calib = [f[:optim.calibration_size] for f in calibration.features]
    return RepState.init(rep_config, weights, calib, substream(seed, "init"),
                         substream(seed, "noise"), dtype=dtype)


def batch_loss(backbone: Mapping, bconfig: bb.BackboneConfig, state: Mapping,
               rep_config: RepConfig, inputs: Sequence[np.ndarray], labels: np.ndarray):
    """``(total, cross_entropy, ortho_or_None, logits)`` for one batch."""
    out = rep_forward(inputs, backbone, bconfig, state, rep_config)
    ce = ad.cross_entropy(out.logits, labels)
    if out.ortho_loss is None or rep_config.ortho_weight == 0:
        return ce, ce, out.ortho_loss, out.logits
    total = ad.add(ce, ad.scalar_mul(out.ortho_loss, rep_config.ortho_weight))
    return total, ce, out.ortho_loss, out.logits


def train_rep(weights: bb.BackboneWeights, rep_config: RepConfig, train: Dataset,
              calibration: Dataset, scenario: Scenario, optim: OptimConfig, seed: int,
              state: RepState | None = None) -> TuneResult:
    """Tune every REP tensor plus the head copy; backbone weights are read only.

    Raises :class:`TrainingDivergence` on a non-finite loss or activation.
    """
    optim.validate()
    rep_config.validate(weights.config.n_layers)
    if not weights.frozen:
        raise ValueError("REP tuning needs a frozen backbone")
    dtype = DTYPES[optim.precision]
    bweights = weights.astype(dtype)
    backbone = bweights.tensors()
    if state is None:
        state = init_state(weights, rep_config, calibration, optim, seed)
    if not optim.train_complete:
        train = masked(train, scenario, training_pattern_rng(seed))
    train = train.astype(dtype)
    opt = SGDMomentum(optim.lr, optim.momentum)
    order = substream(seed, "shuffle")
    n = len(train)
    log = []
    for epoch in range(optim.epochs):
        perm = order.permutation(n)
        sums = {"loss": 0.0, "ce": 0.0, "ortho": 0.0, "correct": 0}
        for step, i in enumerate(range(0, n, optim.batch_size)):
            idx = perm[i:i + optim.batch_size]
            tensors = state.tensors(requires_grad=True)
            try:
                with ad.DiffGraph() as graph:
                    total, ce, ortho, logits = batch_loss(
                        backbone, weights.config, tensors, rep_config,
                        [f[idx] for f in train.features], train.labels[idx])
                grads = ad.backward(graph, total)
            except ad.NumericalError as exc:
                snap = {"epoch": epoch, "step": step, "gates": state.gate_values(),
                        "error": str(exc)}
                raise TrainingDivergence(f"non-finite values during tuning: {exc}", snap) from exc
            opt.step(state.params, {k: grads[t] for k, t in tensors.items() if t in grads})
            sums["loss"] += total.item() * len(idx)
            sums["ce"] += ce.item() * len(idx)
            sums["ortho"] += (ortho.item() if ortho is not None else 0.0) * len(idx)
            sums["correct"] += int((logits.data.argmax(1) == train.labels[idx]).sum())
        row = {"epoch": epoch, "loss": sums["loss"] / n, "ce": sums["ce"] / n,
               "ortho": sums["ortho"] / n, "train_accuracy": sums["correct"] / n}
        row.update(state.gate_values())
        log.append(row)
        logger.info("tune epoch %d loss %.4f ortho %.4f acc %.4f", epoch, row["loss"],
                    row["ortho"], row["train_accuracy"])
    return TuneResult(state, log)


def predict(weights: bb.BackboneWeights, state: RepState, rep_config: RepConfig,
            inputs: Sequence[np.ndarray], batch_size: int = 250, dtype=None) -> np.ndarray:
    dtype = dtype or state.params["head.w"].dtype
    backbone = weights.astype(dtype).tensors()
    tensors = state.tensors()
    n = len(inputs[0])
    out = []
    for i in range(0, n, batch_size):
        batch = [x[i:i + batch_size].astype(dtype, copy=False) for x in inputs]
        out.append(rep_forward(batch, backbone, weights.config, tensors, rep_config).logits.data)
    return np.concatenate(out, axis=0)


def count_trainable_fraction(checkpoint: Mapping[str, Mapping[str, np.ndarray]]) -> float:
    """REP parameters (tuned head copy included) over all parameters in use.

    ``checkpoint`` maps namespace -> {name: array}.  The backbone's own head is
    replaced by the tuned copy, so it is left out of the total when the REP
    namespace carries one.
    """
    rep = checkpoint.get("rep", {})
    backbone = checkpoint.get("backbone", {})
    rep_n = sum(int(np.size(v)) for v in rep.values())
    head_swapped = any(k.startswith("head.") for k in rep)
    bb_n = sum(int(np.size(v)) for k, v in backbone.items()
               if not (head_swapped and k.startswith("head.")))
    total = rep_n + bb_n
    return rep_n / total if total else 0.0


def evaluate(weights: bb.BackboneWeights, state: RepState, rep_config: RepConfig,
             test: Dataset, scenarios: Sequence[Scenario], seed: int,
             optim: OptimConfig | None = None, config_digest: str = "") -> MetricsReport:
    if not scenarios:
        raise ValueError("evaluate needs at least one scenario")
    optim = optim or OptimConfig()
    dtype = DTYPES[optim.precision]
    breakdown = {}
    for j, sc in enumerate(scenarios):
        data = masked(test, sc, eval_pattern_rng(seed, j))
        logits = predict(weights, state, rep_config, data.features, optim.eval_batch_size, dtype)
        breakdown[sc.label(test.kinds)] = classification_metrics(data.labels, logits)
    keys = ("accuracy", "f1_macro", "auroc")
    top = {k: float(np.mean([b[k] for b in breakdown.values()])) for k in keys}
    frac = count_trainable_fraction({"backbone": weights.params, "rep": state.params})
    return MetricsReport(top["accuracy"], top["f1_macro"], top["auroc"], breakdown,
                         round(frac, 6), seed, config_digest)
