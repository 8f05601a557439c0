"""Synthetic multimodal classification task.

Generative process, per sample:

1. draw a class ``c`` (labels are balanced to within one sample per class);
2. draw one shared latent jitter ``u`` that every modality sees;
3. for each modality ``m`` and each of ``seq_len`` tokens, observe
   ``[P_shared[c] + u, P_private[m][c], 0...0] + noise_std * eps``.

``P_shared`` is common to all modalities (cross-modal semantics), while each
``P_private[m]`` is informative only through modality ``m``.  The trailing
block is pure noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

KINDS = ("image", "text", "audio")


@dataclass
class SyntheticTaskSpec:
    n_modalities: int = 2
    n_classes: int = 4
    feature_width: int = 16
    shared_dims: int = 4
    private_dims: int = 4
    noise_dims: int = 8
    seq_len: int = 8
    noise_std: float = 1.5
    signal_scale: float = 1.0
    shared_jitter: float = 0.3
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    # separate draw the backbone is pretrained on, so tuning never sees memorized samples
    n_pretrain: int = 2000
    seed: int = 0
    modality_kinds: tuple = ()

    def __post_init__(self):
        if not self.modality_kinds:
            self.modality_kinds = KINDS[: self.n_modalities]
        self.modality_kinds = tuple(self.modality_kinds)

    def validate(self) -> None:
        if self.shared_dims + self.private_dims + self.noise_dims != self.feature_width:
            raise ValueError(
                f"infeasible dim split: shared {self.shared_dims} + private "
                f"{self.private_dims} + noise {self.noise_dims} != feature_width "
                f"{self.feature_width}")
        if min(self.shared_dims, self.private_dims, self.noise_dims) < 0:
            raise ValueError("infeasible dim split: negative block width")
        if len(self.modality_kinds) != self.n_modalities:
            raise ValueError("modality_kinds must list one kind per modality")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_kinds"] = list(self.modality_kinds)
        return d


@dataclass
class Dataset:
    """Per-modality raw features ``(N, seq_len, width)`` plus integer labels."""

    features: list
    labels: np.ndarray
    kinds: tuple = field(default=())

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([f[idx] for f in self.features], self.labels[idx], self.kinds)

    def astype(self, dtype) -> "Dataset":
        return Dataset([f.astype(dtype) for f in self.features], self.labels, self.kinds)


def _prototypes(rng, n_classes: int, dims: int, scale: float) -> np.ndarray:
    if dims == 0:
        return np.zeros((n_classes, 0))
    if n_classes <= dims:
        q, _ = np.linalg.qr(rng.normal(size=(dims, dims)))
        protos = q[:n_classes]
    else:
        protos = rng.normal(size=(n_classes, dims))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return scale * protos


def _balanced_labels(rng, n: int, n_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def generate_synthetic(spec: SyntheticTaskSpec, rng: np.random.Generator) -> dict:
    """Return ``{"train", "val", "test", "pretrain"}`` datasets sharing one set of prototypes."""
    spec.validate()
    p_shared = _prototypes(rng, spec.n_classes, spec.shared_dims, spec.signal_scale)
    p_private = [_prototypes(rng, spec.n_classes, spec.private_dims, spec.signal_scale)
                 for _ in range(spec.n_modalities)]
    splits = {}
    sizes = (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test),
             ("pretrain", spec.n_pretrain))
    for name, n in sizes:
        y = _balanced_labels(rng, n, spec.n_classes)
        u = spec.shared_jitter * rng.normal(size=(n, 1, spec.shared_dims))
        feats = []
        for m in range(spec.n_modalities):
            clean = np.concatenate([
                np.broadcast_to(p_shared[y][:, None, :] + u, (n, spec.seq_len, spec.shared_dims)),
                np.broadcast_to(p_private[m][y][:, None, :], (n, spec.seq_len, spec.private_dims)),
                np.zeros((n, spec.seq_len, spec.noise_dims)),
            ], axis=-1)
            feats.append(clean + spec.noise_std * rng.normal(size=clean.shape))
        splits[name] = Dataset(feats, y, spec.modality_kinds)
    return splits


def nearest_class_mean_accuracy(train: Dataset, test: Dataset,
                                modalities=None) -> float:
    """Accuracy of a nearest-class-mean rule on token-averaged features."""
    mods = range(train.n_modalities) if modalities is None else modalities

    def summarize(ds):
        return np.concatenate([ds.features[m].mean(axis=1) for m in mods], axis=1)

    xtr, xte = summarize(train), summarize(test)
    classes = np.unique(train.labels)
    means = np.stack([xtr[train.labels == c].mean(axis=0) for c in classes])
    d = ((xte[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == test.labels).mean())
