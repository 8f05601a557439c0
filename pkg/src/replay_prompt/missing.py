"""Missing-modality scenarios and fixed placeholder inputs.

A scenario is one of

* ``complete``: every modality present;
* ``single(m, rate)``: modality ``m`` missing in ``round(rate * N)`` samples;
* ``multi(M, rate)``: a total budget of ``round(rate * N)`` missing slots split
  evenly over the modalities in ``M``, with disjoint per-modality sample sets
  so no sample ever loses more than one modality.

Rounding is half-up.  When the budget does not divide evenly the leftover
slots go to the earliest modalities in ``M``, so per-modality counts differ
by at most one and always sum to the budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Scenario:
    kind: str  # "complete" | "single" | "multi"
    modalities: tuple = ()
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("complete", "single", "multi"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"missing rate must lie in [0, 1], got {self.rate}")
        if self.kind == "single" and len(self.modalities) != 1:
            raise ValueError("single scenario takes exactly one modality")
        if self.kind == "multi" and not self.modalities:
            raise ValueError("multi scenario needs a non-empty modality set")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError("duplicate modality in scenario")

    @classmethod
    def complete(cls) -> "Scenario":
        return cls("complete")

    @classmethod
    def single(cls, modality: int, rate: float) -> "Scenario":
        return cls("single", (int(modality),), float(rate))

    @classmethod
    def multi(cls, modalities: Sequence[int], rate: float) -> "Scenario":
        return cls("multi", tuple(int(m) for m in modalities), float(rate))

    @classmethod
    def parse(cls, text: str, kinds: Sequence[str]) -> "Scenario":
        """Parse ``complete``, ``single:image:0.7`` or ``multi:image,text:0.7``.

        Modalities may be given by kind name or by index.
        """
        parts = text.strip().split(":")
        if parts == ["complete"]:
            return cls.complete()
        if len(parts) != 3 or parts[0] not in ("single", "multi"):
            raise ValueError(f"cannot parse scenario {text!r}")
        mods = []
        for tok in parts[1].split(","):
            tok = tok.strip()
            if tok.isdigit():
                idx = int(tok)
            elif tok in kinds:
                idx = list(kinds).index(tok)
            else:
                raise ValueError(f"unknown modality {tok!r} in scenario {text!r}")
            if idx >= len(kinds):
                raise ValueError(f"modality index {idx} out of range in {text!r}")
            mods.append(idx)
        rate = float(parts[2])
        if parts[0] == "single":
            if len(mods) != 1:
                raise ValueError(f"single scenario takes one modality: {text!r}")
            return cls.single(mods[0], rate)
        return cls.multi(mods, rate)

    def label(self, kinds: Sequence[str] | None = None) -> str:
        if self.kind == "complete":
            return "complete"
        names = [kinds[m] if kinds else str(m) for m in self.modalities]
        return f"{self.kind}:{','.join(names)}:{self.rate:g}"


@dataclass
class MissingPattern:
    """``mask[i, m]`` is True when modality ``m`` of sample ``i`` is missing."""

    mask: np.ndarray
    scenario: Scenario
    seed: int | None = None

    @property
    def n_samples(self) -> int:
        return self.mask.shape[0]

    def missing_counts(self) -> np.ndarray:
        return self.mask.sum(axis=0)

    def to_jsonl(self, kinds: Sequence[str] | None = None) -> str:
        names = list(kinds) if kinds else [str(m) for m in range(self.mask.shape[1])]
        lines = [json.dumps({"sample": i, "missing": {n: bool(v) for n, v in zip(names, row)}})
                 for i, row in enumerate(self.mask)]
        return "\n".join(lines) + ("\n" if lines else "")


def sample_missing_pattern(n: int, scenario: Scenario, rng: np.random.Generator,
                           n_modalities: int, seed: int | None = None) -> MissingPattern:
    if n < 0:
        raise ValueError("n must be >= 0")
    if any(not 0 <= m < n_modalities for m in scenario.modalities):
        raise ValueError(f"scenario modality out of range for {n_modalities} modalities")
    mask = np.zeros((n, n_modalities), dtype=bool)
    if scenario.kind == "single":
        if n_modalities < 2 and scenario.rate > 0:
            raise ValueError("a single-modality task cannot lose its only modality")
        count = round_half_up(scenario.rate * n)
        mask[rng.choice(n, size=count, replace=False), scenario.modalities[0]] = True
    elif scenario.kind == "multi":
        mods = scenario.modalities
        if len(mods) == n_modalities == 1 and scenario.rate > 0:
            raise ValueError("a single-modality task cannot lose its only modality")
        total = round_half_up(scenario.rate * n)
        base, extra = divmod(total, len(mods))
        order = rng.permutation(n)
        start = 0
        for j, m in enumerate(mods):
            count = base + (1 if j < extra else 0)
            mask[order[start:start + count], m] = True
            start += count
    return MissingPattern(mask, scenario, seed)


def verify_missing_statistics(pattern: MissingPattern) -> np.ndarray:
    """Empirical per-modality missing rate."""
    if pattern.n_samples == 0:
        return np.zeros(pattern.mask.shape[1])
    return pattern.missing_counts() / pattern.n_samples


# ---------------------------------------------------------------------------
# placeholders


def _image_placeholder(seq_len: int, width: int) -> np.ndarray:
    return np.ones((seq_len, width))


def _text_placeholder(seq_len: int, width: int) -> np.ndarray:
    # an empty string still tokenizes to begin/end markers
    x = np.zeros((seq_len, width))
    x[0, 0] = 1.0
    if seq_len > 1 and width > 1:
        x[1, 1] = 1.0
    return x


def _audio_placeholder(seq_len: int, width: int) -> np.ndarray:
    return np.zeros((seq_len, width))


PLACEHOLDERS = {
    "image": _image_placeholder,
    "text": _text_placeholder,
    "audio": _audio_placeholder,
}


def placeholder(kind: str, seq_len: int, width: int, dtype=np.float64) -> np.ndarray:
    try:
        make = PLACEHOLDERS[kind]
    except KeyError:
        raise KeyError(f"no placeholder registered for modality kind {kind!r}") from None
    out = make(seq_len, width).astype(dtype)
    out.flags.writeable = False
    return out


def apply_placeholder(sample: Sequence[np.ndarray], missing: Sequence[bool],
                      kinds: Sequence[str]) -> list:
    """Replace the missing modalities of one sample ``[(seq_len, width), ...]``."""
    if not len(sample) == len(missing) == len(kinds):
        raise ValueError("sample, missing flags and kinds must have one entry per modality")
    out = []
    for x, gone, kind in zip(sample, missing, kinds):
        if gone:
            out.append(placeholder(kind, x.shape[-2], x.shape[-1], x.dtype))
        else:
            out.append(x)
    return out


def apply_pattern(dataset: Dataset, pattern: MissingPattern) -> Dataset:
    """Dataset copy with every missing slot replaced by its placeholder."""
    if pattern.n_samples != len(dataset):
        raise ValueError(f"pattern covers {pattern.n_samples} samples, dataset has {len(dataset)}")
    feats = []
    for m, (x, kind) in enumerate(zip(dataset.features, dataset.kinds)):
        gone = pattern.mask[:, m]
        if not gone.any():
            feats.append(x)
            continue
        ph = placeholder(kind, x.shape[-2], x.shape[-1], x.dtype)
        feats.append(np.where(gone[:, None, None], ph, x))
    return Dataset(feats, dataset.labels, dataset.kinds)
