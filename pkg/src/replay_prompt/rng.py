"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "noise", "pattern", "shuffle", "pretrain")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for ``name`` under ``seed``; independent of every other name.

    ``extra`` integers split a stream further (e.g. per modality).
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), key, *map(int, extra)])
