"""Labelled random streams derived from one master seed.

Each subsystem asks for a stream by a fixed label, so adding a new consumer
never shifts the numbers drawn by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Return an independent generator for ``label`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=[int(seed) & 0xFFFFFFFF, _label_key(label)])
    return np.random.default_rng(ss)


class Streams:
    """Lazily created, cached generators keyed by label."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: dict[str, np.random.Generator] = {}

    def __call__(self, label: str) -> np.random.Generator:
        gen = self._cache.get(label)
        if gen is None:
            gen = stream(self.seed, label)
            self._cache[label] = gen
        return gen
