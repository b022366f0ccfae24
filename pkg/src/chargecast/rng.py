"""Deterministic named random streams.

Every stochastic piece of the pipeline (init, dropout, shuffling, synthetic
data) draws from a named Philox stream so that a single seed reproduces the
whole run bit-for-bit, independent of call order elsewhere.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(seed: int, name: str) -> int:
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return (int(seed) << 64) ^ int.from_bytes(digest, "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator for one named purpose under one seed."""
    return np.random.Generator(np.random.Philox(key=_stream_key(seed, name)))


class RngHub:
    """Hands out independent named streams derived from a single seed.

    Repeated requests for the same name return a fresh generator at the
    start of that stream, so ``hub.stream("init")`` is reproducible no
    matter how many other streams were consumed in between.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        return stream(self.seed, name)
