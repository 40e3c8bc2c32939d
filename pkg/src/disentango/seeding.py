"""Deterministic named RNG streams: one root seed, independent substreams."""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def split_stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of `seed`; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_key(name)]))
