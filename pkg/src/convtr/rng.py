"""Deterministic, splittable random streams.

All randomness in the library flows through a counter-based Philox
generator. Independent streams are derived from a root seed plus a path of
string/int labels, so the stream a consumer sees never depends on how many
draws other consumers made.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label) -> int:
    digest = hashlib.blake2b(repr(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    """Seed material for the stream identified by ``(seed, *path)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_label_entropy(p) for p in path)
    return np.random.SeedSequence(entropy)


def make_rng(seed: int, *path) -> np.random.Generator:
    """Philox generator for the stream identified by ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def as_rng(seed_or_rng) -> np.random.Generator:
    """Accept either an integer seed or an existing generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(int(seed_or_rng))
