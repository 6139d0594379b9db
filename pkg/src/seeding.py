"""Seed derivation: one top-level seed, named sub-seeds, per-sample generators."""

import hashlib

import numpy as np


def named_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generator(seed: int, name: str | None = None) -> np.random.Generator:
    return np.random.default_rng(named_seed(seed, name) if name else seed)


def sample_generator(seed: int, index: int) -> np.random.Generator:
    # keyed by the global sample index so chunking never changes the stream
    return np.random.default_rng(np.random.SeedSequence([seed, index]))
