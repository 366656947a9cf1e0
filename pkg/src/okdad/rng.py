"""Seed fan-out.

Every random stream in the package is derived from one integer seed and a
tuple of names, so that adding a new consumer never shifts an existing one.
Streams use the counter-based Philox bit generator.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))


def derive_seed(seed: int, *keys) -> int:
    """Return a 63-bit integer seed for the stream named by ``keys``."""
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFFFFFFFFFFFFFF


def make_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def torch_generator(seed: int, *keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *keys))
    return g
