"""Seed expansion.

One 64-bit user seed feeds a splitmix64 stream; each named consumer (weight
init, shuffling, synthetic noise, ...) gets its own numpy Generator seeded from
a distinct splitmix64 output so the streams never overlap.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, stream: str) -> int:
    state = (int(seed) & MASK64) ^ zlib.crc32(stream.encode("utf-8"))
    state, out = splitmix64(state)
    _, out2 = splitmix64(state ^ out)
    return out2


def make_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stream))


def truncated_normal(rng: np.random.Generator, shape, std=0.02, clip=2.0, dtype=np.float32):
    """Normal(0, std) samples redrawn until all lie within +/- clip*std."""
    out = rng.normal(0.0, std, size=shape)
    bound = clip * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)
