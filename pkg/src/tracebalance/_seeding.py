"""Seed derivation shared by every randomized stage."""

import zlib

import numpy as np


def derive_seed(seed: int, tag: str, *extra: int) -> int:
    """Stable 32-bit seed for ``(seed, tag, *extra)``.

    The same triple always yields the same value across processes and
    platforms, so stages that fork their own generators stay reproducible.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8"))]
    entropy.extend(int(e) & 0xFFFFFFFF for e in extra)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def make_rng(seed: int, tag: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag, *extra))
