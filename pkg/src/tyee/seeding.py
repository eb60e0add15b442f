"""Derivation of independent random streams from one root seed.

Each consumer of randomness (parameter init, batch shuffling, splits)
gets its own generator derived from the root seed and a purpose tag, so
adding a consumer never perturbs the streams of the others.
"""

import hashlib

import numpy as np


def derive_seed(root_seed: int, tag: str) -> int:
    """Hash ``root_seed`` and a purpose tag into a 64-bit child seed."""
    digest = hashlib.sha256(f"{root_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(root_seed: int, tag: str) -> np.random.Generator:
    """Return a generator seeded for one named purpose."""
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, tag)))


def rng_state(rng: np.random.Generator) -> dict:
    """Serializable state of a generator (JSON-safe)."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    """Rebuild a generator from :func:`rng_state` output."""
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng
