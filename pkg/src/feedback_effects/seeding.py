"""Deterministic seed derivation and per-user RNG streams.

All randomness in the toolkit flows from a single 64-bit master seed.
Sub-streams are derived by hashing (seed, purpose label), so adding a new
consumer never shifts the draws of an existing one, and per-user streams
are keyed by user index so generation order (or worker count) cannot
change the output.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    """Derive a stable 64-bit sub-seed from ``(seed, label)``."""
    digest = hashlib.sha256(f"{seed & MASK64}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Counter-based generator for one named purpose."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, label)))


def user_stream(seed: int, label: str, index: int) -> np.random.Generator:
    """Independent stream for one simulated user.

    Keyed, not split sequentially: stream ``index`` is the same whether
    users are generated serially or in parallel blocks.
    """
    return np.random.Generator(
        np.random.Philox(key=derive_seed(seed, f"{label}:{index}"))
    )
