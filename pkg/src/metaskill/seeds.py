"""Deterministic seed derivation shared by the trainer and the harness."""
from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Hash heterogeneous parts into a stable 64-bit seed.

    Counter-like derivation keeps repetitions, rounds and sub-streams
    independent without any shared RNG state, so parallel workers and
    serial runs draw identical streams.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")
