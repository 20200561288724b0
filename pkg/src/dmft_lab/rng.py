"""Deterministic stream management on top of numpy's counter-based Philox.

Every consumer of randomness asks for a (seed, label) substream.  Labels are
hashed into the SeedSequence entropy pool, so streams with the same master
seed but different labels never collide, and a given (seed, label) pair is
bit-reproducible across platforms.
"""
from __future__ import annotations

import hashlib

import numpy as np

# labels used by the CLI seed fan-out; library code may use dotted sublabels
STREAM_LABELS = ("design", "population", "mc", "gp", "directions")


def _label_words(label: str) -> list[int]:
    # stable 128-bit digest of the label, as four uint32 words
    h = hashlib.sha256(label.encode("utf-8")).digest()[:16]
    return [int.from_bytes(h[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for the given master seed and stream label."""
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    ss = np.random.SeedSequence([int(seed) & (2**63 - 1), *_label_words(label)])
    return np.random.Generator(np.random.Philox(ss))
