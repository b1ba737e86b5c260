"""Deterministic random-stream management.

Every stochastic component draws from its own named substream so that
adding draws in one place never shifts the sequence seen by another.
Substreams are derived from the run seed plus a label path, e.g.

    rng = substream(seed, "mobility", "speed", vehicle_id)

The label path is hashed (blake2s) into spawn keys for a SeedSequence,
which keeps streams statistically independent and reproducible across
platforms and numpy versions that share the PCG64 bit stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: object) -> int:
    """Map one path label to a stable 64-bit key."""
    raw = repr(label).encode("utf-8")
    digest = hashlib.blake2s(raw, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *labels: object) -> np.random.Generator:
    """Return a Generator for the substream named by ``labels``.

    The same (seed, labels) pair always yields an identical stream; any
    change to the path gives an unrelated one.
    """
    keys = [_label_key(lab) for lab in labels]
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(keys))
    return np.random.Generator(np.random.PCG64(ss))
