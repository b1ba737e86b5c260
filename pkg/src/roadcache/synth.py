"""Synthetic rating data in the same line format the loader parses.

Used when no real rating file is on disk.  Contents belong to genres,
genre popularity follows a power law over a shuffled id assignment, and
each user draws items from a personal genre mixture, so user fingerprints
carry recoverable structure: similar mixtures produce similar catalogs.

Addressed with a ``synth://`` path, e.g. ``synth://users=600,contents=3952,seed=1``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .rng import substream

NUM_GENRES = 12
GENRE_CONCENTRATION = 0.25
POPULARITY_EXPONENT = 0.9
MIN_RATINGS = 30
MAX_RATINGS = 400
TIME_SPAN = 365 * 24 * 3600


def parse_synth_uri(uri: str) -> dict[str, int]:
    body = uri[len("synth://"):]
    params = {"users": 600, "contents": 3952, "seed": 1}
    if body:
        for piece in body.split(","):
            if "=" not in piece:
                raise ConfigError(f"bad synth parameter {piece!r} in {uri!r}")
            key, raw = piece.split("=", 1)
            key = key.strip()
            if key not in params:
                raise ConfigError(f"unknown synth parameter {key!r} in {uri!r}")
            try:
                params[key] = int(raw)
            except ValueError:
                raise ConfigError(f"synth parameter {key} must be an integer") from None
    if params["users"] < 1 or params["contents"] < NUM_GENRES:
        raise ConfigError(f"synth needs users >= 1 and contents >= {NUM_GENRES}")
    return params


def generate_lines(users: int, contents: int, seed: int) -> list[str]:
    """Produce ``UserID::MovieID::Rating::Timestamp`` lines, one per rating."""
    base = substream(seed, "synth")
    genre_of = base.integers(0, NUM_GENRES, size=contents)
    # Popularity rank is assigned within each genre so every genre has a
    # well-requested head; ranks are shuffled onto ids.
    weight = np.empty(contents)
    for g in range(NUM_GENRES):
        members = np.flatnonzero(genre_of == g)
        ranks = base.permutation(len(members))
        weight[members] = (ranks + 1.0) ** (-POPULARITY_EXPONENT)

    lines: list[str] = []
    for user in range(1, users + 1):
        rng = substream(seed, "synth", "user", user)
        mixture = rng.dirichlet(np.full(NUM_GENRES, GENRE_CONCENTRATION))
        count = int(np.clip(rng.lognormal(np.log(120.0), 0.45), MIN_RATINGS, MAX_RATINGS))
        count = min(count, contents)
        # Gumbel-max sampling without replacement, biased by the user's
        # genre mixture times content popularity.
        score = np.log(weight * mixture[genre_of] + 1e-300)
        keys = score + rng.gumbel(size=contents)
        items = np.argpartition(-keys, count - 1)[:count]
        affinity = mixture[genre_of[items]] / mixture.max()
        noise = rng.normal(0.0, 0.7, size=count)
        ratings = np.clip(np.rint(3.2 + 1.5 * affinity + noise), 1, 5).astype(int)
        stamps = np.sort(rng.integers(0, TIME_SPAN, size=count))
        order = rng.permutation(count)
        for idx in order:
            lines.append(f"{user}::{items[idx] + 1}::{ratings[idx]}::{stamps[idx]}")
    return lines
