"""Seed handling and deterministic stream splitting.

Every stochastic component in the package draws from a generator produced
here. Child streams are derived from a master seed plus a structured path
(e.g. ``("term", 0)`` for the first kernel term's sketch, ``("fold", 3)``
for the fourth cross-fitting fold), so independent components never share a
stream and results are reproducible from the master seed alone.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

__all__ = ["child_rng", "hash_key", "resolve_seed"]

SEED_ENV_VAR = "GKRLS_SEED"


def hash_key(*parts) -> int:
    """Map an arbitrary tuple of hashable parts to a stable 32-bit integer.

    Uses SHA-256 of the repr, so the mapping is stable across processes and
    platforms (unlike Python's salted ``hash``).
    """
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def child_rng(seed: int, *path) -> np.random.Generator:
    """Return a Generator for the stream identified by ``(seed, *path)``.

    Parameters
    ----------
    seed : int
        Master seed.
    *path : hashable
        Stream coordinates. Strings and other non-integers are hashed to
        32-bit integers; integers are used as-is. Identical paths always
        yield identical streams; distinct paths yield independent streams.
    """
    key = tuple(p if isinstance(p, (int, np.integer)) else hash_key(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def resolve_seed(seed=None, default: int = 0) -> int:
    """Resolve a seed from an explicit value, the environment, or a default.

    Priority: explicit ``seed`` argument, then the ``GKRLS_SEED`` environment
    variable, then ``default``.
    """
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise ValueError(
                f"{SEED_ENV_VAR} must be an integer, got {env!r}"
            ) from err
    return int(default)
