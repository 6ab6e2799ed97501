"""Stable, hash-based child seeds.

Python's builtin hash() is salted per process, so reproducible fan-out
(per-trajectory generators, per-attempt draws) derives child seeds from
sha256 instead.
"""

from __future__ import annotations

import hashlib


def stable_seed(*parts: object) -> int:
    """Derive a 64-bit seed deterministically from the given parts."""
    payload = "\x1f".join(repr(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big")
