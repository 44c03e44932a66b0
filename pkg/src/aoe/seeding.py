"""Deterministic seed derivation for independent RNG streams.

Python's builtin ``hash`` is salted per process, so every derived seed goes
through SHA-256 instead. Streams derived from distinct label tuples are
independent for all practical purposes and stable across runs and platforms.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Map a master seed plus any labels to a 63-bit child seed."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
