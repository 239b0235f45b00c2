"""Deterministic seed derivation.

All randomness in experiment cells is keyed off hashes of (master seed,
labels) so that results are independent of worker scheduling and stable
across platforms and processes.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """Collapse a label tuple into a 63-bit seed via SHA-256."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
