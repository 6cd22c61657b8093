"""Deterministic seed derivation.

Every random draw in the toolkit flows from one root seed through
``derive_seed``. The derivation is a SHA-256 of the root joined with a
label path (e.g. ``derive_seed(root, "rep", 3, "fold", 1, "tree", 17)``),
so independent components get independent streams and a rerun with the
same root reproduces every artifact byte for byte.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *path: object) -> int:
    """Derive a 64-bit child seed from ``root`` and a label path."""
    msg = ":".join([str(int(root)), *(str(p) for p in path)]).encode("utf-8")
    digest = hashlib.sha256(msg).digest()
    return int.from_bytes(digest[:8], "little")
