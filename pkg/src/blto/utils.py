"""Shared helpers: seed derivation and error types."""

from __future__ import annotations

import hashlib


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite; carries partial records."""

    def __init__(self, message: str, records: list | None = None):
        super().__init__(message)
        self.records = records or []


def derive_seed(base: int, *tags: object) -> int:
    """Stable child seed from a base seed and a tag path.

    Hash-based so seeds for different stages/steps are decorrelated and
    reproducible across processes.
    """
    digest = hashlib.blake2b(digest_size=8)
    digest.update(str(int(base)).encode())
    for tag in tags:
        digest.update(b"/")
        digest.update(str(tag).encode())
    return int.from_bytes(digest.digest(), "little") & 0x7FFFFFFF
