"""Shared helpers: stable seed derivation and canonical JSON hashing."""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def child_seed(master_seed: int, *parts) -> int:
    """Derive a 64-bit child seed from a master seed and context parts.

    Uses SHA-256 over a canonical text encoding, so the derivation is stable
    across processes, platforms and Python versions (unlike builtin hash()).
    Parts may be ints, strings, floats, or arrays/sequences of floats.
    """
    key = json.dumps(
        [int(master_seed)] + [_encode_part(p) for p in parts],
        separators=(",", ":"),
    )
    digest = hashlib.sha256(key.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little")


def _encode_part(part):
    if isinstance(part, bool):
        return int(part)
    if isinstance(part, (int, str)):
        return part
    if isinstance(part, float):
        return float(part).hex()
    if isinstance(part, np.ndarray):
        return [float(x).hex() for x in np.asarray(part, dtype=float).ravel()]
    if isinstance(part, (tuple, list)):
        return [_encode_part(p) for p in part]
    if isinstance(part, np.integer):
        return int(part)
    if isinstance(part, np.floating):
        return float(part).hex()
    raise TypeError(f"cannot derive seed from part of type {type(part).__name__}")


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no whitespace (hash-stable)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj: Any) -> str:
    """Short stable fingerprint of a JSON-serializable configuration."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
