"""Seeding, determinism pinning, hashing, and atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

_THREADS_PINNED = False


def pin_determinism() -> None:
    """Fix torch's CPU thread count so re-runs on one machine are bit-identical."""
    global _THREADS_PINNED
    if _THREADS_PINNED:
        return
    torch.set_num_threads(min(4, os.cpu_count() or 1))
    _THREADS_PINNED = True


def derive_seed(base: int, *parts: int | str) -> int:
    """Stable sub-seed from a base seed and a role tag; independent streams per role."""
    h = hashlib.sha256(repr((int(base),) + tuple(parts)).encode())
    return int.from_bytes(h.digest()[:8], "little") % (2**63 - 1)


def np_rng(base: int, *parts: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *parts))


def torch_gen(base: int, *parts: int | str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(base, *parts))
    return gen


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write-then-rename so readers never observe a half-written file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())
