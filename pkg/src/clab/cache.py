"""Content-addressed cache for expensive arrays (kernel tables, DtN matrices).

Entries are ``.npy`` files named by the SHA-256 of their defining
parameters, each with a JSON sidecar recording those parameters, the
shape and the array hash.  Writes go through a temporary file and ``os.replace`` so a
crashed run never leaves a truncated entry.  Arrays handed out are
read-only, so no experiment can alter a cached artifact in place.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def cache_dir() -> Path:
    root = os.environ.get("CLAB_CACHE_DIR")
    return Path(root) if root else Path.home() / ".cache" / "clab"


def content_key(params: dict) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True, default=str).encode()).hexdigest()[:24]


def array_hash(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256(arr.tobytes())
    h.update(str((arr.dtype.str, arr.shape)).encode())
    return h.hexdigest()[:16]


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


class ArtifactCache:
    def __init__(self, root: Path | None = None):
        self.root = Path(root) if root is not None else cache_dir()
        self.hits = 0
        self.misses = 0

    def path(self, kind: str, params: dict) -> Path:
        return self.root / f"{kind}-{content_key(params)}.npy"

    def get_or_compute(self, kind: str, params: dict, compute) -> tuple[np.ndarray, str, bool]:
        """Return ``(array, hash, hit)``; ``compute()`` runs only on a miss."""
        p = self.path(kind, params)
        if p.exists():
            arr = np.load(p)
            self.hits += 1
            hit = True
        else:
            arr = np.asarray(compute())
            buf = io.BytesIO()
            np.save(buf, arr)
            atomic_write_bytes(p, buf.getvalue())
            sidecar = {"kind": kind, "params": params, "shape": list(arr.shape), "dtype": arr.dtype.str,
                       "hash": array_hash(arr)}
            atomic_write_text(p.with_suffix(".json"), json.dumps(sidecar, indent=2, sort_keys=True, default=str))
            self.misses += 1
            hit = False
        arr.setflags(write=False)
        return arr, array_hash(arr), hit
