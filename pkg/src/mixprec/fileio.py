"""Small file helpers shared by the trainer, lowering, and the CLI."""

from __future__ import annotations

import io
import os
import tempfile

import numpy as np


def atomic_write_bytes(path, payload: bytes):
    """Write-temp-then-rename so readers never observe partial files."""
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_npz(state: dict[str, np.ndarray], path):
    """npz archive written atomically; float64 round-trips bit-exactly."""
    buf = io.BytesIO()
    np.savez(buf, **state)
    atomic_write_bytes(path, buf.getvalue())


def load_npz(path) -> dict[str, np.ndarray]:
    with np.load(path) as npz:
        return {k: npz[k].copy() for k in npz.files}
