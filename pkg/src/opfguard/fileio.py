"""Atomic file writes and float formatting shared by the on-disk formats."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def csv_matrix(header: list[str], rows: np.ndarray) -> str:
    lines = [",".join(header)]
    lines += [",".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(rows)]
    return "\n".join(lines) + "\n"


def read_csv_matrix(path) -> tuple[list[str], np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty file")
    header = text[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in text[1:] if ln.strip()], dtype=float)
    return header, data.reshape(-1, len(header))
