"""Output files: JSON with 17 significant digits, CSV with shortest
round-trip floats, and the run manifest."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import OutputError


def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def to_json(obj: Any, indent: int = 2, _level: int = 0) -> str:
    """Deterministic JSON: sorted keys, floats to 17 significant digits,
    non-finite floats as null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{pad}{to_json(str(k))}: {to_json(obj[k], indent, _level + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [pad + to_json(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if hasattr(obj, "to_dict"):
        return to_json(obj.to_dict(), indent, _level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def ensure_dir(path: str | Path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise OutputError(f"{p} is not writable")
    return p


def _write(path: Path, text: str) -> Path:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def write_json(path: str | Path, obj: Mapping, config_hash: str) -> Path:
    doc = {"config_hash": config_hash, **obj}
    return _write(Path(path), to_json(doc) + "\n")


def write_csv(path: str | Path, rows: Iterable[Mapping], columns: Sequence[str], config_hash: str) -> Path:
    lines = [f"# config_hash={config_hash}", ",".join(columns)]
    for r in rows:
        lines.append(",".join(_cell(r.get(c)) for c in columns))
    return _write(Path(path), "\n".join(lines) + "\n")


def read_csv_hash(path: str | Path) -> str:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("# config_hash="):
        raise OutputError(f"{path} has no config hash line")
    return first.split("=", 1)[1]
