"""Key-value text format shared by system, lifting and metric files.

A file is a sequence of ``key = value`` statements separated by newlines or
semicolons; ``#`` starts a comment. Matrix values are JSON lists, either
nested rows or a flat row-major list. Semicolons inside brackets do not split
statements.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import DimensionError, ExprSyntaxError


def split_statements(source: str) -> list:
    statements = []
    depth = 0
    current = []
    for line in source.splitlines():
        line = line.split("#", 1)[0]
        for ch in line:
            if ch in "[(":
                depth += 1
            elif ch in "])":
                depth -= 1
            if ch == ";" and depth == 0:
                statements.append("".join(current))
                current = []
            else:
                current.append(ch)
        if depth == 0:
            statements.append("".join(current))
            current = []
        else:
            current.append(" ")
    if current:
        statements.append("".join(current))
    return [s.strip() for s in statements if s.strip()]


def parse_pairs(source: str) -> dict:
    """Return an ordered ``{key: raw value string}`` mapping; duplicate keys are an error."""
    pairs = {}
    for stmt in split_statements(source):
        if "=" not in stmt:
            raise ExprSyntaxError("expected 'key = value'", stmt, 0)
        key, value = stmt.split("=", 1)
        key = key.strip()
        if not key:
            raise ExprSyntaxError("empty key", stmt, 0)
        if key in pairs:
            raise ExprSyntaxError(f"duplicate key {key!r}", stmt, 0)
        pairs[key] = value.strip()
    return pairs


def parse_matrix(text: str, rows: int, cols: int, name: str = "matrix") -> np.ndarray:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExprSyntaxError(f"{name}: not a JSON list", text, exc.pos) from None
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 1 and arr.size == rows * cols:
        arr = arr.reshape(rows, cols)
    if arr.shape != (rows, cols):
        raise DimensionError(f"{name} has shape {arr.shape}, expected ({rows}, {cols})")
    return arr


def parse_vector(text: str, size: int | None = None, name: str = "vector") -> np.ndarray:
    text = text.strip()
    if not text.startswith("["):
        text = "[" + text + "]"
    arr = np.asarray(json.loads(text), dtype=float).ravel()
    if size is not None and arr.size != size:
        raise DimensionError(f"{name} has {arr.size} entries, expected {size}")
    return arr


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ExprSyntaxError("expected a boolean", text, 0)


def format_matrix(a) -> str:
    return json.dumps(np.asarray(a, dtype=float).tolist())
