"""Flat ``key=value`` manifests.

One entry per line. Values are ints, floats, bare strings or lists written
as ``[a, b, c]``. Lines starting with ``#`` are comments. Keys keep
insertion order, so a manifest written twice from the same data is
byte-identical.
"""
from __future__ import annotations

from pathlib import Path

__all__ = ["dumps", "loads", "write", "read"]


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    if any(c in s for c in "\n=[],") or s != s.strip():
        raise ValueError(f"value {s!r} cannot be stored in a flat manifest")
    return s


def _parse(s: str):
    s = s.strip()
    if s.startswith("[") and s.endswith("]"):
        inner = s[1:-1].strip()
        return [_parse(x) for x in inner.split(",")] if inner else []
    if s in ("true", "false"):
        return s == "true"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def dumps(entries: dict) -> str:
    lines = []
    for k, v in entries.items():
        if "=" in k or "\n" in k:
            raise ValueError(f"bad key {k!r}")
        lines.append(f"{k}={_fmt(v)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = _parse(v)
    return out


def write(path: str | Path, entries: dict) -> None:
    Path(path).write_text(dumps(entries))


def read(path: str | Path) -> dict:
    return loads(Path(path).read_text())
