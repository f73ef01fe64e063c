"""Line-delimited JSON records with a ``format_version`` header line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file; message names the file and line."""


def write_records(path, records: Iterable[dict], **header) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION, **header}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_header(path) -> dict:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header(path, first)


def _parse_header(path: Path, line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:1: header is not valid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or "format_version" not in header:
        raise FormatError(f"{path}:1: missing format_version header")
    if header["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}:1: unsupported format_version {header['format_version']!r}")
    return header


def read_records(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` pairs after validating the header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(encoding="utf-8") as fh:
        _parse_header(path, fh.readline())
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected an object")
            yield lineno, rec
