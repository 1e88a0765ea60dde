"""Atomic artifact writers.

Files land via temp-file + rename in the destination directory, so a
crashed run never leaves a half-written artifact and re-running with the
same config and seed reproduces every file byte-for-byte.
"""
from __future__ import annotations

import json
import os
import tempfile

from .errors import IoError


def atomic_write_text(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-artifact-")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def write_lines(path, lines):
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
