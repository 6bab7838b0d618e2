"""Locate and parse the whitespace-separated data tables shipped with the package.

Set ``CRYOBENCH_DATA`` to a directory to override the bundled files.
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_VAR = "CRYOBENCH_DATA"
_BUNDLED = Path(__file__).resolve().parent / "data"


def data_path(name: str) -> Path:
    override = os.environ.get(ENV_VAR)
    if override:
        p = Path(override) / name
        if p.exists():
            return p
    return _BUNDLED / name


def read_table(name: str) -> list:
    """Return non-comment rows of a data file as lists of string tokens."""
    rows = []
    for line in data_path(name).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    return rows
