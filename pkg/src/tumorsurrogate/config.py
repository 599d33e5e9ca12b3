"""TOML reading shared by the scenario loader and the pipeline."""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def read_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)
