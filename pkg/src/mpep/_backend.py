"""Kernel backend selection.

The compiled extension is used when importable; ``MPEP_BACKEND=python``
forces the pure-Python twin and ``MPEP_BACKEND=compiled`` makes a missing
extension an error.
"""
from __future__ import annotations

import os

from . import _purecore

_cache = {"python": _purecore}


def load(name: str = "auto"):
    if name in _cache:
        return _cache[name]
    if name not in ("auto", "compiled"):
        raise ValueError(f"unknown backend {name!r}")
    try:
        from . import _core
    except ImportError:
        if name == "compiled":
            raise
        return _purecore
    _core._set_tables(_purecore.ZX, _purecore.ZR)
    _cache["compiled"] = _core
    return _core


def available() -> list[str]:
    names = ["python"]
    try:
        load("compiled")
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


core = load(os.environ.get("MPEP_BACKEND", "auto"))
